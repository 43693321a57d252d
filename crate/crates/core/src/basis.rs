//! Weakly positive series bases in the conditioning variable.
//!
//! Two families are provided: indicator (local-constant) functions on a
//! partition, and clamped B-splines evaluated with the Cox-de Boor
//! recursion. Basis values also serve as first-stage loss weights, so every
//! value is nonnegative.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    LocalConstant,
    Bspline,
}

/// A basis over the breakpoints `knots = [l_0, ..., l_t]`.
///
/// For B-splines the boundary knots are replicated `degree + 1` times, giving
/// `t + degree` basis functions. A local-constant basis has `t` terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub degree: usize,
    pub knots: Vec<f64>,
    #[serde(default)]
    pub normalize: bool,
    /// Constant added to every basis term when it is used as a first-stage
    /// weight. The second stage keeps the unshifted terms.
    #[serde(default)]
    pub affine_shift: Option<f64>,
}

impl BasisSpec {
    pub fn local_constant(knots: Vec<f64>) -> Self {
        BasisSpec {
            kind: BasisKind::LocalConstant,
            degree: 0,
            knots,
            normalize: false,
            affine_shift: None,
        }
    }

    pub fn bspline(knots: Vec<f64>, degree: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Bspline,
            degree,
            knots,
            normalize: false,
            affine_shift: None,
        }
    }

    /// Clamped B-spline with `interior` equispaced interior knots on `[lo, hi]`.
    pub fn bspline_on(lo: f64, hi: f64, interior: usize, degree: usize) -> Self {
        Self::bspline(crate::stats::linspace(lo, hi, interior + 2), degree)
    }

    pub fn normalized(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn with_shift(mut self, shift: Option<f64>) -> Self {
        self.affine_shift = shift;
        self
    }

    pub fn support(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Number of basis terms `k`.
    pub fn n_terms(&self) -> usize {
        let cells = self.knots.len().saturating_sub(1);
        match self.kind {
            BasisKind::LocalConstant => cells,
            BasisKind::Bspline => cells + self.degree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 {
            return Err(Error::BasisSpec("at least two knots (the support endpoints) are required".into()));
        }
        if self.knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::BasisSpec("knots must be finite".into()));
        }
        if self.knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::BasisSpec("knots must be nondecreasing".into()));
        }
        let (lo, hi) = self.support();
        if lo >= hi {
            return Err(Error::BasisSpec("the support must have positive length".into()));
        }
        match self.kind {
            BasisKind::LocalConstant => {
                if self.degree != 0 {
                    return Err(Error::BasisSpec("a local-constant basis has degree 0".into()));
                }
                if self.knots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::BasisSpec("local-constant knots must be strictly increasing".into()));
                }
            }
            BasisKind::Bspline => {
                let interior = &self.knots[1..self.knots.len() - 1];
                if interior.iter().any(|&k| k == lo || k == hi) {
                    return Err(Error::BasisSpec("interior knots must lie strictly inside the support".into()));
                }
                let max_mult = interior
                    .chunk_by(|a, b| a == b)
                    .map(<[f64]>::len)
                    .max()
                    .unwrap_or(0);
                if max_mult > self.degree + 1 {
                    return Err(Error::BasisSpec(format!(
                        "interior knot multiplicity {max_mult} exceeds degree + 1"
                    )));
                }
            }
        }
        if let Some(c) = self.affine_shift {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::BasisSpec("affine_shift must be a nonnegative number".into()));
            }
        }
        Ok(())
    }

    /// Unnormalized basis values at `x`.
    pub fn eval_raw(&self, x: f64) -> Result<Vec<f64>> {
        match self.kind {
            BasisKind::LocalConstant => local_constant_basis(x, &self.knots),
            BasisKind::Bspline => bspline_basis(x, &self.knots, self.degree),
        }
    }
}

fn check_support(x: f64, knots: &[f64]) -> Result<()> {
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    if !(x >= lo && x <= hi) {
        return Err(Error::OutOfSupport { x, lo, hi });
    }
    Ok(())
}

/// Indicators of the cells `[l_{j-1}, l_j)`; the last cell is closed on the
/// right so that every point of the support falls in exactly one cell.
pub fn local_constant_basis(x: f64, knots: &[f64]) -> Result<Vec<f64>> {
    if knots.len() < 2 {
        return Err(Error::BasisSpec("at least two knots are required".into()));
    }
    check_support(x, knots)?;
    let t = knots.len() - 1;
    let cell = knots[1..t].partition_point(|&k| k <= x);
    let mut out = vec![0.0; t];
    out[cell] = 1.0;
    Ok(out)
}

fn clamped_knots(knots: &[f64], degree: usize) -> Vec<f64> {
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let mut ext = Vec::with_capacity(knots.len() + 2 * degree);
    ext.extend(std::iter::repeat_n(lo, degree));
    ext.extend_from_slice(knots);
    ext.extend(std::iter::repeat_n(hi, degree));
    ext
}

/// Clamped B-spline basis of the given degree at `x` via the Cox-de Boor
/// recursion `B_{j,o+1} = w_{j,o} B_{j,o} + (1 - w_{j+1,o}) B_{j+1,o}` with
/// `w_{j,o}(x) = (x - t_j) / (t_{j+o} - t_j)` (zero on empty spans).
pub fn bspline_basis(x: f64, knots: &[f64], degree: usize) -> Result<Vec<f64>> {
    if knots.len() < 2 {
        return Err(Error::BasisSpec(format!(
            "degree-{degree} B-splines need at least two knots"
        )));
    }
    check_support(x, knots)?;
    let t = clamped_knots(knots, degree);
    let last = t.len() - 1;

    // order 1: indicators of [t_i, t_{i+1}), last nonempty span closed
    let mut b: Vec<f64> = (0..last)
        .map(|i| if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 })
        .collect();
    if x == t[last] {
        if let Some(i) = (0..last).rev().find(|&i| t[i] < t[i + 1]) {
            b[i] = 1.0;
        }
    }

    let omega = |i: usize, o: usize| {
        let den = t[i + o] - t[i];
        if den != 0.0 {
            (x - t[i]) / den
        } else {
            0.0
        }
    };
    for o in 1..=degree {
        b = (0..b.len() - 1)
            .map(|i| omega(i, o) * b[i] + (1.0 - omega(i + 1, o)) * b[i + 1])
            .collect();
    }
    Ok(b)
}

/// Basis evaluated at the sample points.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    spec: BasisSpec,
    values: DMatrix<f64>,
    column_norms: Vec<f64>,
    column_scale: Vec<f64>,
    xi_inf: f64,
    xi_2: f64,
}

impl BasisMatrix {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    /// `n x k` matrix with entry `(i, j) = p_j(X_i)`.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Root-mean-square of each column before normalization.
    pub fn column_norms(&self) -> &[f64] {
        &self.column_norms
    }

    /// `sup_i max_j |p_j(X_i)|` over the sample.
    pub fn xi_inf(&self) -> f64 {
        self.xi_inf
    }

    /// `sup_i ||p(X_i)||_2` over the sample.
    pub fn xi_2(&self) -> f64 {
        self.xi_2
    }

    pub fn affine_shift(&self) -> f64 {
        self.spec.affine_shift.unwrap_or(0.0)
    }

    /// First-stage weights for term `j`: `p_j(X_i) + c`.
    pub fn first_stage_weights(&self, j: usize) -> Vec<f64> {
        let c = self.affine_shift();
        self.column(j).iter().map(|&p| p + c).collect()
    }

    /// Basis vector at a new point, with the sample normalization applied.
    pub fn evaluate_at(&self, x: f64) -> Result<Vec<f64>> {
        let mut v = self.spec.eval_raw(x)?;
        v.iter_mut().zip(&self.column_scale).for_each(|(p, s)| *p *= s);
        Ok(v)
    }

    /// Basis rows at several points as a `len x k` matrix.
    pub fn evaluate_grid(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(xs.len(), self.k());
        for (i, &x) in xs.iter().enumerate() {
            let v = self.evaluate_at(x)?;
            out.row_mut(i).iter_mut().zip(v).for_each(|(o, p)| *o = p);
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let header: Vec<String> = (1..=self.k()).map(|j| format!("p{j}")).collect();
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.n() {
            let row: Vec<String> = self.values.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

pub fn evaluate_basis(spec: &BasisSpec, x_values: &[f64]) -> Result<BasisMatrix> {
    spec.validate()?;
    let n = x_values.len();
    if n == 0 {
        return Err(Error::BasisSpec("no evaluation points".into()));
    }
    let k = spec.n_terms();
    let mut values = DMatrix::zeros(n, k);
    for (i, &x) in x_values.iter().enumerate() {
        let row = spec.eval_raw(x)?;
        values.row_mut(i).iter_mut().zip(row).for_each(|(o, p)| *o = p);
    }
    let column_norms: Vec<f64> = values
        .column_iter()
        .map(|c| (c.norm_squared() / n as f64).sqrt())
        .collect();
    let column_scale = if spec.normalize {
        if let Some(j) = column_norms.iter().position(|&v| v == 0.0) {
            return Err(Error::BasisSpec(format!(
                "basis term {} is zero at every observation and cannot be normalized",
                j + 1
            )));
        }
        column_norms.iter().map(|v| 1.0 / v).collect()
    } else {
        vec![1.0; k]
    };
    for (j, s) in column_scale.iter().enumerate() {
        values.column_mut(j).scale_mut(*s);
    }
    let xi_inf = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let xi_2 = values.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    Ok(BasisMatrix {
        spec: spec.clone(),
        values,
        column_norms,
        column_scale,
        xi_inf,
        xi_2,
    })
}

/// `Q = (1/n) sum_i p(X_i) p(X_i)'` without any conditioning check.
pub fn gram(b: &BasisMatrix) -> DMatrix<f64> {
    let p = b.values();
    let mut q = p.transpose() * p / b.n() as f64;
    symmetrize(&mut q);
    q
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Second-stage design matrix together with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub q: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    pub min_eigenvalue: f64,
}

pub fn design_matrix(b: &BasisMatrix, eigen_floor: f64) -> Result<DesignMatrix> {
    let q = gram(b);
    let eig = SymmetricEigen::new(q.clone());
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_eigenvalue >= eigen_floor) {
        return Err(Error::SingularDesign {
            min_eigenvalue,
            floor: eigen_floor,
        });
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let mut q_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    symmetrize(&mut q_inv);
    Ok(DesignMatrix {
        q,
        q_inv,
        min_eigenvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indicator_cells() {
        let knots = [0.0, 0.5, 1.0];
        assert_eq!(local_constant_basis(0.25, &knots).unwrap(), vec![1.0, 0.0]);
        assert_eq!(local_constant_basis(0.5, &knots).unwrap(), vec![0.0, 1.0]);
        assert_eq!(local_constant_basis(1.0, &knots).unwrap(), vec![0.0, 1.0]);
        assert_eq!(local_constant_basis(0.0, &knots).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            local_constant_basis(1.5, &knots),
            Err(Error::OutOfSupport { .. })
        ));
    }

    #[test]
    fn hat_functions_at_middle_knot() {
        let v = bspline_basis(0.5, &[0.0, 0.5, 1.0], 1).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0]);
        // one recursion step by hand at x = 0.25: hats (1 - 2x), 2x, 0
        let v = bspline_basis(0.25, &[0.0, 0.5, 1.0], 1).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15 && v[2] == 0.0);
    }

    #[test]
    fn degree_zero_matches_indicators() {
        let knots = [0.0, 0.3, 0.7, 1.0];
        for x in [0.0, 0.1, 0.3, 0.5, 0.7, 0.99, 1.0] {
            assert_eq!(
                bspline_basis(x, &knots, 0).unwrap(),
                local_constant_basis(x, &knots).unwrap()
            );
        }
    }

    #[test]
    fn quadratic_without_interior_knots_is_bernstein() {
        for x in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let v = bspline_basis(x, &[0.0, 1.0], 2).unwrap();
            let expect = [(1.0 - x) * (1.0 - x), 2.0 * x * (1.0 - x), x * x];
            for (a, b) in v.iter().zip(expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn too_few_knots() {
        assert!(matches!(bspline_basis(0.0, &[0.0], 2), Err(Error::BasisSpec(_))));
    }

    #[test]
    fn local_constant_column_norms() {
        let spec = BasisSpec::local_constant(vec![0.0, 0.5, 1.0]);
        let b = evaluate_basis(&spec, &[0.1, 0.2, 0.6, 0.9]).unwrap();
        for v in b.column_norms() {
            assert!((v * v - 0.5).abs() < 1e-15);
        }
        let b = evaluate_basis(&spec.normalized(true), &[0.1, 0.2, 0.6, 0.9]).unwrap();
        for j in 0..2 {
            let m2: f64 = b.column(j).iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((m2 - 1.0).abs() < 1e-12);
        }
        let dm = design_matrix(&b, DEFAULT_EIGEN_FLOOR).unwrap();
        assert!((dm.q[(0, 0)] - 1.0).abs() < 1e-12 && (dm.q[(1, 1)] - 1.0).abs() < 1e-12);
        assert_eq!(dm.q[(0, 1)], 0.0);
    }

    #[test]
    fn zero_shift_is_identity() {
        let spec = BasisSpec::bspline(vec![0.0, 1.0], 2).with_shift(Some(0.0));
        let b = evaluate_basis(&spec, &[0.1, 0.4, 0.8]).unwrap();
        for j in 0..3 {
            assert_eq!(b.first_stage_weights(j), b.column(j).to_vec());
        }
    }

    #[test]
    fn single_observation_gram_is_outer_product() {
        let spec = BasisSpec::bspline(vec![0.0, 1.0], 2);
        let b = evaluate_basis(&spec, &[0.3]).unwrap();
        let p = b.row(0);
        let q = gram(&b);
        for i in 0..3 {
            for j in 0..3 {
                assert!((q[(i, j)] - p[i] * p[j]).abs() < 1e-15);
            }
        }
        assert!(matches!(
            design_matrix(&b, DEFAULT_EIGEN_FLOOR),
            Err(Error::SingularDesign { .. })
        ));
    }

    #[test]
    fn empty_cell_cannot_be_normalized() {
        let spec = BasisSpec::local_constant(vec![0.0, 0.5, 1.0]).normalized(true);
        assert!(matches!(evaluate_basis(&spec, &[0.1, 0.2]), Err(Error::BasisSpec(_))));
    }

    #[test]
    fn evaluate_at_uses_sample_scaling() {
        let spec = BasisSpec::bspline(vec![0.0, 0.5, 1.0], 2).normalized(true);
        let xs = [0.05, 0.3, 0.45, 0.6, 0.8, 0.95];
        let b = evaluate_basis(&spec, &xs).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let v = b.evaluate_at(x).unwrap();
            for j in 0..b.k() {
                assert!((v[j] - b.values()[(i, j)]).abs() < 1e-15);
            }
        }
    }
}
