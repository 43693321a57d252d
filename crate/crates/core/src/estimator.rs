//! Second stage: augmented inverse propensity weighted signals, the series
//! coefficients, their sandwich variance and the confidence bands.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, evaluate_basis, symmetrize, BasisKind, BasisMatrix, BasisSpec, DesignMatrix};
use crate::dataset::{Dataset, PreprocessConfig};
use crate::error::{Error, Result};
use crate::par::{map_indexed, try_map_indexed, Execution};
use crate::penalty::{select_penalties, PenaltyConfig, PenaltySelection};
use crate::rng::{substream, TAG_UNIFORM_BAND};
use crate::solver::{gradient, linear_index, Arm, NuisanceModel, SolverConfig, SolverResult};
use crate::stats::{linspace, logistic, normal_quantile, order_rank, order_statistic};

/// Treated-arm signal `d y / pi - (d / pi - 1) m`.
pub fn aipw_treated(y: f64, d: f64, pi: f64, m: f64) -> f64 {
    d * y / pi - (d / pi - 1.0) * m
}

/// Control-arm signal `(1 - d) y / (1 - pi) - ((1 - d) / (1 - pi) - 1) m`.
///
/// With the correct propensity its conditional mean equals `E[Y_0 | Z]` for
/// any `m`, and with the correct `m` for any propensity.
pub fn aipw_control(y: f64, d: f64, pi: f64, m: f64) -> f64 {
    let w = (1.0 - d) / (1.0 - pi);
    w * y - (w - 1.0) * m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub kind: BasisKind,
    pub degree: usize,
    /// Number of equispaced interior knots; ignored when `knots` is given.
    pub interior_knots: usize,
    /// Full breakpoint sequence including both support endpoints.
    pub knots: Option<Vec<f64>>,
    pub normalize: bool,
    pub affine_shift: Option<f64>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            kind: BasisKind::Bspline,
            degree: 2,
            interior_knots: 0,
            knots: None,
            normalize: true,
            affine_shift: None,
        }
    }
}

impl BasisConfig {
    /// The basis over `[lo, hi]` (normally the observed range of `X`).
    pub fn resolve(&self, lo: f64, hi: f64) -> BasisSpec {
        let knots = self
            .knots
            .clone()
            .unwrap_or_else(|| linspace(lo, hi, self.interior_knots + 2));
        let spec = match self.kind {
            BasisKind::LocalConstant => BasisSpec::local_constant(knots),
            BasisKind::Bspline => BasisSpec::bspline(knots, self.degree),
        };
        spec.normalized(self.normalize).with_shift(self.affine_shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub eta: f64,
    pub grid_size: usize,
    /// Explicit evaluation points; defaults to `grid_size` equispaced points
    /// over the observed range of `X`.
    pub grid: Option<Vec<f64>>,
    pub n_boot: usize,
    pub seed: u64,
    pub eigen_floor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            eta: 0.05,
            grid_size: 100,
            grid: None,
            n_boot: 10_000,
            seed: 0,
            eigen_floor: crate::basis::DEFAULT_EIGEN_FLOOR,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if self.grid.as_ref().map_or(self.grid_size == 0, |g| g.is_empty()) {
            return Err(Error::Config("the evaluation grid is empty".into()));
        }
        if self.n_boot == 0 {
            return Err(Error::Config("inference n_boot must be at least 1".into()));
        }
        if !(self.eigen_floor > 0.0) {
            return Err(Error::Config("eigen_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to run the estimator on a prepared dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub basis: BasisConfig,
    pub preprocess: PreprocessConfig,
    pub solver: SolverConfig,
    pub penalty: PenaltyConfig,
    pub inference: InferenceConfig,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.solver.validate()?;
        self.penalty.validate()?;
        self.inference.validate()
    }
}

/// First-stage pair for one basis term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermFit {
    pub lambda_gamma: f64,
    pub lambda_alpha: f64,
    pub gamma: SolverResult,
    pub alpha: SolverResult,
    /// `||E_n[w (1 - D / pi) Z]||_inf` at the unclipped propensity (treated
    /// arm; the control analog uses `1 - D` and `1 - pi`).
    pub foc_sup: f64,
    /// Rows of the targeted arm whose propensity was clipped.
    pub propensity_clips: usize,
    pub outcome_clips: usize,
}

/// All first-stage fits of one arm and the resulting `n x k` signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFit {
    pub arm: Arm,
    pub terms: Vec<TermFit>,
    #[serde(skip)]
    pub signals: DMatrix<f64>,
}

impl ArmFit {
    pub fn clip_events(&self) -> usize {
        self.terms.iter().map(|t| t.propensity_clips + t.outcome_clips).sum()
    }
}

fn arm_of(model: NuisanceModel) -> Arm {
    match model {
        NuisanceModel::Calibrated(arm) => arm,
        NuisanceModel::Likelihood => Arm::Treated,
    }
}

struct SignalColumn {
    values: Vec<f64>,
    propensity_clips: usize,
    outcome_clips: usize,
}

fn signal_column(
    model: NuisanceModel,
    ds: &Dataset,
    gamma: &[f64],
    alpha: &[f64],
    clip: &PreprocessConfig,
) -> SignalColumn {
    let arm = arm_of(model);
    let (y, d) = (ds.y(), ds.d());
    let g_index = linear_index(ds.z(), gamma);
    let m_index = linear_index(ds.z(), alpha);
    let (ylo, yhi) = ds.y_range();
    let m_bounds = clip.outcome_clip_frac.map(|f| (ylo - f * (yhi - ylo), yhi + f * (yhi - ylo)));
    let mut propensity_clips = 0;
    let mut outcome_clips = 0;
    let values = (0..ds.n())
        .map(|i| {
            let mut pi = logistic(g_index[i]);
            if let Some((lo, hi)) = clip.propensity_clip {
                let c = pi.clamp(lo, hi);
                let in_arm = match arm {
                    Arm::Treated => d[i] == 1.0,
                    Arm::Control => d[i] == 0.0,
                };
                if c != pi && in_arm {
                    propensity_clips += 1;
                }
                pi = c;
            }
            let mut m = m_index[i];
            if let Some((lo, hi)) = m_bounds {
                let c = m.clamp(lo, hi);
                if c != m {
                    outcome_clips += 1;
                }
                m = c;
            }
            match arm {
                Arm::Treated => aipw_treated(y[i], d[i], pi, m),
                Arm::Control => aipw_control(y[i], d[i], pi, m),
            }
        })
        .collect();
    SignalColumn {
        values,
        propensity_clips,
        outcome_clips,
    }
}

fn fit_term(
    model: NuisanceModel,
    ds: &Dataset,
    w: &[f64],
    lambdas: (f64, f64),
    clip: &PreprocessConfig,
    solver: &SolverConfig,
) -> Result<(TermFit, Vec<f64>)> {
    let gamma = model.fit_propensity(w, ds.d(), ds.z(), lambdas.0, solver, None)?;
    let v = model.outcome_weights(ds.d(), &linear_index(ds.z(), &gamma.coef));
    let alpha = model.fit_outcome(w, &v, ds.z(), ds.y(), lambdas.1, solver, None)?;
    let problem = model.propensity_problem(w, ds.d(), ds.z(), lambdas.0);
    let foc_sup = gradient(&problem, &gamma.coef).iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let col = signal_column(model, ds, &gamma.coef, &alpha.coef, clip);
    Ok((
        TermFit {
            lambda_gamma: lambdas.0,
            lambda_alpha: lambdas.1,
            gamma,
            alpha,
            foc_sup,
            propensity_clips: col.propensity_clips,
            outcome_clips: col.outcome_clips,
        },
        col.values,
    ))
}

/// Fits the propensity and outcome models for every basis term, each
/// weighted by `p_j(X) + c`, and builds the signal matrix.
pub fn fit_first_stage(
    model: NuisanceModel,
    ds: &Dataset,
    basis: &BasisMatrix,
    penalties: &[(f64, f64)],
    clip: &PreprocessConfig,
    solver: &SolverConfig,
    exec: Execution,
) -> Result<ArmFit> {
    if penalties.len() != basis.k() {
        return Err(Error::Config(format!(
            "{} penalty pairs for {} basis terms",
            penalties.len(),
            basis.k()
        )));
    }
    let fits = try_map_indexed(exec, basis.k(), |j| {
        fit_term(model, ds, &basis.first_stage_weights(j), penalties[j], clip, solver)
    })?;
    let mut signals = DMatrix::zeros(ds.n(), basis.k());
    let mut terms = Vec::with_capacity(fits.len());
    for (j, (term, col)) in fits.into_iter().enumerate() {
        signals.column_mut(j).copy_from_slice(&col);
        terms.push(term);
    }
    Ok(ArmFit {
        arm: arm_of(model),
        terms,
        signals,
    })
}

/// One unweighted first-stage pair whose signal is shared by all `k` terms.
pub fn fit_first_stage_shared(
    model: NuisanceModel,
    ds: &Dataset,
    k: usize,
    penalties: (f64, f64),
    clip: &PreprocessConfig,
    solver: &SolverConfig,
) -> Result<ArmFit> {
    let ones = vec![1.0; ds.n()];
    let (term, col) = fit_term(model, ds, &ones, penalties, clip, solver)?;
    let signals = DMatrix::from_fn(ds.n(), k, |i, _| col[i]);
    Ok(ArmFit {
        arm: arm_of(model),
        terms: vec![term],
        signals,
    })
}

/// `Q^{-1} v` with `v_j = E_n[p_j S_j]`, or with an affine weight shift `c`,
/// `v_j = E_n[(p_j + c) S_j - c S_1]`.
pub fn second_stage_beta(basis: &BasisMatrix, signals: &DMatrix<f64>, design: &DesignMatrix) -> DVector<f64> {
    let (n, k) = (basis.n(), basis.k());
    let c = basis.affine_shift();
    let v = DVector::from_fn(k, |j, _| {
        let p = basis.column(j);
        (0..n)
            .map(|i| (p[i] + c) * signals[(i, j)] - c * signals[(i, 0)])
            .sum::<f64>()
            / n as f64
    });
    &design.q_inv * v
}

/// `e_ij = S_ij - p(X_i)' beta`.
pub fn residual_matrix(basis: &BasisMatrix, signals: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let fitted = basis.values() * beta;
    DMatrix::from_fn(signals.nrows(), signals.ncols(), |i, j| signals[(i, j)] - fitted[i])
}

/// `Q^{-1} E_n[(p o a_i)(p o b_i)'] Q^{-1}` for residual matrices `a`, `b`.
pub fn cross_omega(basis: &BasisMatrix, a: &DMatrix<f64>, b: &DMatrix<f64>, design: &DesignMatrix) -> DMatrix<f64> {
    let n = basis.n();
    let pa = basis.values().component_mul(a);
    let pb = basis.values().component_mul(b);
    let middle = pa.transpose() * pb / n as f64;
    &design.q_inv * middle * &design.q_inv
}

/// Sandwich variance of the series coefficients.
pub fn omega_hat(basis: &BasisMatrix, residuals: &DMatrix<f64>, design: &DesignMatrix) -> DMatrix<f64> {
    let mut o = cross_omega(basis, residuals, residuals, design);
    symmetrize(&mut o);
    o
}

/// Variance of the difference of the treated and control coefficients,
/// written as a single sandwich in the residual differences.
pub fn combined_omega(
    basis: &BasisMatrix,
    treated: &DMatrix<f64>,
    control: &DMatrix<f64>,
    design: &DesignMatrix,
) -> DMatrix<f64> {
    omega_hat(basis, &(treated - control), design)
}

const PSD_SLACK: f64 = 1e-10;

/// `sqrt(p' Omega p) / sqrt(n)`.
pub fn sigma_hat(p: &[f64], omega: &DMatrix<f64>, n: usize) -> Result<f64> {
    let pv = DVector::from_column_slice(p);
    let q = pv.dot(&(omega * &pv));
    let scale = pv.norm_squared() * omega.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if q < -PSD_SLACK * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical(format!("negative variance quadratic form {q:.3e}")));
    }
    Ok(q.max(0.0).sqrt() / (n as f64).sqrt())
}

/// `ghat -/+ z_{1 - eta/2} sigma`.
pub fn pointwise_band(ghat: f64, sigma: f64, eta: f64) -> (f64, f64) {
    let z = normal_quantile(1.0 - eta / 2.0);
    (ghat - z * sigma, ghat + z * sigma)
}

/// Symmetric square root with eigenvalues clamped at zero.
pub fn psd_sqrt(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(omega.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-8 * top.max(f64::MIN_POSITIVE)) {
        return Err(Error::Numerical("variance matrix is not positive semidefinite".into()));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let mut s = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    symmetrize(&mut s);
    Ok(s)
}

const DRAW_CHUNK: usize = 1024;

/// Bootstrap draws of `sup_x |a_x' N| / ||a_x||` with `a_x = Omega^{1/2} p(x)`
/// and `N ~ N(0, I_k)`. Draw `b` uses its own random substream.
pub fn uniform_statistics(
    omega: &DMatrix<f64>,
    grid_basis: &DMatrix<f64>,
    n_boot: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    let root = psd_sqrt(omega)?;
    let a = grid_basis * &root;
    let rows: Vec<(Vec<f64>, f64)> = a
        .row_iter()
        .map(|r| (r.iter().copied().collect::<Vec<_>>(), r.norm()))
        .filter(|(_, norm)| *norm > 0.0)
        .collect();
    if rows.is_empty() {
        return Err(Error::Degenerate("every grid point has zero standard error".into()));
    }
    let k = omega.nrows();
    let chunks = n_boot.div_ceil(DRAW_CHUNK);
    let parts = map_indexed(exec, chunks, |c| {
        let start = c * DRAW_CHUNK;
        let end = (start + DRAW_CHUNK).min(n_boot);
        let mut draw = vec![0.0; k];
        (start..end)
            .map(|b| {
                let mut rng = substream(seed, &[TAG_UNIFORM_BAND, b as u64]);
                draw.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                rows.iter()
                    .map(|(ax, norm)| (ax.iter().zip(&draw).map(|(p, e)| p * e).sum::<f64>() / norm).abs())
                    .fold(0.0, f64::max)
            })
            .collect::<Vec<f64>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// `ceil((1 - eta/2) B)`-th order statistic of the uniform statistics, one
/// value per requested `eta`, all from the same draws.
pub fn uniform_critical_values(
    omega: &DMatrix<f64>,
    grid_basis: &DMatrix<f64>,
    etas: &[f64],
    n_boot: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    let stats = uniform_statistics(omega, grid_basis, n_boot, seed, exec)?;
    Ok(etas
        .iter()
        .map(|eta| order_statistic(&stats, order_rank(1.0 - eta / 2.0, n_boot)))
        .collect())
}

pub fn uniform_critical_value(
    omega: &DMatrix<f64>,
    grid_basis: &DMatrix<f64>,
    eta: f64,
    n_boot: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    Ok(uniform_critical_values(omega, grid_basis, &[eta], n_boot, seed, exec)?[0])
}

/// Estimates, standard errors and bands on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub grid: Vec<f64>,
    pub ghat: Vec<f64>,
    pub sigma: Vec<f64>,
    pub pointwise_lo: Vec<f64>,
    pub pointwise_hi: Vec<f64>,
    pub normal_crit: f64,
    pub uniform_crit: f64,
    pub uniform_lo: Vec<f64>,
    pub uniform_hi: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn bands(
    basis: &BasisMatrix,
    beta: &DVector<f64>,
    omega: &DMatrix<f64>,
    grid: &[f64],
    eta: f64,
    n_boot: usize,
    seed: u64,
    exec: Execution,
) -> Result<Bands> {
    let gb = basis.evaluate_grid(grid)?;
    let n = basis.n();
    let ghat: Vec<f64> = (&gb * beta).iter().copied().collect();
    let sigma = (0..grid.len())
        .map(|r| sigma_hat(&gb.row(r).iter().copied().collect::<Vec<_>>(), omega, n))
        .collect::<Result<Vec<_>>>()?;
    let normal_crit = normal_quantile(1.0 - eta / 2.0);
    let uniform_crit = uniform_critical_value(omega, &gb, eta, n_boot, seed, exec)?;
    let lohi = |c: f64| -> (Vec<f64>, Vec<f64>) {
        ghat.iter().zip(&sigma).map(|(g, s)| (g - c * s, g + c * s)).unzip()
    };
    let (pointwise_lo, pointwise_hi) = lohi(normal_crit);
    let (uniform_lo, uniform_hi) = lohi(uniform_crit);
    Ok(Bands {
        grid: grid.to_vec(),
        ghat,
        sigma,
        pointwise_lo,
        pointwise_hi,
        normal_crit,
        uniform_crit,
        uniform_lo,
        uniform_hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// `E[Y_1 | X = x]`.
    Treated,
    /// `E[Y_0 | X = x]`.
    Control,
    /// `E[Y_1 - Y_0 | X = x]`.
    Cate,
}

/// Complete output of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateFit {
    pub mode: FitMode,
    pub n: usize,
    pub d_z: usize,
    pub k: usize,
    pub basis: BasisSpec,
    pub basis_column_norms: Vec<f64>,
    pub beta: Vec<f64>,
    pub omega: Vec<Vec<f64>>,
    pub eta: f64,
    pub bands: Bands,
    pub penalties: Vec<PenaltySelection>,
    pub arms: Vec<ArmFit>,
}

impl CateFit {
    pub fn clip_events(&self) -> usize {
        self.arms.iter().map(ArmFit::clip_events).sum()
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Evaluation grid: configured points or an equispaced grid over `[lo, hi]`.
pub fn evaluation_grid(cfg: &InferenceConfig, lo: f64, hi: f64) -> Vec<f64> {
    cfg.grid.clone().unwrap_or_else(|| linspace(lo, hi, cfg.grid_size))
}

/// Selects penalties and fits one arm.
pub fn fit_arm(
    model: NuisanceModel,
    ds: &Dataset,
    basis: &BasisMatrix,
    cfg: &FitConfig,
    exec: Execution,
) -> Result<(PenaltySelection, ArmFit)> {
    let sel = select_penalties(model, ds, basis, &cfg.penalty, &cfg.solver, exec)?;
    let pairs: Vec<(f64, f64)> = sel.terms.iter().map(|t| (t.lambda_gamma, t.lambda_alpha)).collect();
    let arm = fit_first_stage(model, ds, basis, &pairs, &cfg.preprocess, &cfg.solver, exec)?;
    Ok((sel, arm))
}

/// Runs the estimator on an already preprocessed dataset.
pub fn fit(ds: &Dataset, cfg: &FitConfig, mode: FitMode, exec: Execution) -> Result<CateFit> {
    cfg.validate()?;
    let (lo, hi) = ds.x_range();
    let spec = cfg.basis.resolve(lo, hi);
    let basis = evaluate_basis(&spec, ds.x())?;
    let design = design_matrix(&basis, cfg.inference.eigen_floor)?;
    let arms: Vec<Arm> = match mode {
        FitMode::Treated => vec![Arm::Treated],
        FitMode::Control => vec![Arm::Control],
        FitMode::Cate => vec![Arm::Treated, Arm::Control],
    };
    let mut penalties = Vec::new();
    let mut fits = Vec::new();
    for arm in arms {
        let (sel, f) = fit_arm(NuisanceModel::Calibrated(arm), ds, &basis, cfg, exec)?;
        penalties.push(sel);
        fits.push(f);
    }
    let betas: Vec<DVector<f64>> = fits
        .iter()
        .map(|f| second_stage_beta(&basis, &f.signals, &design))
        .collect();
    let resid: Vec<DMatrix<f64>> = fits
        .iter()
        .zip(&betas)
        .map(|(f, b)| residual_matrix(&basis, &f.signals, b))
        .collect();
    let (beta, omega) = if mode == FitMode::Cate {
        (&betas[0] - &betas[1], combined_omega(&basis, &resid[0], &resid[1], &design))
    } else {
        (betas[0].clone(), omega_hat(&basis, &resid[0], &design))
    };
    let grid = evaluation_grid(&cfg.inference, lo, hi);
    let inf = &cfg.inference;
    let bands = bands(&basis, &beta, &omega, &grid, inf.eta, inf.n_boot, inf.seed, exec)?;
    Ok(CateFit {
        mode,
        n: ds.n(),
        d_z: ds.d_z(),
        k: basis.k(),
        basis: spec,
        basis_column_norms: basis.column_norms().to_vec(),
        beta: beta.iter().copied().collect(),
        omega: matrix_rows(&omega),
        eta: inf.eta,
        bands,
        penalties,
        arms: fits,
    })
}

/// Formats `v` with at most `digits` significant digits.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), v).parse().unwrap_or(v);
    rounded.to_string()
}

/// Plot-ready grid table: `x, ghat|cate, sigma, pw_lo, pw_hi, unif_lo, unif_hi`.
pub fn write_grid_csv(fit: &CateFit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let label = if fit.mode == FitMode::Cate { "cate" } else { "ghat" };
    writeln!(out, "x,{label},sigma,pw_lo,pw_hi,unif_lo,unif_hi").map_err(io)?;
    let b = &fit.bands;
    for r in 0..b.grid.len() {
        let row = [
            b.grid[r],
            b.ghat[r],
            b.sigma[r],
            b.pointwise_lo[r],
            b.pointwise_hi[r],
            b.uniform_lo[r],
            b.uniform_hi[r],
        ]
        .map(|v| format_significant(v, 10));
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn treated_signal_anchors() {
        assert_eq!(aipw_treated(7.0, 0.0, 0.3, 1.25), 1.25);
        assert_eq!(aipw_treated(2.0, 1.0, 1.0, 9.0), 2.0);
        assert_eq!(aipw_treated(2.0, 1.0, 0.5, 1.0), 3.0);
    }

    #[test]
    fn control_signal_anchors() {
        assert_eq!(aipw_control(2.0, 0.0, 0.5, 1.0), 3.0);
        assert_eq!(aipw_control(2.0, 0.0, 0.0, 5.0), 2.0);
        assert_eq!(aipw_control(4.0, 1.0, 0.3, 0.0), 0.0);
        assert_eq!(aipw_control(4.0, 1.0, 0.3, 1.5), 1.5);
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(1.0 / 3.0, 10), "0.3333333333");
        assert_eq!(format_significant(0.0, 10), "0");
        assert_eq!(format_significant(-12345.678901234, 10), "-12345.6789");
        assert_eq!(format_significant(2.5e-12, 10), "0.0000000000025");
    }

    #[test]
    fn pointwise_band_quantile() {
        let (lo, hi) = pointwise_band(1.0, 2.0, 0.05);
        assert!(((hi - 1.0) / 2.0 - 1.959964).abs() < 1e-5);
        assert!((lo + hi - 2.0).abs() < 1e-12);
        assert_eq!(pointwise_band(1.0, 0.0, 0.05), (1.0, 1.0));
        assert_eq!(pointwise_band(1.0, 3.0, 1.0), (1.0, 1.0));
    }

    #[test]
    fn sigma_identity() {
        let omega = DMatrix::identity(2, 2);
        let s = sigma_hat(&[0.6, 0.8], &omega, 25).unwrap();
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(sigma_hat(&[0.6, 0.8], &DMatrix::zeros(2, 2), 25).unwrap(), 0.0);
        assert!(sigma_hat(&[1.0, 0.0], &DMatrix::from_diagonal_element(2, 2, -1.0), 4).is_err());
    }

    #[test]
    fn zero_grid_norm_is_degenerate() {
        let r = uniform_critical_value(
            &DMatrix::zeros(2, 2),
            &DMatrix::from_element(3, 2, 1.0),
            0.05,
            10,
            1,
            Execution::Sequential,
        );
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }
}
