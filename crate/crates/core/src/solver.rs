//! ℓ1-penalized convex first-stage programs.
//!
//! Every loss handled here is a sum of per-observation terms of the linear
//! index `eta_i = coef' Z_i`:
//!
//! | loss | per-observation term |
//! |------|----------------------|
//! | calibrated, treated arm | `w (D e^{-eta} + (1 - D) eta)` |
//! | calibrated, control arm | `w ((1 - D) e^{eta} - D eta)` |
//! | weighted squares        | `w v (Y - eta)^2 / 2` |
//! | logistic likelihood     | `w (ln(1 + e^{eta}) - D eta)` |
//!
//! The objective is the sample mean of these terms plus `lambda ||coef||_1`.
//! Two algorithms are available: a proximal Newton method (quadratic model
//! solved by coordinate descent with exact soft-thresholding, followed by a
//! backtracking line search on the true objective) and a monotone accelerated
//! proximal gradient method with backtracking. Both stop on the KKT residual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::logistic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CalibratedLogisticTreated,
    CalibratedLogisticControl,
    WeightedSquares,
    LogisticLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    ProximalNewton,
    ProximalGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    pub kkt_tol: f64,
    pub rel_obj_tol: f64,
    pub max_iter: usize,
    pub divergence_cap: f64,
    pub exp_clamp: f64,
    pub penalize_intercept: bool,
    /// Keep the objective value after every accepted iteration.
    #[serde(skip)]
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            algorithm: Algorithm::ProximalNewton,
            kkt_tol: 1e-7,
            rel_obj_tol: 1e-10,
            max_iter: 100_000,
            divergence_cap: 1e3,
            exp_clamp: 700.0,
            penalize_intercept: true,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kkt_tol > 0.0) || !(self.rel_obj_tol >= 0.0) || self.max_iter == 0 {
            return Err(Error::Config("solver tolerances must be positive and max_iter >= 1".into()));
        }
        if !(self.divergence_cap > 0.0) || !(self.exp_clamp > 0.0) {
            return Err(Error::Config("divergence_cap and exp_clamp must be positive".into()));
        }
        Ok(())
    }
}

/// One penalized first-stage program. Column 0 of `z` is the intercept.
#[derive(Debug, Clone, Copy)]
pub struct PenalizedProblem<'a> {
    pub kind: LossKind,
    pub weights: &'a [f64],
    pub z: &'a DMatrix<f64>,
    pub treatment: &'a [f64],
    pub outcome: Option<&'a [f64]>,
    pub exp_weights: Option<&'a [f64]>,
    pub lambda: f64,
    pub penalize_intercept: bool,
}

impl<'a> PenalizedProblem<'a> {
    pub fn calibrated_treated(w: &'a [f64], d: &'a [f64], z: &'a DMatrix<f64>, lambda: f64) -> Self {
        Self::new(LossKind::CalibratedLogisticTreated, w, d, z, None, None, lambda)
    }

    pub fn calibrated_control(w: &'a [f64], d: &'a [f64], z: &'a DMatrix<f64>, lambda: f64) -> Self {
        Self::new(LossKind::CalibratedLogisticControl, w, d, z, None, None, lambda)
    }

    /// `E_n[w v (Y - alpha'Z)^2] / 2 + lambda ||alpha||_1`. The treatment
    /// slice is unused by this loss and set to the weights.
    pub fn weighted_squares(
        w: &'a [f64],
        v: &'a [f64],
        z: &'a DMatrix<f64>,
        y: &'a [f64],
        lambda: f64,
    ) -> Self {
        Self::new(LossKind::WeightedSquares, w, w, z, Some(y), Some(v), lambda)
    }

    pub fn logistic_likelihood(w: &'a [f64], d: &'a [f64], z: &'a DMatrix<f64>, lambda: f64) -> Self {
        Self::new(LossKind::LogisticLikelihood, w, d, z, None, None, lambda)
    }

    fn new(
        kind: LossKind,
        weights: &'a [f64],
        treatment: &'a [f64],
        z: &'a DMatrix<f64>,
        outcome: Option<&'a [f64]>,
        exp_weights: Option<&'a [f64]>,
        lambda: f64,
    ) -> Self {
        PenalizedProblem {
            kind,
            weights,
            z,
            treatment,
            outcome,
            exp_weights,
            lambda,
            penalize_intercept: true,
        }
    }

    pub fn with_intercept_penalized(mut self, yes: bool) -> Self {
        self.penalize_intercept = yes;
        self
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    fn penalty_weight(&self, l: usize) -> f64 {
        if l == 0 && !self.penalize_intercept {
            0.0
        } else {
            self.lambda
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad_len = self.weights.len() != n
            || self.treatment.len() != n
            || self.outcome.is_some_and(|y| y.len() != n)
            || self.exp_weights.is_some_and(|v| v.len() != n);
        if bad_len {
            return Err(Error::Validation("penalized problem dimensions disagree".into()));
        }
        if n == 0 || self.dim() == 0 {
            return Err(Error::Degenerate("empty penalized problem".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("penalty must be a nonnegative number, got {}", self.lambda)));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Validation("loss weights must be nonnegative and finite".into()));
        }
        if self.kind == LossKind::WeightedSquares {
            let (Some(_), Some(v)) = (self.outcome, self.exp_weights) else {
                return Err(Error::Validation("weighted squares needs an outcome and exp weights".into()));
            };
            if v.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::Validation("exp weights must be nonnegative and finite".into()));
            }
            if self.weights.iter().zip(v).all(|(w, v)| w * v == 0.0) {
                return Err(Error::Degenerate("all effective weights w * v are zero".into()));
            }
        }
        Ok(())
    }

    /// Value, first and second derivative of observation `i`'s term at `eta`.
    /// The flag reports whether an exponent had to be clamped.
    #[inline]
    fn term(&self, i: usize, eta: f64, clamp: f64) -> (f64, f64, f64, bool) {
        let w = self.weights[i];
        let d = self.treatment[i];
        match self.kind {
            LossKind::CalibratedLogisticTreated => {
                if d == 0.0 {
                    (w * eta, w, 0.0, false)
                } else {
                    let (arg, c) = clamp_arg(-eta, clamp);
                    let e = w * d * arg.exp();
                    (e + w * (1.0 - d) * eta, -e + w * (1.0 - d), e, c)
                }
            }
            LossKind::CalibratedLogisticControl => {
                if d == 1.0 {
                    (-w * eta, -w, 0.0, false)
                } else {
                    let (arg, c) = clamp_arg(eta, clamp);
                    let e = w * (1.0 - d) * arg.exp();
                    (e - w * d * eta, e - w * d, e, c)
                }
            }
            LossKind::WeightedSquares => {
                let wv = w * self.exp_weights.map_or(1.0, |v| v[i]);
                let r = self.outcome.map_or(0.0, |y| y[i]) - eta;
                (0.5 * wv * r * r, -wv * r, wv, false)
            }
            LossKind::LogisticLikelihood => {
                let softplus = if eta > 0.0 {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                };
                let p = logistic(eta);
                (w * (softplus - d * eta), w * (p - d), w * p * (1.0 - p), false)
            }
        }
    }
}

#[inline]
fn clamp_arg(a: f64, c: f64) -> (f64, bool) {
    if a > c {
        (c, true)
    } else if a < -c {
        (-c, true)
    } else {
        (a, false)
    }
}

/// Output of a first-stage fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub coef: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    /// Some exponent argument hit the overflow guard during the fit.
    pub clamped: bool,
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Smooth part evaluated at a given index vector.
struct Smooth {
    value: f64,
    d1: DVector<f64>,
    d2: DVector<f64>,
    clamped: bool,
}

fn smooth_at(p: &PenalizedProblem, eta: &DVector<f64>, clamp: f64) -> Smooth {
    let n = p.n();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d1 = DVector::zeros(n);
    let mut d2 = DVector::zeros(n);
    let mut clamped = false;
    for i in 0..n {
        let (v, g, h, c) = p.term(i, eta[i], clamp);
        value += v;
        d1[i] = g * inv_n;
        d2[i] = h * inv_n;
        clamped |= c;
    }
    Smooth {
        value: value * inv_n,
        d1,
        d2,
        clamped,
    }
}

fn smooth_value(p: &PenalizedProblem, eta: &DVector<f64>, clamp: f64) -> f64 {
    let n = p.n();
    (0..n).map(|i| p.term(i, eta[i], clamp).0).sum::<f64>() / n as f64
}

fn penalty(p: &PenalizedProblem, coef: &[f64]) -> f64 {
    coef.iter().enumerate().map(|(l, b)| p.penalty_weight(l) * b.abs()).sum()
}

fn index_of(p: &PenalizedProblem, coef: &[f64]) -> DVector<f64> {
    p.z * DVector::from_column_slice(coef)
}

fn kkt_from_gradient(p: &PenalizedProblem, coef: &[f64], g: &DVector<f64>) -> f64 {
    coef.iter()
        .enumerate()
        .map(|(l, &b)| {
            let lam = p.penalty_weight(l);
            if b == 0.0 {
                (g[l].abs() - lam).max(0.0)
            } else {
                (g[l] + lam * b.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Gradient of the smooth part of the objective.
pub fn gradient(problem: &PenalizedProblem, coef: &[f64]) -> Vec<f64> {
    let s = smooth_at(problem, &index_of(problem, coef), SolverConfig::default().exp_clamp);
    problem.z.tr_mul(&s.d1).as_slice().to_vec()
}

/// Full penalized objective.
pub fn objective(problem: &PenalizedProblem, coef: &[f64]) -> f64 {
    smooth_value(problem, &index_of(problem, coef), SolverConfig::default().exp_clamp) + penalty(problem, coef)
}

/// Distance of `coef` from the subgradient optimality conditions:
/// `max(|g_l| - lambda, 0)` on zero coordinates and `|g_l + lambda sign(coef_l)|`
/// on nonzero ones (the latter bounds `||g_l| - lambda|`).
pub fn kkt_residual(problem: &PenalizedProblem, coef: &[f64]) -> f64 {
    let g = DVector::from_vec(gradient(problem, coef));
    kkt_from_gradient(problem, coef, &g)
}

/// Smallest penalty for which the zero vector is optimal: `||grad(0)||_inf`
/// over the penalized coordinates.
pub fn zero_threshold(problem: &PenalizedProblem) -> f64 {
    let g = gradient(problem, &vec![0.0; problem.dim()]);
    g.iter()
        .enumerate()
        .filter(|(l, _)| *l > 0 || problem.penalize_intercept)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Solves `problem` starting from `start` (zero when `None`).
///
/// Divergence (`||coef||_1` above the cap) is an error; running out of
/// iterations returns a result with `converged = false`.
pub fn solve(problem: &PenalizedProblem, cfg: &SolverConfig, start: Option<&[f64]>) -> Result<SolverResult> {
    problem.validate()?;
    cfg.validate()?;
    let coef = match start {
        Some(s) if s.len() == problem.dim() => s.to_vec(),
        Some(_) => return Err(Error::Validation("warm start has the wrong length".into())),
        None => vec![0.0; problem.dim()],
    };
    match cfg.algorithm {
        Algorithm::ProximalNewton => proximal_newton(problem, cfg, coef),
        Algorithm::ProximalGradient => proximal_gradient(problem, cfg, coef),
    }
}

struct Outcome {
    coef: Vec<f64>,
    objective: f64,
    kkt: f64,
    iterations: usize,
    clamped: bool,
    trace: Vec<f64>,
}

fn finish(problem: &PenalizedProblem, cfg: &SolverConfig, o: Outcome) -> Result<SolverResult> {
    let l1: f64 = o.coef.iter().map(|v| v.abs()).sum();
    if !(l1 <= cfg.divergence_cap) || !o.objective.is_finite() {
        return Err(Error::Diverged {
            l1_norm: l1,
            cap: cfg.divergence_cap,
            iterations: o.iterations,
            lambda: problem.lambda,
        });
    }
    Ok(SolverResult {
        converged: o.kkt <= cfg.kkt_tol,
        coef: o.coef,
        objective: o.objective,
        kkt_residual: o.kkt,
        iterations: o.iterations,
        diverged: false,
        clamped: o.clamped,
        trace: o.trace,
    })
}

fn diverged(problem: &PenalizedProblem, cfg: &SolverConfig, coef: &[f64], iterations: usize) -> Option<Error> {
    let l1: f64 = coef.iter().map(|v| v.abs()).sum();
    (!(l1 <= cfg.divergence_cap)).then(|| Error::Diverged {
        l1_norm: l1,
        cap: cfg.divergence_cap,
        iterations,
        lambda: problem.lambda,
    })
}

const MAX_INNER_SWEEPS: usize = 200;

fn proximal_newton(problem: &PenalizedProblem, cfg: &SolverConfig, mut coef: Vec<f64>) -> Result<SolverResult> {
    let z = problem.z;
    let (n, dim) = (problem.n(), problem.dim());
    let lam: Vec<f64> = (0..dim).map(|l| problem.penalty_weight(l)).collect();
    let mut eta = index_of(problem, &coef);
    let mut clamped = false;
    let mut trace = Vec::new();
    let mut r = vec![0.0; n];
    let mut a = vec![0.0; dim];
    let mut target = vec![0.0; dim];
    let mut iterations = 0;

    loop {
        let s = smooth_at(problem, &eta, cfg.exp_clamp);
        clamped |= s.clamped;
        let f0 = s.value + penalty(problem, &coef);
        if cfg.record_trace && iterations == 0 {
            trace.push(f0);
        }
        let g = z.tr_mul(&s.d1);
        let kkt = kkt_from_gradient(problem, &coef, &g);
        if kkt <= cfg.kkt_tol || iterations >= cfg.max_iter {
            return finish(problem, cfg, Outcome { coef, objective: f0, kkt, iterations, clamped, trace });
        }
        iterations += 1;

        // quadratic model: g'delta + delta' (Z' diag(d2) Z) delta / 2
        let h = s.d2.as_slice();
        let mut a_max = 0.0f64;
        for l in 0..dim {
            let col = z.column(l);
            a[l] = col.iter().zip(h).map(|(zv, hv)| hv * zv * zv).sum();
            a_max = a_max.max(a[l]);
        }
        let damping = 1e-6 * a_max.max(1e-12);
        a.iter_mut().for_each(|v| *v += damping);

        target.copy_from_slice(&coef);
        r.iter_mut().for_each(|v| *v = 0.0);
        let inner_tol = (1e-2 * kkt).max(1e-2 * cfg.kkt_tol);
        let sweep = |only_active: bool, target: &mut [f64], r: &mut [f64]| -> f64 {
            let mut max_change = 0.0f64;
            for l in 0..dim {
                if only_active && target[l] == 0.0 {
                    continue;
                }
                let col = z.column(l);
                let col = col.as_slice();
                let curv: f64 = col.iter().zip(h).zip(r.iter()).map(|((zv, hv), rv)| zv * hv * rv).sum();
                let partial = g[l] + curv + damping * (target[l] - coef[l]);
                let old = target[l];
                let new = soft_threshold(a[l] * old - partial, lam[l]) / a[l];
                let delta = new - old;
                if delta != 0.0 {
                    target[l] = new;
                    r.iter_mut().zip(col).for_each(|(rv, zv)| *rv += delta * zv);
                    max_change = max_change.max(a[l] * delta.abs());
                }
            }
            max_change
        };
        let runaway = |target: &[f64]| target.iter().map(|v| v.abs()).sum::<f64>() > cfg.divergence_cap;
        let mut sweeps = 0;
        'inner: loop {
            let full = sweep(false, &mut target, &mut r);
            sweeps += 1;
            if full <= inner_tol || sweeps >= MAX_INNER_SWEEPS || runaway(&target) {
                break;
            }
            loop {
                let act = sweep(true, &mut target, &mut r);
                sweeps += 1;
                if sweeps >= MAX_INNER_SWEEPS || runaway(&target) {
                    break 'inner;
                }
                if act <= inner_tol {
                    break;
                }
            }
        }

        // backtracking on the true objective
        let predicted: f64 = (0..dim)
            .map(|l| g[l] * (target[l] - coef[l]) + lam[l] * (target[l].abs() - coef[l].abs()))
            .sum();
        let slack = 1e-13 * f0.abs().max(1.0);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = coef.iter().zip(&target).map(|(c, t)| c + step * (t - c)).collect();
            let trial_eta = &eta + DVector::from_column_slice(&r) * step;
            let f1 = smooth_value(problem, &trial_eta, cfg.exp_clamp) + penalty(problem, &trial);
            if f1.is_finite() && f1 <= f0 + 1e-4 * step * predicted.min(0.0) + slack {
                accepted = Some((trial, trial_eta, f1));
                break;
            }
            step *= 0.5;
        }
        let Some((next, next_eta, f1)) = accepted else {
            // no descent possible at working precision
            return finish(problem, cfg, Outcome { coef, objective: f0, kkt, iterations, clamped, trace });
        };
        if let Some(e) = diverged(problem, cfg, &next, iterations) {
            return Err(e);
        }
        coef = next;
        eta = next_eta;
        if cfg.record_trace {
            trace.push(f1);
        }
        let rel = (f0 - f1).abs() / f0.abs().max(1.0);
        if rel <= cfg.rel_obj_tol && step < 1.0 {
            let s = smooth_at(problem, &eta, cfg.exp_clamp);
            let g = z.tr_mul(&s.d1);
            let kkt = kkt_from_gradient(problem, &coef, &g);
            if kkt > cfg.kkt_tol {
                return finish(problem, cfg, Outcome { coef, objective: f1, kkt, iterations, clamped, trace });
            }
        }
    }
}

fn proximal_gradient(problem: &PenalizedProblem, cfg: &SolverConfig, mut coef: Vec<f64>) -> Result<SolverResult> {
    let z = problem.z;
    let dim = problem.dim();
    let lam: Vec<f64> = (0..dim).map(|l| problem.penalty_weight(l)).collect();
    let mut clamped = false;
    let mut trace = Vec::new();

    let mut f_coef = smooth_value(problem, &index_of(problem, &coef), cfg.exp_clamp) + penalty(problem, &coef);
    if cfg.record_trace {
        trace.push(f_coef);
    }
    let mut y = coef.clone();
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut iterations = 0;
    let mut stall = 0;

    loop {
        let eta_y = index_of(problem, &y);
        let sy = smooth_at(problem, &eta_y, cfg.exp_clamp);
        clamped |= sy.clamped;
        let gy = z.tr_mul(&sy.d1);

        if iterations % 10 == 0 || iterations >= cfg.max_iter || stall > 0 {
            let sc = smooth_at(problem, &index_of(problem, &coef), cfg.exp_clamp);
            let gc = z.tr_mul(&sc.d1);
            let kkt = kkt_from_gradient(problem, &coef, &gc);
            if kkt <= cfg.kkt_tol || iterations >= cfg.max_iter || stall > 50 {
                return finish(problem, cfg, Outcome { coef, objective: f_coef, kkt, iterations, clamped, trace });
            }
        }
        iterations += 1;

        // backtracking on the Lipschitz estimate
        let mut cand;
        loop {
            cand = (0..dim)
                .map(|l| soft_threshold(y[l] - gy[l] / lip, lam[l] / lip))
                .collect::<Vec<_>>();
            let diff: Vec<f64> = cand.iter().zip(&y).map(|(c, v)| c - v).collect();
            let lin: f64 = diff.iter().zip(gy.iter()).map(|(dv, gv)| dv * gv).sum();
            let quad: f64 = diff.iter().map(|v| v * v).sum::<f64>() * 0.5 * lip;
            let f_cand = smooth_value(problem, &index_of(problem, &cand), cfg.exp_clamp);
            if f_cand.is_finite() && f_cand <= sy.value + lin + quad + 1e-13 * sy.value.abs().max(1.0) {
                break;
            }
            lip *= 2.0;
            if lip > 1e30 {
                return Err(Error::Numerical("proximal gradient step size underflow".into()));
            }
        }
        if let Some(e) = diverged(problem, cfg, &cand, iterations) {
            return Err(e);
        }
        let f_cand = smooth_value(problem, &index_of(problem, &cand), cfg.exp_clamp) + penalty(problem, &cand);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let prev = coef.clone();
        let f_prev = f_coef;
        if f_cand <= f_coef {
            coef = cand.clone();
            f_coef = f_cand;
        }
        if cfg.record_trace {
            trace.push(f_coef);
        }
        y = (0..dim)
            .map(|l| coef[l] + (t / t_next) * (cand[l] - coef[l]) + ((t - 1.0) / t_next) * (coef[l] - prev[l]))
            .collect();
        t = t_next;
        lip = (lip * 0.9).max(1e-12);

        let rel = (f_prev - f_coef).abs() / f_prev.abs().max(1.0);
        stall = if rel <= cfg.rel_obj_tol { stall + 1 } else { 0 };
    }
}

fn with_intercept_flag<'a>(p: PenalizedProblem<'a>, cfg: &SolverConfig) -> PenalizedProblem<'a> {
    p.with_intercept_penalized(cfg.penalize_intercept)
}

/// Treated-arm propensity program
/// `E_n[w (D e^{-g'Z} + (1 - D) g'Z)] + lambda ||g||_1`.
pub fn fit_calibrated_logistic_treated(
    w: &[f64],
    d: &[f64],
    z: &DMatrix<f64>,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    solve(&with_intercept_flag(PenalizedProblem::calibrated_treated(w, d, z, lambda), cfg), cfg, None)
}

/// Control-arm propensity program
/// `E_n[w ((1 - D) e^{g'Z} - D g'Z)] + lambda ||g||_1`.
pub fn fit_calibrated_logistic_control(
    w: &[f64],
    d: &[f64],
    z: &DMatrix<f64>,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    solve(&with_intercept_flag(PenalizedProblem::calibrated_control(w, d, z, lambda), cfg), cfg, None)
}

/// Outcome program `E_n[w v (Y - a'Z)^2] / 2 + lambda ||a||_1`.
pub fn fit_weighted_lasso(
    w: &[f64],
    v: &[f64],
    z: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    solve(&with_intercept_flag(PenalizedProblem::weighted_squares(w, v, z, y, lambda), cfg), cfg, None)
}

/// ℓ1-penalized logistic maximum likelihood (used by the benchmark).
pub fn fit_logistic_likelihood(
    w: &[f64],
    d: &[f64],
    z: &DMatrix<f64>,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<SolverResult> {
    solve(&with_intercept_flag(PenalizedProblem::logistic_likelihood(w, d, z, lambda), cfg), cfg, None)
}

fn row_dot(z: &DMatrix<f64>, i: usize, coef: &[f64]) -> f64 {
    coef.iter().enumerate().map(|(l, c)| z[(i, l)] * c).sum()
}

/// Symmetrized Bregman divergence of the treated calibrated loss:
/// `E_n[w D (e^{-a'Z} - e^{-b'Z}) (b'Z - a'Z)]`.
pub fn bregman_gamma(w: &[f64], d: &[f64], z: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let n = z.nrows();
    (0..n)
        .map(|i| {
            let (ea, eb) = (row_dot(z, i, a), row_dot(z, i, b));
            w[i] * d[i] * ((-ea).exp() - (-eb).exp()) * (eb - ea)
        })
        .sum::<f64>()
        / n as f64
}

/// Symmetrized Bregman divergence of the weighted squares loss:
/// `E_n[w v (b'Z - a'Z)^2]`.
pub fn bregman_alpha(w: &[f64], v: &[f64], z: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let n = z.nrows();
    (0..n)
        .map(|i| {
            let diff = row_dot(z, i, b) - row_dot(z, i, a);
            w[i] * v[i] * diff * diff
        })
        .sum::<f64>()
        / n as f64
}

/// Which counterfactual mean is targeted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treated,
    Control,
}

/// Loss family of the two first-stage models.
///
/// `Calibrated` pairs the calibrated logistic propensity loss with the
/// odds-weighted lasso. `Likelihood` pairs the logistic likelihood with
/// ordinary least squares on the treated rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceModel {
    Calibrated(Arm),
    Likelihood,
}

impl NuisanceModel {
    pub fn propensity_problem<'a>(
        self,
        w: &'a [f64],
        d: &'a [f64],
        z: &'a DMatrix<f64>,
        lambda: f64,
    ) -> PenalizedProblem<'a> {
        match self {
            NuisanceModel::Calibrated(Arm::Treated) => PenalizedProblem::calibrated_treated(w, d, z, lambda),
            NuisanceModel::Calibrated(Arm::Control) => PenalizedProblem::calibrated_control(w, d, z, lambda),
            NuisanceModel::Likelihood => PenalizedProblem::logistic_likelihood(w, d, z, lambda),
        }
    }

    pub fn fit_propensity(
        self,
        w: &[f64],
        d: &[f64],
        z: &DMatrix<f64>,
        lambda: f64,
        cfg: &SolverConfig,
        start: Option<&[f64]>,
    ) -> Result<SolverResult> {
        let p = self.propensity_problem(w, d, z, lambda);
        solve(&with_intercept_flag(p, cfg), cfg, start)
    }

    /// Observation weights `v` of the outcome program given the fitted
    /// propensity index: `D e^{-eta}` (treated), `(1 - D) e^{eta}` (control)
    /// or `D` (likelihood).
    pub fn outcome_weights(self, d: &[f64], index: &[f64]) -> Vec<f64> {
        let c = SolverConfig::default().exp_clamp;
        d.iter()
            .zip(index)
            .map(|(&d, &eta)| match self {
                NuisanceModel::Calibrated(Arm::Treated) => {
                    if d == 0.0 { 0.0 } else { d * (-eta).clamp(-c, c).exp() }
                }
                NuisanceModel::Calibrated(Arm::Control) => {
                    if d == 1.0 { 0.0 } else { (1.0 - d) * eta.clamp(-c, c).exp() }
                }
                NuisanceModel::Likelihood => d,
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn fit_outcome(
        self,
        w: &[f64],
        v: &[f64],
        z: &DMatrix<f64>,
        y: &[f64],
        lambda: f64,
        cfg: &SolverConfig,
        start: Option<&[f64]>,
    ) -> Result<SolverResult> {
        let p = PenalizedProblem::weighted_squares(w, v, z, y, lambda);
        solve(&with_intercept_flag(p, cfg), cfg, start)
    }

    /// Unpenalized propensity loss averaged over the rows given.
    pub fn propensity_loss(self, w: &[f64], d: &[f64], index: &[f64]) -> f64 {
        let z = DMatrix::from_element(index.len(), 1, 1.0);
        let p = self.propensity_problem(w, d, &z, 0.0);
        let eta = DVector::from_column_slice(index);
        smooth_value(&p, &eta, SolverConfig::default().exp_clamp)
    }

    /// Unpenalized outcome loss `E[w v (Y - eta)^2] / 2` over the rows given.
    pub fn outcome_loss(w: &[f64], v: &[f64], y: &[f64], index: &[f64]) -> f64 {
        let n = index.len();
        (0..n)
            .map(|i| {
                let r = y[i] - index[i];
                0.5 * w[i] * v[i] * r * r
            })
            .sum::<f64>()
            / n as f64
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            NuisanceModel::Calibrated(Arm::Treated) => 1,
            NuisanceModel::Calibrated(Arm::Control) => 2,
            NuisanceModel::Likelihood => 3,
        }
    }
}

/// `Z coef` as a plain vector.
pub fn linear_index(z: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    (z * DVector::from_column_slice(coef)).as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_only(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn intercept_only_treated_closed_form() {
        // A = mean(w D), B = mean(w (1 - D)); optimum solves -A e^{-g} + B + lambda = 0
        let d = [1.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let w = [0.5, 1.0, 2.0, 1.0, 0.3, 0.7];
        let z = intercept_only(6);
        let a = w.iter().zip(&d).map(|(w, d)| w * d).sum::<f64>() / 6.0;
        let b = w.iter().zip(&d).map(|(w, d)| w * (1.0 - d)).sum::<f64>() / 6.0;
        let lambda = 0.1;
        assert!(lambda < a - b);
        let r = fit_calibrated_logistic_treated(&w, &d, &z, lambda, &SolverConfig::default()).unwrap();
        assert!(r.converged);
        let expect = (a / (b + lambda)).ln();
        assert!((r.coef[0] - expect).abs() < 1e-8, "{} vs {expect}", r.coef[0]);
    }

    #[test]
    fn zero_is_optimal_above_threshold() {
        let d = [1.0, 0.0, 1.0, 0.0, 0.0];
        let w = [1.0; 5];
        let z = DMatrix::from_row_slice(5, 2, &[1.0, 0.2, 1.0, -0.4, 1.0, 0.9, 1.0, 0.1, 1.0, -1.0]);
        let p = PenalizedProblem::calibrated_treated(&w, &d, &z, 0.0);
        let thr = zero_threshold(&p);
        let r = fit_calibrated_logistic_treated(&w, &d, &z, thr + 1e-9, &SolverConfig::default()).unwrap();
        assert!(r.coef.iter().all(|&c| c == 0.0));
        assert_eq!(r.kkt_residual, 0.0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn single_covariate_lasso_closed_form() {
        let zv = [0.5, -1.0, 2.0, 0.3, -0.7];
        let y = [1.0, -2.0, 3.5, 0.0, -1.0];
        let z = DMatrix::from_column_slice(5, 1, &zv);
        let one = [1.0; 5];
        let ezy = zv.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / 5.0;
        let ez2 = zv.iter().map(|a| a * a).sum::<f64>() / 5.0;
        for lambda in [0.0, 0.1, 0.5, 1.0, 5.0] {
            let r = fit_weighted_lasso(&one, &one, &z, &y, lambda, &SolverConfig::default()).unwrap();
            let expect = soft_threshold(ezy, lambda) / ez2;
            assert!((r.coef[0] - expect).abs() < 1e-9, "lambda {lambda}: {} vs {expect}", r.coef[0]);
        }
    }

    #[test]
    fn all_zero_effective_weights_is_degenerate() {
        let z = intercept_only(3);
        let r = fit_weighted_lasso(&[1.0; 3], &[0.0; 3], &z, &[1.0; 3], 0.1, &SolverConfig::default());
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn unbounded_calibrated_loss_diverges() {
        // no treated rows: the loss is linear in the index and the penalty is too small
        let d = [0.0; 3];
        let w = [1.0; 3];
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 0.0]);
        let r = fit_calibrated_logistic_treated(&w, &d, &z, 0.1, &SolverConfig::default());
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn bregman_one_observation() {
        let z = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let (a, b) = ([0.1, 0.2], [-0.3, 0.4]);
        let (ea, eb) = (0.1 + 0.4, -0.3 + 0.8);
        let g = bregman_gamma(&[2.0], &[1.0], &z, &a, &b);
        assert!((g - 2.0 * ((-ea as f64).exp() - (-eb as f64).exp()) * (eb - ea)).abs() < 1e-15);
        let al = bregman_alpha(&[2.0], &[0.5], &z, &a, &b);
        assert!((al - 1.0 * (eb - ea) * (eb - ea)).abs() < 1e-15);
        assert_eq!(bregman_gamma(&[2.0], &[1.0], &z, &a, &a), 0.0);
    }
}
