//! Data-driven penalty levels for the first-stage programs.
//!
//! The default rule has three steps for every basis term `j`:
//!
//! 1. choose pilot constants `c_gamma`, `c_alpha` by K-fold cross validation
//!    of the unpenalized losses, with pilot penalties `c sqrt(ln^3(d_z) / n)`;
//! 2. fit the pilot models on the full sample and form score residuals;
//! 3. set each penalty to `c0` times the `(1 - eps)` order statistic of the
//!    multiplier-bootstrap maximum `max_l |E_n[e_i U_i Z_il]|`.
//!
//! The `cv_only` rule stops after step 1 and uses the pilot penalties as the
//! final ones, with candidates spread evenly between data-driven endpoints.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::BasisMatrix;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::par::{try_map_indexed, Execution};
use crate::rng::{substream, TAG_CV_FOLDS, TAG_PENALTY_BOOT};
use crate::solver::{linear_index, NuisanceModel, SolverConfig, SolverResult};
use crate::stats::{order_rank, order_statistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMethod {
    #[default]
    Bootstrap,
    CvOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub method: PenaltyMethod,
    pub c0: f64,
    /// Optional per-term override of `c0`, one entry per basis term.
    pub c0_per_term: Option<Vec<f64>>,
    pub eps: f64,
    pub n_boot: usize,
    /// Explicit pilot constants; when absent they are derived from the data.
    pub pilot_candidates: Option<Vec<f64>>,
    pub n_candidates: usize,
    pub cv_folds: usize,
    pub ratio_divisor: f64,
    pub seed: u64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            method: PenaltyMethod::Bootstrap,
            c0: 1.1,
            c0_per_term: None,
            eps: 0.05,
            n_boot: 10_000,
            pilot_candidates: None,
            n_candidates: 5,
            cv_folds: 5,
            ratio_divisor: 5.0,
            seed: 0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 1.0) {
            return Err(Error::Config(format!("c0 must exceed 1, got {}", self.c0)));
        }
        if let Some(per) = &self.c0_per_term {
            if per.iter().any(|c| !(*c > 1.0)) {
                return Err(Error::Config("every per-term c0 must exceed 1".into()));
            }
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if self.n_boot == 0 {
            return Err(Error::Config("n_boot must be at least 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if self.n_candidates == 0 {
            return Err(Error::Config("n_candidates must be at least 1".into()));
        }
        if let Some(c) = &self.pilot_candidates {
            if c.is_empty() || c.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config("pilot candidates must be a nonempty set of positive numbers".into()));
            }
        }
        if !(self.ratio_divisor > 0.0) {
            return Err(Error::Config("ratio_divisor must be positive".into()));
        }
        Ok(())
    }

    fn c0_for(&self, j: usize) -> f64 {
        self.c0_per_term
            .as_ref()
            .and_then(|v| v.get(j).copied())
            .unwrap_or(self.c0)
    }
}

/// `c sqrt(ln^3(d_z) / n)`.
pub fn pilot_penalty(c: f64, d_z: usize, n: usize) -> f64 {
    c * ((d_z as f64).ln().powi(3) / n as f64).sqrt()
}

/// `max(lambda_gamma / divisor, lambda_alpha)`.
pub fn enforce_ratio(lambda_gamma: f64, lambda_alpha: f64, divisor: f64) -> f64 {
    (lambda_gamma / divisor).max(lambda_alpha)
}

/// Score residuals `(U_gamma, U_alpha)` of the two first-stage models at the
/// given coefficients, weighted by `w`.
///
/// Treated arm: `-w (D e^{-g'Z} + 1 - D)` and `w D e^{-g'Z} (Y - a'Z)`.
/// Control arm: `-w ((1 - D) e^{g'Z} + D)` and `w (1 - D) e^{g'Z} (Y - a'Z)`.
/// Likelihood: `w (D - logistic(g'Z))` and `w D (Y - a'Z)`.
pub fn estimate_residuals(
    model: NuisanceModel,
    w: &[f64],
    d: &[f64],
    y: &[f64],
    z: &DMatrix<f64>,
    gamma: &[f64],
    alpha: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let g_index = linear_index(z, gamma);
    let a_index = linear_index(z, alpha);
    let v = model.outcome_weights(d, &g_index);
    let u_gamma = (0..d.len())
        .map(|i| match model {
            NuisanceModel::Calibrated(crate::solver::Arm::Treated) => -w[i] * (v[i] + 1.0 - d[i]),
            NuisanceModel::Calibrated(crate::solver::Arm::Control) => -w[i] * (v[i] + d[i]),
            NuisanceModel::Likelihood => w[i] * (d[i] - crate::stats::logistic(g_index[i])),
        })
        .collect();
    let u_alpha = (0..d.len()).map(|i| w[i] * v[i] * (y[i] - a_index[i])).collect();
    (u_gamma, u_alpha)
}

const BOOT_CHUNK: usize = 512;

/// Order statistics of the multiplier-bootstrap maxima for several residual
/// vectors sharing the same draws.
///
/// Draw `b` consumes `n` standard normals from `rng` in row order; the
/// statistic is `max_l |(1/n) sum_i e_bi U_i Z_il|` and the returned value is
/// its `ceil((1 - eps) B)`-th order statistic, one per residual vector.
pub fn bootstrap_quantiles<R: Rng>(
    residuals: &[&[f64]],
    z: &DMatrix<f64>,
    eps: f64,
    n_boot: usize,
    rng: &mut R,
) -> Vec<f64> {
    let (n, dz) = z.shape();
    let m = residuals.len();
    let mut scores = DMatrix::zeros(n, m * dz);
    for (r, u) in residuals.iter().enumerate() {
        for l in 0..dz {
            for i in 0..n {
                scores[(i, r * dz + l)] = u[i] * z[(i, l)] / n as f64;
            }
        }
    }
    let mut stats = vec![Vec::with_capacity(n_boot); m];
    let mut done = 0;
    while done < n_boot {
        let rows = BOOT_CHUNK.min(n_boot - done);
        let mut e = DMatrix::zeros(rows, n);
        for b in 0..rows {
            for i in 0..n {
                e[(b, i)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let t = e * &scores;
        for b in 0..rows {
            for (r, s) in stats.iter_mut().enumerate() {
                let max = (0..dz).map(|l| t[(b, r * dz + l)].abs()).fold(0.0, f64::max);
                s.push(max);
            }
        }
        done += rows;
    }
    let rank = order_rank(1.0 - eps, n_boot);
    stats.iter().map(|s| order_statistic(s, rank)).collect()
}

/// `c0` times the bootstrap order statistic for a single residual vector.
pub fn bootstrap_penalty<R: Rng>(u: &[f64], z: &DMatrix<f64>, c0: f64, eps: f64, n_boot: usize, rng: &mut R) -> f64 {
    c0 * bootstrap_quantiles(&[u], z, eps, n_boot, rng)[0]
}

/// Fold label of every row, stratified by treatment so that every fold
/// holds rows of both arms.
pub fn stratified_folds(d: &[f64], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut treated: Vec<usize> = (0..d.len()).filter(|&i| d[i] == 1.0).collect();
    let mut control: Vec<usize> = (0..d.len()).filter(|&i| d[i] != 1.0).collect();
    if treated.len() < k || control.len() < k {
        return Err(Error::Selection(format!(
            "{k} folds need at least {k} rows per arm ({} treated, {} control)",
            treated.len(),
            control.len()
        )));
    }
    let mut rng = substream(seed, &[TAG_CV_FOLDS]);
    treated.shuffle(&mut rng);
    control.shuffle(&mut rng);
    let mut fold = vec![0; d.len()];
    for (pos, &i) in treated.iter().chain(&control).enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

/// Training and held-out parts of one cross-validation split.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    z_train: DMatrix<f64>,
    z_test: DMatrix<f64>,
}

impl Fold {
    fn new(z: &DMatrix<f64>, labels: &[usize], k: usize) -> Self {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != k).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        Fold {
            z_train: z.select_rows(&train),
            z_test: z.select_rows(&test),
            train,
            test,
        }
    }
}

/// Builds the K splits once so they can be shared by every basis term.
pub fn build_folds(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let labels = stratified_folds(ds.d(), k, seed)?;
    Ok((0..k).map(|f| Fold::new(ds.z(), &labels, f)).collect())
}

fn pick<T: Copy>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&i| v[i]).collect()
}

/// Outcome of cross-validating the pilot constants for one weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub c_gamma: f64,
    pub c_alpha: f64,
    /// Distinct candidates in decreasing order; the loss vectors follow it.
    pub candidates: Vec<f64>,
    /// Average held-out loss per candidate (infinite when a fit diverged).
    pub gamma_losses: Vec<f64>,
    pub alpha_losses: Vec<f64>,
}

fn argmin_prefer_larger(candidates: &[f64], losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in losses.iter().enumerate() {
        if !l.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) if l < losses[b] || (l == losses[b] && candidates[i] > candidates[b]) => Some(i),
            keep => keep,
        };
    }
    best
}

fn dedup_sorted(candidates: &[f64]) -> Vec<f64> {
    let mut c = candidates.to_vec();
    c.sort_by(|a, b| b.total_cmp(a));
    c.dedup();
    c
}

/// Chooses `(c_gamma, c_alpha)` from `candidates` by K-fold cross validation.
///
/// The propensity constant is chosen first by the held-out unpenalized
/// propensity loss; the outcome constant is then chosen with the propensity
/// model fixed at the selected constant. Ties go to the larger constant.
#[allow(clippy::too_many_arguments)]
pub fn cv_select_constants(
    model: NuisanceModel,
    ds: &Dataset,
    w: &[f64],
    candidates: &[f64],
    folds: &[Fold],
    solver: &SolverConfig,
) -> Result<CvSelection> {
    let cands = dedup_sorted(candidates);
    if cands.is_empty() {
        return Err(Error::Selection("no pilot candidates".into()));
    }
    if cands.len() == 1 {
        return Ok(CvSelection {
            c_gamma: cands[0],
            c_alpha: cands[0],
            candidates: cands,
            gamma_losses: vec![f64::NAN],
            alpha_losses: vec![f64::NAN],
        });
    }
    let (n, dz) = (ds.n(), ds.d_z());
    let (d, y) = (ds.d(), ds.y());

    let mut gamma_losses = vec![0.0; cands.len()];
    // per fold, the propensity coefficients at every candidate
    let mut gamma_fits: Vec<Vec<Option<SolverResult>>> = Vec::with_capacity(folds.len());
    for fold in folds {
        let (w_tr, d_tr) = (pick(w, &fold.train), pick(d, &fold.train));
        let (w_te, d_te) = (pick(w, &fold.test), pick(d, &fold.test));
        let mut fits: Vec<Option<SolverResult>> = Vec::with_capacity(cands.len());
        let mut warm: Option<Vec<f64>> = None;
        for (c, &cand) in cands.iter().enumerate() {
            // a smaller penalty cannot rescue a diverged fit
            if c > 0 && fits[c - 1].is_none() {
                gamma_losses[c] = f64::INFINITY;
                fits.push(None);
                continue;
            }
            let lambda = pilot_penalty(cand, dz, fold.train.len());
            match model.fit_propensity(&w_tr, &d_tr, &fold.z_train, lambda, solver, warm.as_deref()) {
                Ok(fit) => {
                    let idx = linear_index(&fold.z_test, &fit.coef);
                    gamma_losses[c] += model.propensity_loss(&w_te, &d_te, &idx) / folds.len() as f64;
                    warm = Some(fit.coef.clone());
                    fits.push(Some(fit));
                }
                Err(Error::Diverged { .. }) => {
                    gamma_losses[c] = f64::INFINITY;
                    fits.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        gamma_fits.push(fits);
    }
    let g_best = argmin_prefer_larger(&cands, &gamma_losses).ok_or_else(|| {
        Error::Selection(format!(
            "every propensity candidate diverged (candidates {cands:?}, n = {n}, d_z = {dz})"
        ))
    })?;

    let mut alpha_losses = vec![0.0; cands.len()];
    for (fold, fits) in folds.iter().zip(&gamma_fits) {
        let Some(gfit) = &fits[g_best] else {
            alpha_losses.iter_mut().for_each(|l| *l = f64::INFINITY);
            continue;
        };
        let (w_tr, d_tr, y_tr) = (pick(w, &fold.train), pick(d, &fold.train), pick(y, &fold.train));
        let (w_te, d_te, y_te) = (pick(w, &fold.test), pick(d, &fold.test), pick(y, &fold.test));
        let v_tr = model.outcome_weights(&d_tr, &linear_index(&fold.z_train, &gfit.coef));
        let v_te = model.outcome_weights(&d_te, &linear_index(&fold.z_test, &gfit.coef));
        let mut warm: Option<Vec<f64>> = None;
        for (c, &cand) in cands.iter().enumerate() {
            if alpha_losses[c].is_infinite() || (c > 0 && alpha_losses[c - 1].is_infinite()) {
                alpha_losses[c] = f64::INFINITY;
                continue;
            }
            let lambda = pilot_penalty(cand, dz, fold.train.len());
            match model.fit_outcome(&w_tr, &v_tr, &fold.z_train, &y_tr, lambda, solver, warm.as_deref()) {
                Ok(fit) => {
                    let idx = linear_index(&fold.z_test, &fit.coef);
                    alpha_losses[c] += NuisanceModel::outcome_loss(&w_te, &v_te, &y_te, &idx) / folds.len() as f64;
                    warm = Some(fit.coef);
                }
                Err(Error::Diverged { .. }) => alpha_losses[c] = f64::INFINITY,
                Err(e) => return Err(e),
            }
        }
    }
    let a_best = argmin_prefer_larger(&cands, &alpha_losses).ok_or_else(|| {
        Error::Selection(format!("every outcome candidate diverged (candidates {cands:?})"))
    })?;

    Ok(CvSelection {
        c_gamma: cands[g_best],
        c_alpha: cands[a_best],
        candidates: cands,
        gamma_losses,
        alpha_losses,
    })
}

/// Pilot constants used when none are configured.
///
/// Bootstrap rule: five log-spaced values `s 2^{-4}, ..., s` with
/// `s = max_i ||p(X_i)||_inf`. CV-only rule: `n_candidates` evenly spaced
/// values between `s m / (2 sqrt(ln(d_z n)))` and `1.5 sqrt(ln(d_z n)) s m`,
/// where `m = max_i ||Z_i||_inf`.
pub fn default_candidates(cfg: &PenaltyConfig, weight_sup: f64, ds: &Dataset) -> Vec<f64> {
    if let Some(c) = &cfg.pilot_candidates {
        return c.clone();
    }
    let s = weight_sup.max(f64::MIN_POSITIVE);
    let count = cfg.n_candidates;
    match cfg.method {
        PenaltyMethod::Bootstrap => {
            if count == 1 {
                return vec![s];
            }
            (0..count)
                .map(|i| s * 2f64.powf(-4.0 * (1.0 - i as f64 / (count - 1) as f64)))
                .collect()
        }
        PenaltyMethod::CvOnly => {
            let zmax = ds.z().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let log = ((ds.d_z() * ds.n()) as f64).ln().sqrt();
            let lo = s * zmax / (2.0 * log);
            let hi = 1.5 * log * s * zmax;
            if count == 1 {
                return vec![lo];
            }
            (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .collect()
        }
    }
}

/// Penalties chosen for one weight vector (one basis term).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermPenalty {
    pub lambda_gamma: f64,
    pub lambda_alpha: f64,
    pub c_gamma: f64,
    pub c_alpha: f64,
    pub pilot_lambda_gamma: f64,
    pub pilot_lambda_alpha: f64,
    /// Outcome penalty before the ratio floor was applied.
    pub lambda_alpha_unfloored: f64,
    pub cv: CvSelection,
}

/// Selected penalties for every basis term of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySelection {
    pub method: PenaltyMethod,
    pub candidates: Vec<f64>,
    pub terms: Vec<TermPenalty>,
}

/// Runs the full selection rule for one weight vector. `term` indexes the
/// random substream so that terms are independent of each other.
#[allow(clippy::too_many_arguments)]
pub fn select_for_weights(
    model: NuisanceModel,
    ds: &Dataset,
    w: &[f64],
    term: usize,
    candidates: &[f64],
    folds: &[Fold],
    cfg: &PenaltyConfig,
    solver: &SolverConfig,
) -> Result<TermPenalty> {
    let (n, dz) = (ds.n(), ds.d_z());
    let cv = cv_select_constants(model, ds, w, candidates, folds, solver)?;
    let pilot_g = pilot_penalty(cv.c_gamma, dz, n);
    let pilot_a = pilot_penalty(cv.c_alpha, dz, n);
    let (lambda_gamma, lambda_alpha_raw) = match cfg.method {
        PenaltyMethod::CvOnly => (pilot_g, pilot_a),
        PenaltyMethod::Bootstrap => {
            let gfit = model.fit_propensity(w, ds.d(), ds.z(), pilot_g, solver, None)?;
            let v = model.outcome_weights(ds.d(), &linear_index(ds.z(), &gfit.coef));
            let afit = model.fit_outcome(w, &v, ds.z(), ds.y(), pilot_a, solver, None)?;
            let (ug, ua) = estimate_residuals(model, w, ds.d(), ds.y(), ds.z(), &gfit.coef, &afit.coef);
            let mut rng = substream(cfg.seed, &[TAG_PENALTY_BOOT, model.tag(), term as u64]);
            let q = bootstrap_quantiles(&[&ug, &ua], ds.z(), cfg.eps, cfg.n_boot, &mut rng);
            let c0 = cfg.c0_for(term);
            (c0 * q[0], c0 * q[1])
        }
    };
    Ok(TermPenalty {
        lambda_gamma,
        lambda_alpha: enforce_ratio(lambda_gamma, lambda_alpha_raw, cfg.ratio_divisor),
        c_gamma: cv.c_gamma,
        c_alpha: cv.c_alpha,
        pilot_lambda_gamma: pilot_g,
        pilot_lambda_alpha: pilot_a,
        lambda_alpha_unfloored: lambda_alpha_raw,
        cv,
    })
}

/// Penalties for every basis term of one arm; terms run concurrently.
pub fn select_penalties(
    model: NuisanceModel,
    ds: &Dataset,
    basis: &BasisMatrix,
    cfg: &PenaltyConfig,
    solver: &SolverConfig,
    exec: Execution,
) -> Result<PenaltySelection> {
    cfg.validate()?;
    if let Some(per) = &cfg.c0_per_term {
        if per.len() != basis.k() {
            return Err(Error::Config(format!(
                "c0_per_term has {} entries for {} basis terms",
                per.len(),
                basis.k()
            )));
        }
    }
    let weight_sup = basis.xi_inf() + basis.affine_shift().abs();
    let candidates = default_candidates(cfg, weight_sup, ds);
    let folds = match dedup_sorted(&candidates).len() {
        1 => Vec::new(),
        _ => build_folds(ds, cfg.cv_folds, cfg.seed)?,
    };
    let terms = try_map_indexed(exec, basis.k(), |j| {
        let w = basis.first_stage_weights(j);
        select_for_weights(model, ds, &w, j, &candidates, &folds, cfg, solver)
    })?;
    Ok(PenaltySelection {
        method: cfg.method,
        candidates,
        terms,
    })
}
