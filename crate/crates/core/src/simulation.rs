//! Monte Carlo designs and the replication harness.
//!
//! Controls are laid out as `Z = (1, X, Z_1)` with `X ~ U(1, 2)` and `Z_1`
//! centered Gaussian with Toeplitz covariance `2^{-|j - l|}`. The three
//! designs differ in which model is misspecified:
//!
//! * `S1`: `P(D = 1 | Z) = logistic(a + X + X^2/2 + g'Z_1)`,
//!   `Y = D (1 + X + X^2/2 + g'Z_1) + e`;
//! * `S2`: treatment as in `S1`, outcome uses `Z_1^dagger`;
//! * `S3`: outcome as in `S1`, `P(D = 1 | Z) = logistic(a + X + X^2/2 - g'Z_1^dagger)`,
//!
//! where `z^dagger = z + max(0, 1 + z)^2` and the intercept `a` is calibrated
//! so that the average treatment probability is one half.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, evaluate_basis, BasisMatrix};
use crate::dataset::{Dataset, PreprocessConfig};
use crate::error::{Error, Result};
use crate::estimator::{
    fit_arm, fit_first_stage_shared, format_significant, omega_hat, residual_matrix, second_stage_beta,
    sigma_hat, uniform_critical_values, ArmFit, BasisConfig, FitConfig, InferenceConfig,
};
use crate::par::{map_indexed, Execution};
use crate::penalty::{build_folds, default_candidates, select_for_weights, PenaltyConfig};
use crate::rng::{derive_seed, substream, TAG_CALIBRATION, TAG_DATA, TAG_REPLICATION};
use crate::solver::{Arm, NuisanceModel, SolverConfig};
use crate::stats::{linspace, logistic, normal_cdf, normal_pdf, normal_quantile, trapezoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dgp {
    S1,
    S2,
    S3,
}

impl Dgp {
    pub fn default_sparsity(self) -> usize {
        match self {
            Dgp::S1 => 6,
            Dgp::S2 => 4,
            Dgp::S3 => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dgp::S1 => "s1",
            Dgp::S2 => "s2",
            Dgp::S3 => "s3",
        }
    }
}

impl std::str::FromStr for Dgp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Dgp::S1),
            "s2" => Ok(Dgp::S2),
            "s3" => Ok(Dgp::S3),
            other => Err(Error::Config(format!("unknown design '{other}' (expected s1, s2 or s3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub dgp: Dgp,
    pub n: usize,
    /// Total number of controls including the intercept and `X`.
    pub d_z: usize,
    pub sparsity: Option<usize>,
    /// Additive constant of the treatment index; calibrated when absent.
    pub intercept: Option<f64>,
    /// Active coefficients on the leading `Z_1` columns; defaults to
    /// `1 / sqrt(sparsity)` each.
    pub gamma_coefs: Option<Vec<f64>>,
    pub target_prob: f64,
    pub calibration_draws: usize,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            dgp: Dgp::S1,
            n: 500,
            d_z: 100,
            sparsity: None,
            intercept: None,
            gamma_coefs: None,
            target_prob: 0.5,
            calibration_draws: 100_000,
            seed: 0,
        }
    }
}

/// A design with every free constant fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub dgp: Dgp,
    pub d_z: usize,
    pub intercept: f64,
    pub gamma: Vec<f64>,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.sparsity.unwrap_or(self.dgp.default_sparsity());
        if self.n < 10 {
            return Err(Error::Config(format!("n must be at least 10, got {}", self.n)));
        }
        if self.d_z < 3 || s > self.d_z - 2 {
            return Err(Error::Config(format!(
                "sparsity {s} needs d_z >= sparsity + 2, got d_z = {}",
                self.d_z
            )));
        }
        if let Some(g) = &self.gamma_coefs {
            if g.len() != s {
                return Err(Error::Config(format!("{} gamma coefficients for sparsity {s}", g.len())));
            }
        }
        if !(self.target_prob > 0.0 && self.target_prob < 1.0) {
            return Err(Error::Config("target_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Design> {
        self.validate()?;
        let s = self.sparsity.unwrap_or(self.dgp.default_sparsity());
        let gamma = self
            .gamma_coefs
            .clone()
            .unwrap_or_else(|| vec![1.0 / (s as f64).sqrt(); s]);
        let intercept = match self.intercept {
            Some(a) => a,
            None => calibrate_intercept(self.dgp, &gamma, self.target_prob, self.calibration_draws, self.seed)?,
        };
        Ok(Design {
            dgp: self.dgp,
            d_z: self.d_z,
            intercept,
            gamma,
        })
    }
}

/// `z + max(0, 1 + z)^2`.
pub fn dagger(z: f64) -> f64 {
    let t = (1.0 + z).max(0.0);
    z + t * t
}

pub fn transform_dagger(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(dagger)
}

/// Lower Cholesky factor of the Toeplitz matrix `2^{-|j - l|}`.
pub fn toeplitz_cholesky(d: usize) -> DMatrix<f64> {
    let cov = DMatrix::from_fn(d, d, |j, l| 0.5f64.powi((j as i32 - l as i32).abs()));
    cov.cholesky().expect("Toeplitz covariance is positive definite").unpack()
}

/// `n x d` matrix with independent rows drawn from `N(0, T)`, `T` Toeplitz.
pub fn toeplitz_gaussian<R: Rng>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let l = toeplitz_cholesky(d);
    let e = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (l * e).transpose()
}

fn mean_part(x: f64) -> f64 {
    1.0 + x + 0.5 * x * x
}

/// `E[max(0, 1 + Z)^2]` for standard normal `Z`, which equals
/// `E[Z^dagger]` since `Z` is centered.
pub fn dagger_mean() -> f64 {
    2.0 * normal_cdf(1.0) + normal_pdf(1.0)
}

/// Treatment index `a + X + X^2/2 +/- g'W` from the active block of `Z_1`.
fn treatment_index(dgp: Dgp, intercept: f64, x: f64, active: &[f64], gamma: &[f64]) -> f64 {
    let lin = |f: fn(f64) -> f64| gamma.iter().zip(active).map(|(g, z)| g * f(*z)).sum::<f64>();
    let base = intercept + x + 0.5 * x * x;
    match dgp {
        Dgp::S1 | Dgp::S2 => base + lin(|z| z),
        Dgp::S3 => base - lin(dagger),
    }
}

fn outcome_index(dgp: Dgp, x: f64, active: &[f64], gamma: &[f64]) -> f64 {
    let f: fn(f64) -> f64 = if dgp == Dgp::S2 { dagger } else { |z| z };
    mean_part(x) + gamma.iter().zip(active).map(|(g, z)| g * f(*z)).sum::<f64>()
}

/// Intercept `a` such that the mean of `logistic(index)` over a Monte Carlo
/// draw equals `target`, found by bisection.
pub fn calibrate_intercept(dgp: Dgp, gamma: &[f64], target: f64, draws: usize, seed: u64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) || draws == 0 {
        return Err(Error::Calibration(format!("target {target} with {draws} draws")));
    }
    let s = gamma.len();
    let mut rng = substream(seed, &[TAG_CALIBRATION, dgp as u64]);
    let ux = Uniform::new(1.0, 2.0).expect("valid range");
    let x: Vec<f64> = (0..draws).map(|_| rng.sample(ux)).collect();
    let z = if s > 0 {
        toeplitz_gaussian(draws, s, &mut rng)
    } else {
        DMatrix::zeros(draws, 0)
    };
    let rows: Vec<Vec<f64>> = (0..draws).map(|i| z.row(i).iter().copied().collect()).collect();
    // index without the intercept
    let base: Vec<f64> = (0..draws)
        .map(|i| treatment_index(dgp, 0.0, x[i], &rows[i], gamma))
        .collect();
    let mean_prob = |a: f64| base.iter().map(|b| logistic(a + b)).sum::<f64>() / draws as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if !(mean_prob(lo) < target && mean_prob(hi) > target) {
        return Err(Error::Calibration(format!("target {target} is not bracketed by [{lo}, {hi}]")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The estimand `g_0(x) = E[Y_1 | X = x]` of a design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dgp: Dgp,
    /// `g'E[W]`: zero unless the outcome uses the transformed controls.
    pub shift: f64,
}

impl GroundTruth {
    pub fn of(design: &Design) -> Self {
        let shift = match design.dgp {
            Dgp::S2 => design.gamma.iter().sum::<f64>() * dagger_mean(),
            Dgp::S1 | Dgp::S3 => 0.0,
        };
        GroundTruth {
            dgp: design.dgp,
            shift,
        }
    }

    pub fn g0(&self, x: f64) -> f64 {
        mean_part(x) + self.shift
    }
}

/// Draws one sample of size `n` from `design`.
pub fn generate<R: Rng>(design: &Design, n: usize, rng: &mut R) -> Result<(Dataset, GroundTruth)> {
    let d1 = design.d_z - 2;
    let s = design.gamma.len();
    let ux = Uniform::new(1.0, 2.0).expect("valid range");
    let x: Vec<f64> = (0..n).map(|_| rng.sample(ux)).collect();
    let z1 = toeplitz_gaussian(n, d1, rng);
    let mut d = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let active: Vec<f64> = (0..s).map(|l| z1[(i, l)]).collect();
        let p = logistic(treatment_index(design.dgp, design.intercept, x[i], &active, &design.gamma));
        let u: f64 = rng.random();
        let di = if u < p { 1.0 } else { 0.0 };
        let e: f64 = rng.sample(StandardNormal);
        y.push(di * outcome_index(design.dgp, x[i], &active, &design.gamma) + e);
        d.push(di);
    }
    let mut controls = DMatrix::zeros(n, d1 + 1);
    controls.column_mut(0).copy_from_slice(&x);
    controls.columns_mut(1, d1).copy_from(&z1);
    let mut names = vec!["x".to_string()];
    names.extend((1..=d1).map(|j| format!("z{j}")));
    let ds = Dataset::from_controls(y, d, x, &controls, names)?;
    Ok((ds, GroundTruth::of(design)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Per-term calibrated first stages.
    MaDml,
    /// One logistic-likelihood and one least-squares first stage shared by
    /// all terms.
    Dml,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::MaDml => "MA-DML",
            EstimatorKind::Dml => "DML",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    pub basis: BasisConfig,
    pub solver: SolverConfig,
    pub penalty: PenaltyConfig,
    pub preprocess: PreprocessConfig,
    /// Bootstrap draws for the uniform critical values.
    pub n_boot: usize,
    pub grid_size: usize,
    pub eval_point: f64,
    pub max_failure_frac: f64,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            dgp: DgpConfig::default(),
            reps: 200,
            estimators: vec![EstimatorKind::MaDml, EstimatorKind::Dml],
            basis: BasisConfig {
                knots: Some(vec![1.0, 2.0]),
                ..BasisConfig::default()
            },
            solver: SolverConfig::default(),
            penalty: PenaltyConfig::default(),
            preprocess: PreprocessConfig::default(),
            n_boot: 10_000,
            grid_size: 100,
            eval_point: 1.5,
            max_failure_frac: 0.05,
            seed: 0,
        }
    }
}

impl MonteCarloConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::Config(format!("at least 2 replications are required, got {}", self.reps)));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        if self.n_boot == 0 || self.grid_size < 2 {
            return Err(Error::Config("n_boot >= 1 and grid_size >= 2 are required".into()));
        }
        self.dgp.validate()?;
        self.solver.validate()?;
        self.penalty.validate()?;
        self.preprocess.validate()
    }
}

const ETAS: [f64; 2] = [0.10, 0.05];

/// One estimator's result in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepEstimate {
    pub estimator: EstimatorKind,
    pub ghat: Vec<f64>,
    pub ghat_at_point: f64,
    pub sigma_at_point: f64,
    /// Uniform critical values at `eta = 0.10` and `0.05`.
    pub uniform_crit: [f64; 2],
    /// Pointwise coverage at the evaluation point, `eta = 0.10` and `0.05`.
    pub covers_point: [bool; 2],
    /// Uniform coverage over the grid, `eta = 0.10` and `0.05`.
    pub covers_uniform: [bool; 2],
    pub clip_events: usize,
    pub lambda_gamma: Vec<f64>,
    pub foc_sup: Vec<f64>,
    pub propensity_clips: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub treated_fraction: f64,
    pub estimates: Vec<RepEstimate>,
    /// Estimators whose fit failed, with the error message.
    pub failures: Vec<(EstimatorKind, String)>,
}

/// Table row for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub ibias2: f64,
    pub ivar: f64,
    pub imse: f64,
    pub cov90: f64,
    pub cov95: f64,
    pub ucov90: f64,
    pub ucov95: f64,
    pub reps_completed: usize,
    pub failures: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub dgp: Dgp,
    pub n: usize,
    pub d_z: usize,
    pub k: usize,
    pub reps: usize,
    pub seed: u64,
    pub design: Design,
    pub truth: GroundTruth,
    pub grid: Vec<f64>,
    pub rows: Vec<EstimatorSummary>,
    pub per_rep: Vec<RepRecord>,
}

impl SimulationReport {
    pub fn row(&self, estimator: EstimatorKind) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }
}

/// `(IBias^2, IVar, IMSE)` of curves `ghats` against `g0` on `grid`.
pub fn integrated_errors(grid: &[f64], g0: &[f64], ghats: &[Vec<f64>]) -> (f64, f64, f64) {
    let s = ghats.len() as f64;
    let m = grid.len();
    let gbar: Vec<f64> = (0..m).map(|r| ghats.iter().map(|g| g[r]).sum::<f64>() / s).collect();
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        let f: Vec<f64> = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).collect();
        trapezoid(grid, &f)
    };
    let ibias2 = sq(&gbar, g0);
    let ivar = ghats.iter().map(|g| sq(g, &gbar)).sum::<f64>() / s;
    let imse = ghats.iter().map(|g| sq(g, g0)).sum::<f64>() / s;
    (ibias2, ivar, imse)
}

struct Evaluation<'a> {
    basis: &'a BasisMatrix,
    grid_basis: DMatrix<f64>,
    point_basis: Vec<f64>,
    g0_grid: Vec<f64>,
    g0_point: f64,
    n_boot: usize,
}

fn evaluate(
    estimator: EstimatorKind,
    arm: &ArmFit,
    ev: &Evaluation,
    seed: u64,
    eigen_floor: f64,
    exec: Execution,
) -> Result<RepEstimate> {
    let design = design_matrix(ev.basis, eigen_floor)?;
    let beta = second_stage_beta(ev.basis, &arm.signals, &design);
    let omega = omega_hat(ev.basis, &residual_matrix(ev.basis, &arm.signals, &beta), &design);
    let n = ev.basis.n();
    let ghat: Vec<f64> = (&ev.grid_basis * &beta).iter().copied().collect();
    let ghat_at_point = DVector::from_column_slice(&ev.point_basis).dot(&beta);
    let sigma_at_point = sigma_hat(&ev.point_basis, &omega, n)?;
    let crit = uniform_critical_values(&omega, &ev.grid_basis, &ETAS, ev.n_boot, seed, exec)?;
    let mut covers_point = [false; 2];
    let mut covers_uniform = [false; 2];
    for (e, eta) in ETAS.iter().enumerate() {
        let z = normal_quantile(1.0 - eta / 2.0);
        covers_point[e] = (ghat_at_point - ev.g0_point).abs() <= z * sigma_at_point;
        covers_uniform[e] = (0..ghat.len()).all(|r| {
            let p: Vec<f64> = ev.grid_basis.row(r).iter().copied().collect();
            sigma_hat(&p, &omega, n).is_ok_and(|s| (ghat[r] - ev.g0_grid[r]).abs() <= crit[e] * s)
        });
    }
    Ok(RepEstimate {
        estimator,
        ghat,
        ghat_at_point,
        sigma_at_point,
        uniform_crit: [crit[0], crit[1]],
        covers_point,
        covers_uniform,
        clip_events: arm.clip_events(),
        lambda_gamma: arm.terms.iter().map(|t| t.lambda_gamma).collect(),
        foc_sup: arm.terms.iter().map(|t| t.foc_sup).collect(),
        propensity_clips: arm.terms.iter().map(|t| t.propensity_clips).collect(),
    })
}

/// Fits one estimator on a simulated sample.
pub fn fit_estimator(
    estimator: EstimatorKind,
    ds: &Dataset,
    basis: &BasisMatrix,
    cfg: &FitConfig,
    exec: Execution,
) -> Result<ArmFit> {
    match estimator {
        EstimatorKind::MaDml => Ok(fit_arm(NuisanceModel::Calibrated(Arm::Treated), ds, basis, cfg, exec)?.1),
        EstimatorKind::Dml => {
            let model = NuisanceModel::Likelihood;
            let ones = vec![1.0; ds.n()];
            let candidates = default_candidates(&cfg.penalty, 1.0, ds);
            let folds = build_folds(ds, cfg.penalty.cv_folds, cfg.penalty.seed)?;
            let sel = select_for_weights(model, ds, &ones, 0, &candidates, &folds, &cfg.penalty, &cfg.solver)?;
            fit_first_stage_shared(
                model,
                ds,
                basis.k(),
                (sel.lambda_gamma, sel.lambda_alpha),
                &cfg.preprocess,
                &cfg.solver,
            )
        }
    }
}

fn run_rep(cfg: &MonteCarloConfig, design: &Design, grid: &[f64], rep: usize, exec: Execution) -> Result<RepRecord> {
    let rep_seed = derive_seed(cfg.seed, &[TAG_REPLICATION, rep as u64]);
    let mut rng = substream(rep_seed, &[TAG_DATA]);
    let (ds, truth) = generate(design, cfg.dgp.n, &mut rng)?;
    let (lo, hi) = ds.x_range();
    let spec = cfg.basis.resolve(lo, hi);
    let basis = evaluate_basis(&spec, ds.x())?;
    let inference = InferenceConfig {
        n_boot: cfg.n_boot,
        seed: rep_seed,
        ..InferenceConfig::default()
    };
    let fit_cfg = FitConfig {
        basis: cfg.basis.clone(),
        preprocess: cfg.preprocess.clone(),
        solver: cfg.solver.clone(),
        penalty: PenaltyConfig {
            seed: rep_seed,
            ..cfg.penalty.clone()
        },
        inference: inference.clone(),
    };
    let ev = Evaluation {
        basis: &basis,
        grid_basis: basis.evaluate_grid(grid)?,
        point_basis: basis.evaluate_at(cfg.eval_point)?,
        g0_grid: grid.iter().map(|&x| truth.g0(x)).collect(),
        g0_point: truth.g0(cfg.eval_point),
        n_boot: cfg.n_boot,
    };
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for &est in &cfg.estimators {
        let result = fit_estimator(est, &ds, &basis, &fit_cfg, exec)
            .and_then(|arm| evaluate(est, &arm, &ev, rep_seed, inference.eigen_floor, exec));
        match result {
            Ok(e) => estimates.push(e),
            Err(e) => failures.push((est, e.to_string())),
        }
    }
    Ok(RepRecord {
        rep,
        treated_fraction: ds.n_treated() as f64 / ds.n() as f64,
        estimates,
        failures,
    })
}

/// Runs `cfg.reps` replications and aggregates them per estimator.
///
/// A replication whose estimator fails is excluded from that estimator's
/// row and counted; the row is flagged invalid when more than
/// `max_failure_frac` of the replications failed.
pub fn run_monte_carlo(cfg: &MonteCarloConfig, exec: Execution) -> Result<SimulationReport> {
    cfg.validate()?;
    let design = DgpConfig {
        seed: cfg.seed,
        ..cfg.dgp.clone()
    }
    .resolve()?;
    let truth = GroundTruth::of(&design);
    let support = cfg.basis.resolve(1.0, 2.0).support();
    let grid = linspace(support.0, support.1, cfg.grid_size);
    let records = map_indexed(exec, cfg.reps, |r| {
        run_rep(cfg, &design, &grid, r, exec).unwrap_or_else(|e| RepRecord {
            rep: r,
            treated_fraction: f64::NAN,
            estimates: Vec::new(),
            failures: cfg.estimators.iter().map(|&est| (est, e.to_string())).collect(),
        })
    });
    let g0: Vec<f64> = grid.iter().map(|&x| truth.g0(x)).collect();
    let rows = cfg
        .estimators
        .iter()
        .map(|&est| {
            let ests: Vec<&RepEstimate> = records
                .iter()
                .flat_map(|r| r.estimates.iter().filter(|e| e.estimator == est))
                .collect();
            let done = ests.len();
            let failures = cfg.reps - done;
            let frac = |f: &dyn Fn(&RepEstimate) -> bool| {
                if done == 0 {
                    f64::NAN
                } else {
                    ests.iter().filter(|e| f(e)).count() as f64 / done as f64
                }
            };
            let curves: Vec<Vec<f64>> = ests.iter().map(|e| e.ghat.clone()).collect();
            let (ibias2, ivar, imse) = if done == 0 {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                integrated_errors(&grid, &g0, &curves)
            };
            EstimatorSummary {
                estimator: est,
                ibias2,
                ivar,
                imse,
                cov90: frac(&|e| e.covers_point[0]),
                cov95: frac(&|e| e.covers_point[1]),
                ucov90: frac(&|e| e.covers_uniform[0]),
                ucov95: frac(&|e| e.covers_uniform[1]),
                reps_completed: done,
                failures,
                valid: done > 0 && failures as f64 <= cfg.max_failure_frac * cfg.reps as f64,
            }
        })
        .collect();
    let k = cfg.basis.resolve(1.0, 2.0).n_terms();
    Ok(SimulationReport {
        dgp: design.dgp,
        n: cfg.dgp.n,
        d_z: design.d_z,
        k,
        reps: cfg.reps,
        seed: cfg.seed,
        design,
        truth,
        grid,
        rows,
        per_rep: records,
    })
}

/// Summary table with one row per estimator.
pub fn write_report_csv(report: &SimulationReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(
        out,
        "dgp,n,d_z,k,estimator,ibias2,ivar,imse,cov90,cov95,ucov90,ucov95,reps_completed,failures,valid"
    )
    .map_err(io)?;
    for r in &report.rows {
        let nums = [r.ibias2, r.ivar, r.imse, r.cov90, r.cov95, r.ucov90, r.ucov95].map(|v| format_significant(v, 10));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            report.dgp.name(),
            report.n,
            report.d_z,
            report.k,
            r.estimator.label(),
            nums.join(","),
            r.reps_completed,
            r.failures,
            r.valid
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}
