#![allow(dead_code)]

use madml::solver::{objective, LossKind, PenalizedProblem};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LOSSES: [LossKind; 4] = [
    LossKind::CalibratedLogisticTreated,
    LossKind::CalibratedLogisticControl,
    LossKind::WeightedSquares,
    LossKind::LogisticLikelihood,
];

/// Owned data behind a random penalized program.
#[derive(Debug, Clone)]
pub struct Instance {
    pub kind: LossKind,
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub v: Vec<f64>,
    pub y: Vec<f64>,
    pub z: DMatrix<f64>,
}

impl Instance {
    /// `dim` columns including the intercept; treatment is drawn
    /// independently of the controls so both arms overlap.
    pub fn random(kind: LossKind, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let z = DMatrix::from_fn(n, dim, |_, l| {
            if l == 0 { 1.0 } else { StandardNormal.sample(rng) }
        });
        let mut d: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        d[0] = 1.0;
        d[1] = 0.0;
        let w = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let v = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        let y = (0..n)
            .map(|i| {
                let e: f64 = StandardNormal.sample(rng);
                0.5 + (1..dim).map(|l| z[(i, l)] / l as f64).sum::<f64>() + e
            })
            .collect();
        Instance { kind, w, d, v, y, z }
    }

    pub fn problem(&self, lambda: f64) -> PenalizedProblem<'_> {
        match self.kind {
            LossKind::CalibratedLogisticTreated => PenalizedProblem::calibrated_treated(&self.w, &self.d, &self.z, lambda),
            LossKind::CalibratedLogisticControl => PenalizedProblem::calibrated_control(&self.w, &self.d, &self.z, lambda),
            LossKind::WeightedSquares => PenalizedProblem::weighted_squares(&self.w, &self.v, &self.z, &self.y, lambda),
            LossKind::LogisticLikelihood => PenalizedProblem::logistic_likelihood(&self.w, &self.d, &self.z, lambda),
        }
    }
}

/// Minimum of the objective over a square grid, refined twice around the
/// incumbent. Only meant for one or two coordinates.
pub fn grid_oracle(p: &PenalizedProblem, radius: f64, points: usize) -> f64 {
    let dim = p.dim();
    assert!(dim <= 2);
    let mut center = vec![0.0; dim];
    let mut half = radius;
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let step = 2.0 * half / (points - 1) as f64;
        let mut arg = center.clone();
        let axis = |c: f64, i: usize| c - half + step * i as f64;
        let outer = if dim == 2 { points } else { 1 };
        for a in 0..points {
            for b in 0..outer {
                let mut c = vec![axis(center[0], a)];
                if dim == 2 {
                    c.push(axis(center[1], b));
                }
                let f = objective(p, &c);
                if f < best {
                    best = f;
                    arg = c;
                }
            }
        }
        center = arg;
        half = 2.0 * step;
    }
    best
}

/// Discrete population: `X` on two points, one extra control on four, so `Z`
/// has eight support points. Potential outcomes take two values each.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    /// `(x, probability, true propensity, [(y, prob | treated)], [(y, prob | control)])`
    pub cells: Vec<(f64, f64, f64, [(f64, f64); 2], [(f64, f64); 2])>,
}

impl ToyWorld {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut mass: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= total);
        let cells = (0..8)
            .map(|c| {
                let x = if c < 4 { 0.2 } else { 0.7 };
                let mut pair = || {
                    let q = rng.random_range(0.1..0.9);
                    [(rng.random_range(-3.0..3.0), q), (rng.random_range(-3.0..3.0), 1.0 - q)]
                };
                let (y1, y0) = (pair(), pair());
                (x, mass[c], rng.random_range(0.1..0.9), y1, y0)
            })
            .collect();
        ToyWorld { cells }
    }

    pub fn true_mean(&self, c: usize, treated: bool) -> f64 {
        let ys = if treated { self.cells[c].3 } else { self.cells[c].4 };
        ys.iter().map(|(y, q)| y * q).sum()
    }

    /// `E[w(X) Y_arm]`.
    pub fn target(&self, w: impl Fn(f64) -> f64, treated: bool) -> f64 {
        (0..8).map(|c| self.cells[c].1 * w(self.cells[c].0) * self.true_mean(c, treated)).sum()
    }

    /// `E[w(X) signal(Y, D, pi(Z), m(Z))]` by exact enumeration; `Y` is drawn
    /// from the arm actually received.
    pub fn signal_mean(
        &self,
        w: impl Fn(f64) -> f64,
        signal: impl Fn(f64, f64, f64, f64) -> f64,
        pi: &[f64],
        m: &[f64],
    ) -> f64 {
        let mut total = 0.0;
        for (c, &(x, mass, p_true, y1, y0)) in self.cells.iter().enumerate() {
            for (y, q) in y1 {
                total += mass * p_true * q * w(x) * signal(y, 1.0, pi[c], m[c]);
            }
            for (y, q) in y0 {
                total += mass * (1.0 - p_true) * q * w(x) * signal(y, 0.0, pi[c], m[c]);
            }
        }
        total
    }
}

/// One draw from a simulation design with the basis support fixed to `[1, 2]`.
pub fn simulated(dgp: madml::simulation::Dgp, n: usize, d_z: usize, seed: u64) -> madml::dataset::Dataset {
    use madml::simulation::{generate, DgpConfig};
    let design = DgpConfig {
        dgp,
        n,
        d_z,
        calibration_draws: 20_000,
        ..Default::default()
    }
    .resolve()
    .unwrap();
    generate(&design, n, &mut madml::rng::substream(seed, &[1])).unwrap().0
}

/// Estimator settings small enough for quick tests.
pub fn quick_fit_config(seed: u64) -> madml::estimator::FitConfig {
    let mut cfg = madml::estimator::FitConfig::default();
    cfg.basis.knots = Some(vec![1.0, 2.0]);
    cfg.penalty.n_boot = 500;
    cfg.penalty.seed = seed;
    cfg.inference.n_boot = 1000;
    cfg.inference.grid_size = 30;
    cfg.inference.seed = seed;
    cfg
}
