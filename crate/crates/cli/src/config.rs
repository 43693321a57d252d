use std::path::{Path, PathBuf};

use madml::dataset::{PreprocessConfig, Schema};
use madml::estimator::{BasisConfig, FitConfig, InferenceConfig};
use madml::penalty::{PenaltyConfig, PenaltyMethod};
use madml::simulation::{Dgp, DgpConfig, EstimatorKind, MonteCarloConfig};
use madml::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Input data location and column roles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// When absent the header must name `y`, `d` and `x`; all other columns
    /// become controls.
    pub schema: Option<Schema>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    pub eval_point: f64,
    pub max_failure_frac: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let mc = MonteCarloConfig::default();
        SimulationConfig {
            dgp: mc.dgp,
            reps: mc.reps,
            estimators: mc.estimators,
            eval_point: mc.eval_point,
            max_failure_frac: mc.max_failure_frac,
        }
    }
}

/// Everything a command reads. Unknown keys are rejected at every level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into the penalty, inference and simulation seeds.
    pub seed: u64,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub basis: BasisConfig,
    pub solver: SolverConfig,
    pub penalty: PenaltyConfig,
    pub inference: InferenceConfig,
    pub simulation: SimulationConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub knots: Option<KnotsArg>,
    pub degree: Option<usize>,
    pub eta: Option<f64>,
    pub grid: Option<usize>,
    pub boot: Option<usize>,
    pub c0: Option<f64>,
    pub penalty_method: Option<PenaltyMethod>,
    pub dgp: Option<Dgp>,
    pub n: Option<usize>,
    pub dz: Option<usize>,
    pub reps: Option<usize>,
}

/// `--knots 2` asks for two equispaced interior knots; `--knots 1,1.5,2`
/// gives the full breakpoint sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum KnotsArg {
    Interior(usize),
    Breakpoints(Vec<f64>),
}

impl std::str::FromStr for KnotsArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.contains(',') {
            s.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| format!("'{v}' is not a number")))
                .collect::<Result<Vec<_>, _>>()
                .map(KnotsArg::Breakpoints)
        } else {
            s.trim()
                .parse::<usize>()
                .map(KnotsArg::Interior)
                .map_err(|_| format!("'{s}' is neither a knot count nor a comma-separated list"))
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("io", format!("cannot read config {}: {e}", path.display())).with_path(path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage("config", format!("invalid config {}: {e}", path.display())).with_path(path))
    }

    /// Applies the overrides and propagates the master seed.
    pub fn effective(mut self, o: &Overrides) -> Self {
        if let Some(p) = &o.data {
            self.data.path = Some(p.clone());
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        match &o.knots {
            Some(KnotsArg::Interior(k)) => {
                self.basis.interior_knots = *k;
                self.basis.knots = None;
            }
            Some(KnotsArg::Breakpoints(b)) => self.basis.knots = Some(b.clone()),
            None => {}
        }
        if let Some(d) = o.degree {
            self.basis.degree = d;
        }
        if let Some(e) = o.eta {
            self.inference.eta = e;
        }
        if let Some(g) = o.grid {
            self.inference.grid_size = g;
            self.inference.grid = None;
        }
        if let Some(b) = o.boot {
            self.inference.n_boot = b;
            self.penalty.n_boot = b;
        }
        if let Some(c) = o.c0 {
            self.penalty.c0 = c;
        }
        if let Some(m) = o.penalty_method {
            self.penalty.method = m;
        }
        if let Some(d) = o.dgp {
            self.simulation.dgp.dgp = d;
        }
        if let Some(n) = o.n {
            self.simulation.dgp.n = n;
        }
        if let Some(dz) = o.dz {
            self.simulation.dgp.d_z = dz;
        }
        if let Some(r) = o.reps {
            self.simulation.reps = r;
        }
        self.penalty.seed = self.seed;
        self.inference.seed = self.seed;
        self.simulation.dgp.seed = self.seed;
        self
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            basis: self.basis.clone(),
            preprocess: self.preprocess.clone(),
            solver: self.solver.clone(),
            penalty: self.penalty.clone(),
            inference: self.inference.clone(),
        }
    }

    /// The harness fixes the basis support to that of `X` unless knots are
    /// configured.
    pub fn monte_carlo_config(&self) -> MonteCarloConfig {
        let mut basis = self.basis.clone();
        if basis.knots.is_none() {
            basis.knots = MonteCarloConfig::default().basis.knots;
        }
        MonteCarloConfig {
            dgp: self.simulation.dgp.clone(),
            reps: self.simulation.reps,
            estimators: self.simulation.estimators.clone(),
            basis,
            solver: self.solver.clone(),
            penalty: self.penalty.clone(),
            preprocess: self.preprocess.clone(),
            n_boot: self.inference.n_boot,
            grid_size: self.inference.grid_size,
            eval_point: self.simulation.eval_point,
            max_failure_frac: self.simulation.max_failure_frac,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knots_argument_forms() {
        assert_eq!("3".parse::<KnotsArg>(), Ok(KnotsArg::Interior(3)));
        assert_eq!("1, 1.5,2".parse::<KnotsArg>(), Ok(KnotsArg::Breakpoints(vec![1.0, 1.5, 2.0])));
        assert!("x".parse::<KnotsArg>().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"penalty": {"c00": 1.0}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"penalty": {"c0": 1.2}}"#).is_ok());
    }

    #[test]
    fn seed_reaches_every_section() {
        let cfg = RunConfig::default().effective(&Overrides {
            seed: Some(9),
            ..Default::default()
        });
        assert_eq!((cfg.penalty.seed, cfg.inference.seed, cfg.simulation.dgp.seed), (9, 9, 9));
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig::default().effective(&Overrides {
            seed: Some(4),
            knots: Some(KnotsArg::Breakpoints(vec![0.0, 0.5, 1.0])),
            boot: Some(500),
            ..Default::default()
        });
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.clone().effective(&Overrides::default()), cfg);
    }
}
