mod common;

use madml::rng::substream;
use madml::simulation::*;
use madml::stats::logistic;
use madml::Execution;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn design(dgp: Dgp, d_z: usize) -> Design {
    DgpConfig {
        dgp,
        d_z,
        calibration_draws: 50_000,
        ..Default::default()
    }
    .resolve()
    .unwrap()
}

#[test]
fn treated_share_stays_near_one_half() {
    for dgp in [Dgp::S1, Dgp::S2, Dgp::S3] {
        let des = design(dgp, 30);
        for seed in 0..100 {
            let (ds, _) = generate(&des, 500, &mut substream(seed, &[dgp as u64])).unwrap();
            let share = ds.n_treated() as f64 / 500.0;
            assert!((0.4..=0.6).contains(&share), "{dgp:?} seed {seed}: {share}");
        }
    }
}

#[test]
fn calibrated_intercept_hits_the_target_on_fresh_draws() {
    for dgp in [Dgp::S1, Dgp::S3] {
        let des = design(dgp, 30);
        let (ds, _) = generate(&des, 40_000, &mut substream(77, &[])).unwrap();
        let share = ds.n_treated() as f64 / ds.n() as f64;
        assert!((share - 0.5).abs() < 0.015, "{dgp:?}: {share}");
    }
}

#[test]
fn toeplitz_draws_have_the_right_second_moments() {
    let n = 40_000;
    let z = toeplitz_gaussian(n, 5, &mut substream(3, &[]));
    for j in 0..5 {
        for l in 0..5 {
            let m = (0..n).map(|i| z[(i, j)] * z[(i, l)]).sum::<f64>() / n as f64;
            let want = 0.5f64.powi((j as i32 - l as i32).abs());
            assert!((m - want).abs() < 0.03, "({j}, {l}): {m} vs {want}");
        }
    }
    let l = toeplitz_cholesky(4);
    assert!((l[(1, 0)] - 0.5).abs() < 1e-15 && (l[(1, 1)] - 0.75f64.sqrt()).abs() < 1e-15);
}

#[test]
fn transformed_control_mean_matches_simulation() {
    let mut rng = substream(4, &[]);
    let draws = 1_000_000;
    let v: Vec<f64> = (0..draws).map(|_| dagger(rng.sample::<f64, _>(StandardNormal))).collect();
    let mc = v.iter().sum::<f64>() / draws as f64;
    let se = (v.iter().map(|a| (a - mc).powi(2)).sum::<f64>() / draws as f64).sqrt() / (draws as f64).sqrt();
    assert!((mc - dagger_mean()).abs() < 4.0 * se, "{mc} vs {} (se {se})", dagger_mean());
    let des = design(Dgp::S2, 20);
    let truth = GroundTruth::of(&des);
    assert!((truth.g0(1.5) - (1.0 + 1.5 + 1.125 + des.gamma.iter().sum::<f64>() * dagger_mean())).abs() < 1e-12);
    assert_eq!(GroundTruth::of(&design(Dgp::S1, 20)).g0(2.0), 5.0);
}

#[test]
fn treated_outcomes_center_on_the_estimand() {
    // with the true propensity, inverse weighting recovers E[Y_1] exactly in expectation
    let des = design(Dgp::S2, 12);
    let (ds, truth) = generate(&des, 200_000, &mut substream(8, &[])).unwrap();
    let s = des.gamma.len();
    let ipw = (0..ds.n())
        .map(|i| {
            let x = ds.x()[i];
            let lin: f64 = (0..s).map(|l| des.gamma[l] * ds.z()[(i, 2 + l)]).sum();
            let p = logistic(des.intercept + x + 0.5 * x * x + lin);
            ds.d()[i] * ds.y()[i] / p
        })
        .sum::<f64>()
        / ds.n() as f64;
    let target = (0..ds.n()).map(|i| truth.g0(ds.x()[i])).sum::<f64>() / ds.n() as f64;
    assert!((ipw - target).abs() < 0.05, "{ipw} vs {target}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integrated_errors_decompose(seed in any::<u64>(), reps in 2usize..20) {
        let mut rng = substream(seed, &[]);
        let grid: Vec<f64> = (0..25).map(|i| 1.0 + i as f64 / 24.0).collect();
        let g0: Vec<f64> = grid.iter().map(|x| x * x).collect();
        let curves: Vec<Vec<f64>> = (0..reps)
            .map(|_| g0.iter().map(|v| v + rng.random_range(-0.5..0.7)).collect())
            .collect();
        let (b, v, m) = integrated_errors(&grid, &g0, &curves);
        prop_assert!(b >= 0.0 && v >= 0.0);
        prop_assert!((m - b - v).abs() <= 1e-12 * (1.0 + m));
    }
}

fn small_config(dgp: Dgp, seed: u64) -> MonteCarloConfig {
    let mut cfg = MonteCarloConfig {
        reps: 4,
        n_boot: 500,
        grid_size: 20,
        seed,
        ..Default::default()
    };
    cfg.dgp.dgp = dgp;
    cfg.dgp.n = 200;
    cfg.dgp.d_z = 15;
    cfg.dgp.calibration_draws = 20_000;
    cfg.penalty.n_boot = 300;
    cfg
}

#[test]
fn monte_carlo_replays_and_ignores_the_execution_policy() {
    let cfg = small_config(Dgp::S3, 21);
    let a = run_monte_carlo(&cfg, Execution::Sequential).unwrap();
    let b = run_monte_carlo(&cfg, Execution::Parallel).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.per_rep.len(), 4);
    assert_eq!(a.rows.len(), 2);
    for row in &a.rows {
        assert_eq!(row.reps_completed + row.failures, 4);
        assert!((row.imse - row.ibias2 - row.ivar).abs() < 1e-12 * (1.0 + row.imse));
        assert!(row.cov90 <= row.cov95 && row.ucov90 <= row.ucov95);
    }
    let other = run_monte_carlo(&small_config(Dgp::S3, 22), Execution::Parallel).unwrap();
    assert_ne!(a.rows, other.rows);
}

#[test]
fn configuration_errors_are_reported() {
    let mut cfg = small_config(Dgp::S1, 0);
    cfg.reps = 1;
    assert!(matches!(run_monte_carlo(&cfg, Execution::Sequential), Err(madml::Error::Config(_))));
    let mut cfg = small_config(Dgp::S1, 0);
    cfg.dgp.d_z = 5;
    assert!(run_monte_carlo(&cfg, Execution::Sequential).is_err());
}
