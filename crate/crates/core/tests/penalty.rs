mod common;

use common::simulated;
use madml::basis::{evaluate_basis, BasisSpec};
use madml::penalty::*;
use madml::rng::substream;
use madml::simulation::Dgp;
use madml::solver::{Arm, NuisanceModel, SolverConfig};
use madml::Execution;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn scores(seed: u64, n: usize, dz: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut rng = substream(seed, &[]);
    let u = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = DMatrix::from_fn(n, dz, |_, l| if l == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    (u, z)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantile_scales_with_the_residuals(seed in any::<u64>(), t in 0.01f64..100.0) {
        let (u, z) = scores(seed, 40, 6);
        let scaled: Vec<f64> = u.iter().map(|v| v * t).collect();
        let q = bootstrap_quantiles(&[&u], &z, 0.1, 300, &mut substream(seed, &[1]))[0];
        let qt = bootstrap_quantiles(&[&scaled], &z, 0.1, 300, &mut substream(seed, &[1]))[0];
        prop_assert!((qt - t * q).abs() <= 1e-12 * t * q);
    }

    #[test]
    fn penalty_is_linear_in_c0(seed in any::<u64>(), c0 in 1.0001f64..5.0) {
        let (u, z) = scores(seed, 30, 4);
        let q = bootstrap_quantiles(&[&u], &z, 0.05, 200, &mut substream(seed, &[2]))[0];
        let p = bootstrap_penalty(&u, &z, c0, 0.05, 200, &mut substream(seed, &[2]));
        prop_assert_eq!(p, c0 * q);
    }

    #[test]
    fn smaller_eps_never_lowers_the_quantile(seed in any::<u64>(), a in 0.01f64..0.5, b in 0.01f64..0.5) {
        let (u, z) = scores(seed, 30, 5);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let q_lo = bootstrap_quantiles(&[&u], &z, lo, 400, &mut substream(seed, &[3]))[0];
        let q_hi = bootstrap_quantiles(&[&u], &z, hi, 400, &mut substream(seed, &[3]))[0];
        prop_assert!(q_lo >= q_hi);
    }

    #[test]
    fn folds_are_balanced_and_stratified(seed in any::<u64>(), n in 20usize..200, k in 2usize..6) {
        let mut rng = substream(seed, &[4]);
        let mut d: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        for i in 0..k {
            d[2 * i] = 1.0;
            d[2 * i + 1] = 0.0;
        }
        let labels = stratified_folds(&d, k, seed).unwrap();
        for arm in [0.0, 1.0] {
            let mut counts = vec![0usize; k];
            (0..n).filter(|&i| d[i] == arm).for_each(|i| counts[labels[i]] += 1);
            let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(*mn >= 1 && mx - mn <= 1);
        }
        prop_assert_eq!(stratified_folds(&d, k, seed).unwrap(), labels);
    }
}

fn basis(ds: &madml::dataset::Dataset) -> madml::basis::BasisMatrix {
    evaluate_basis(&BasisSpec::bspline(vec![1.0, 2.0], 2).normalized(true), ds.x()).unwrap()
}

#[test]
fn a_single_cv_only_candidate_is_the_pilot() {
    let ds = simulated(Dgp::S1, 200, 10, 1);
    let b = basis(&ds);
    let cfg = PenaltyConfig {
        method: PenaltyMethod::CvOnly,
        pilot_candidates: Some(vec![0.7]),
        ..Default::default()
    };
    let sel = select_penalties(NuisanceModel::Calibrated(Arm::Treated), &ds, &b, &cfg, &SolverConfig::default(), Execution::Sequential).unwrap();
    let pilot = pilot_penalty(0.7, ds.d_z(), ds.n());
    for t in &sel.terms {
        assert_eq!(t.lambda_gamma, pilot);
        assert_eq!(t.lambda_alpha, enforce_ratio(pilot, pilot, cfg.ratio_divisor));
        assert!(t.cv.gamma_losses.is_empty() || t.cv.candidates == vec![0.7]);
    }
}

#[test]
fn duplicate_candidates_do_not_change_the_choice() {
    let ds = simulated(Dgp::S1, 200, 10, 2);
    let b = basis(&ds);
    let run = |c: Vec<f64>| {
        let cfg = PenaltyConfig {
            pilot_candidates: Some(c),
            n_boot: 300,
            seed: 5,
            ..Default::default()
        };
        select_penalties(NuisanceModel::Calibrated(Arm::Treated), &ds, &b, &cfg, &SolverConfig::default(), Execution::Sequential).unwrap()
    };
    let plain = run(vec![0.2, 0.8, 0.05]);
    let dup = run(vec![0.8, 0.05, 0.2, 0.8, 0.05]);
    assert_eq!(plain.terms, dup.terms);
    assert_eq!(plain.terms[0].cv.candidates, vec![0.8, 0.2, 0.05]);
}

#[test]
fn selection_replays_under_a_fixed_seed_and_any_execution() {
    let ds = simulated(Dgp::S2, 200, 10, 3);
    let b = basis(&ds);
    let cfg = PenaltyConfig {
        n_boot: 300,
        seed: 11,
        ..Default::default()
    };
    let solver = SolverConfig::default();
    for model in [NuisanceModel::Calibrated(Arm::Treated), NuisanceModel::Calibrated(Arm::Control), NuisanceModel::Likelihood] {
        let a = select_penalties(model, &ds, &b, &cfg, &solver, Execution::Sequential).unwrap();
        let c = select_penalties(model, &ds, &b, &cfg, &solver, Execution::Parallel).unwrap();
        assert_eq!(a, c);
        for t in &a.terms {
            assert!(t.lambda_gamma > 0.0 && t.lambda_alpha >= t.lambda_gamma / cfg.ratio_divisor);
            assert!(t.lambda_alpha >= t.lambda_alpha_unfloored);
        }
    }
    let other = select_penalties(NuisanceModel::Calibrated(Arm::Treated), &ds, &b, &PenaltyConfig { seed: 12, ..cfg.clone() }, &solver, Execution::Sequential).unwrap();
    let first = select_penalties(NuisanceModel::Calibrated(Arm::Treated), &ds, &b, &cfg, &solver, Execution::Sequential).unwrap();
    assert_ne!(other.terms[0].lambda_gamma, first.terms[0].lambda_gamma);
}

#[test]
fn cv_losses_follow_the_sorted_candidates() {
    let ds = simulated(Dgp::S1, 200, 10, 4);
    let folds = build_folds(&ds, 5, 0).unwrap();
    let w = vec![1.0; ds.n()];
    let cands = [0.1, 1.0, 0.3];
    let cv = cv_select_constants(NuisanceModel::Calibrated(Arm::Treated), &ds, &w, &cands, &folds, &SolverConfig::default()).unwrap();
    assert_eq!(cv.candidates, vec![1.0, 0.3, 0.1]);
    let best = cv.gamma_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let at = cv.candidates.iter().position(|c| *c == cv.c_gamma).unwrap();
    assert_eq!(cv.gamma_losses[at], best);
}
