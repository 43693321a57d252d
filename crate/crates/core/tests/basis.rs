use madml::basis::*;
use proptest::prelude::*;

/// Breakpoints `0 = l_0 < ... < l_t = 1` from unsorted interior draws.
fn knots_from(mut interior: Vec<f64>) -> Vec<f64> {
    interior.sort_by(f64::total_cmp);
    interior.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    let mut k = vec![0.0];
    k.extend(interior);
    k.push(1.0);
    k
}

fn clamped(knots: &[f64], degree: usize) -> Vec<f64> {
    let mut t = vec![knots[0]; degree];
    t.extend_from_slice(knots);
    t.extend(std::iter::repeat_n(knots[knots.len() - 1], degree));
    t
}

/// Closed-form quadratic Bernstein polynomials on [0, 1].
fn bernstein2(x: f64) -> [f64; 3] {
    [(1.0 - x).powi(2), 2.0 * x * (1.0 - x), x * x]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partition_of_unity_and_positivity(
        interior in prop::collection::vec(0.02f64..0.98, 0..5),
        degree in 0usize..=3,
        xs in prop::collection::vec(0.0f64..=1.0, 1..20),
    ) {
        let knots = knots_from(interior);
        for &x in &xs {
            let b = bspline_basis(x, &knots, degree).unwrap();
            prop_assert_eq!(b.len(), knots.len() - 1 + degree);
            prop_assert!(b.iter().all(|&v| v >= 0.0));
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn local_support(
        interior in prop::collection::vec(0.02f64..0.98, 0..5),
        degree in 0usize..=3,
        x in 0.0f64..1.0,
    ) {
        let knots = knots_from(interior);
        let t = clamped(&knots, degree);
        let b = bspline_basis(x, &knots, degree).unwrap();
        for (j, v) in b.iter().enumerate() {
            if x < t[j] || x > t[j + degree + 1] {
                prop_assert_eq!(*v, 0.0, "term {} nonzero at {} outside [{}, {}]", j, x, t[j], t[j + degree + 1]);
            }
        }
        // at most degree + 1 terms are active anywhere
        prop_assert!(b.iter().filter(|v| **v > 0.0).count() <= degree + 1);
    }

    #[test]
    fn normalized_columns_have_unit_second_moment(
        interior in prop::collection::vec(0.1f64..0.9, 0..3),
        degree in 0usize..=3,
        seed in any::<u64>(),
    ) {
        let knots = knots_from(interior);
        let n = 400;
        // deterministic low-discrepancy sample covering every cell
        let shift = (seed % 1000) as f64 / 1000.0;
        let xs: Vec<f64> = (0..n).map(|i| ((i as f64 + shift) / n as f64).min(1.0)).collect();
        let spec = BasisSpec::bspline(knots, degree).normalized(true);
        let b = evaluate_basis(&spec, &xs).unwrap();
        for j in 0..b.k() {
            let m2 = b.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64;
            prop_assert!((m2 - 1.0).abs() < 1e-10);
        }
        prop_assert!(b.values().iter().all(|&v| v >= 0.0));
        let q = gram(&b);
        prop_assert!((0..b.k()).all(|j| (q[(j, j)] - 1.0).abs() < 1e-10));
    }

    #[test]
    fn sup_norms_match_brute_force(
        xs in prop::collection::vec(1.0f64..=2.0, 1..50),
        degree in 0usize..=3,
    ) {
        let spec = BasisSpec::bspline(vec![1.0, 1.5, 2.0], degree);
        let b = evaluate_basis(&spec, &xs).unwrap();
        let mut inf = 0.0f64;
        let mut two = 0.0f64;
        for &x in &xs {
            let v = bspline_basis(x, &[1.0, 1.5, 2.0], degree).unwrap();
            inf = v.iter().fold(inf, |m, a| m.max(a.abs()));
            two = two.max(v.iter().map(|a| a * a).sum::<f64>().sqrt());
        }
        prop_assert_eq!(b.xi_inf(), inf);
        prop_assert!((b.xi_2() - two).abs() < 1e-14);
    }
}

#[test]
fn quadratic_bspline_matches_bernstein_closed_form() {
    for i in 0..=50 {
        let x = i as f64 / 50.0;
        let b = bspline_basis(x, &[0.0, 1.0], 2).unwrap();
        let r = bernstein2(x);
        for j in 0..3 {
            assert!((b[j] - r[j]).abs() < 1e-14);
        }
    }
}

#[test]
fn out_of_support_is_rejected() {
    assert!(matches!(
        bspline_basis(1.2, &[0.0, 1.0], 2),
        Err(madml::Error::OutOfSupport { .. })
    ));
    assert!(matches!(
        local_constant_basis(-0.1, &[0.0, 0.5, 1.0]),
        Err(madml::Error::OutOfSupport { .. })
    ));
}

#[test]
fn local_constant_design_is_identity_when_normalized() {
    let xs: Vec<f64> = (0..90).map(|i| i as f64 / 89.0).collect();
    let spec = BasisSpec::local_constant(vec![0.0, 0.3, 0.7, 1.0]).normalized(true);
    let b = evaluate_basis(&spec, &xs).unwrap();
    let dm = design_matrix(&b, DEFAULT_EIGEN_FLOOR).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dm.q[(i, j)] - want).abs() < 1e-12);
        }
    }
    assert!((&dm.q - dm.q.transpose()).amax() == 0.0);
}

#[test]
fn too_many_knots_for_the_data_is_singular() {
    // every observation in the first cell leaves the other terms empty
    let xs = vec![0.05, 0.1, 0.15, 0.2];
    let spec = BasisSpec::local_constant(vec![0.0, 0.5, 1.0]);
    let b = evaluate_basis(&spec, &xs).unwrap();
    assert!(matches!(
        design_matrix(&b, DEFAULT_EIGEN_FLOOR),
        Err(madml::Error::SingularDesign { .. })
    ));
}

#[test]
fn shifted_weights_leave_second_stage_columns_alone() {
    let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
    let plain = evaluate_basis(&BasisSpec::bspline(vec![0.0, 1.0], 2), &xs).unwrap();
    let shifted = evaluate_basis(&BasisSpec::bspline(vec![0.0, 1.0], 2).with_shift(Some(0.25)), &xs).unwrap();
    assert_eq!(plain.values(), shifted.values());
    for j in 0..3 {
        let w = shifted.first_stage_weights(j);
        assert!(w.iter().zip(plain.column(j)).all(|(a, b)| (a - b - 0.25).abs() < 1e-15));
    }
}
