//! Small numerical helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal};

/// 1-based rank of the empirical `p`-quantile among `m` values: `ceil(p * m)`,
/// clamped to `[0, m]`.
///
/// A relative slack absorbs representation error, so that for example
/// `0.95 * 10000` maps to rank 9500 and not 9501.
pub fn order_rank(p: f64, m: usize) -> usize {
    let raw = p * m as f64;
    let r = (raw - 1e-9 * raw.abs().max(1.0)).ceil();
    (r.max(0.0) as usize).min(m)
}

/// The `rank`-th smallest value (1-based) of `values`.
///
/// # Panics
/// If `rank` is zero or exceeds `values.len()`.
pub fn order_statistic(values: &[f64], rank: usize) -> f64 {
    assert!(rank >= 1 && rank <= values.len(), "rank {rank} out of range");
    let mut v = values.to_vec();
    let (_, nth, _) = v.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *nth
}

/// Empirical `p`-quantile as the order statistic at rank `ceil(p * m)`
/// (at least rank 1).
pub fn empirical_quantile(values: &[f64], p: f64) -> f64 {
    let rank = order_rank(p, values.len()).max(1);
    order_statistic(values, rank)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Trapezoid rule for samples `f` on the (sorted) abscissae `x`.
pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    assert_eq!(x.len(), f.len());
    x.windows(2)
        .zip(f.windows(2))
        .map(|(xs, fs)| 0.5 * (xs[1] - xs[0]) * (fs[0] + fs[1]))
        .sum()
}

/// `n` equispaced points covering `[lo, hi]` (both ends included).
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
