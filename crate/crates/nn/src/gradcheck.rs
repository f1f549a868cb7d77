//! Central finite-difference gradient checking.

/// Relative error used by [`compare`]: `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error between two gradient vectors and its index.
pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| (relative_error(*a, *n, floor), i))
        .fold((0.0, 0), |acc, e| if e.0 > acc.0 { e } else { acc })
}
