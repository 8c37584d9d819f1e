//! Central finite differences, used as the independent gradient oracle.

/// Central-difference gradient of `f` at `x` with step `h` per coordinate.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest per-coordinate relative error between two gradients.
///
/// Coordinates where both magnitudes are below `zero_floor` count as exact,
/// since the relative error of two near-zero finite-difference estimates is
/// dominated by cancellation noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], zero_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs());
        if denom < zero_floor {
            continue;
        }
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
