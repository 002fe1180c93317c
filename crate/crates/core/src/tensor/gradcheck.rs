//! Central-difference gradient checking.

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, 1e-8)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares an analytic gradient of the scalar function `f` at `x` with
/// central differences of step `h`; returns the max relative error.
pub fn grad_check(f: impl FnMut(&[f64]) -> f64, analytic: &[f64], x: &[f64], h: f64) -> f64 {
    max_relative_error(analytic, &numeric_gradient(f, x, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = [0.5, -1.25, 3.0, 0.0];
        let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        assert!(grad_check(f, &w, &[1.0, 2.0, -3.0, 0.25], 1e-5) < 1e-10);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &[f64]| x[0] * x[0];
        assert!(grad_check(f, &[1.0], &[1.0], 1e-5) > 0.4);
    }
}
