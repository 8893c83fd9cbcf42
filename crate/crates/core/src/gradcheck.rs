//! Central finite differences for checking analytic gradients.

/// Step used throughout the test suites.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Absolute slack for roundoff in `(f(x+h) − f(x−h)) / 2h`, roughly `ε·|f|/h`.
pub const DEFAULT_ATOL: f64 = 1e-8;

/// `∂f/∂x_k ≈ (f(x + h e_k) − f(x − h e_k)) / 2h` for every coordinate.
pub fn central_difference<F, E>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let up = f(&probe)?;
        probe[k] = x[k] - step;
        let down = f(&probe)?;
        probe[k] = x[k];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Largest componentwise violation of `|a − b| ≤ rtol·max(|a|, |b|) + atol`,
/// as a ratio; values ≤ 1 mean agreement.
pub fn worst_violation(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / (rtol * a.abs().max(b.abs()) + atol))
        .fold(0.0, f64::max)
}

pub fn gradients_agree(analytic: &[f64], numeric: &[f64], rtol: f64) -> bool {
    worst_violation(analytic, numeric, rtol, DEFAULT_ATOL) <= 1.0
}
