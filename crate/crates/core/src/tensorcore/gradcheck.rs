//! Central finite-difference gradient checking.

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Compares an analytic gradient with central differences.
///
/// `f` returns the scalar value and its analytic gradient at the given
/// parameters. The result is the maximum over coordinates of
/// `|analytic − numeric| / max(1e−8, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        work[i] = params[i] + step;
        let (plus, _) = f(&work);
        work[i] = params[i] - step;
        let (minus, _) = f(&work);
        work[i] = params[i];
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}
