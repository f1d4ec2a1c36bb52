use super::TensorError;

/// Compares an analytic gradient with central differences.
///
/// `f` returns the loss and its analytic gradient at the given point; only the
/// gradient at `params` is used. Returns the maximum over coordinates of
/// `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], step: f64) -> Result<f64, TensorError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TensorError>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(TensorError::BadStep(step));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite(loss));
    }
    if analytic.len() != params.len() {
        return Err(super::shape_err(
            "finite_difference_check",
            format!(
                "gradient has {} values for {} parameters",
                analytic.len(),
                params.len()
            ),
        ));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let (up, _) = f(&x)?;
        x[i] = orig - step;
        let (down, _) = f(&x)?;
        x[i] = orig;
        for v in [up, down] {
            if !v.is_finite() {
                return Err(TensorError::NonFinite(v));
            }
        }
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
