use super::NumError;
use crate::scalar::Scalar;

/// Compares the analytic gradient reported by `f` against central differences.
///
/// `f` returns the function value and its analytic gradient at the given
/// parameters. The result is the maximum over parameters of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradient_check<T, F>(mut f: F, params: &[T], eps: T) -> Result<T, NumError>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>), NumError>,
{
    if !(eps > T::zero()) {
        return Err(NumError::Evaluation(format!("step must be positive, got {eps}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(NumError::Evaluation("non-finite value at base point".into()));
    }
    super::check_dim("gradient_check", params.len(), analytic.len())?;

    let mut probe = params.to_vec();
    let mut worst = T::zero();
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (plus, _) = f(&probe)?;
        probe[i] = params[i] - eps;
        let (minus, _) = f(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumError::Evaluation(format!("non-finite value probing parameter {i}")));
        }
        let numeric = (plus - minus) / (eps + eps);
        let a = analytic[i];
        let denom = T::one().max(a.abs()).max(numeric.abs());
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
