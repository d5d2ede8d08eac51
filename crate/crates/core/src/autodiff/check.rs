use crate::autodiff::grad::grad;
use crate::autodiff::tensor::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences with step `eps`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let x = point.with_grad();
    let y = f(&x)?;
    let analytic = grad(&y, &[&x], false)?.remove(0);

    let base = point.to_vec();
    let two_eps = eps + eps;
    let mut worst = T::zero();
    for i in 0..base.len() {
        let eval = |delta: T| -> Result<T> {
            let mut v = base.clone();
            v[i] = v[i] + delta;
            no_grad(|| f(&Tensor::from_vec(point.shape(), v)?)?.item())
        };
        let numeric = (eval(eps)? - eval(-eps)?) / two_eps;
        if !numeric.is_finite() {
            return Err(Error::NonFiniteValue("finite difference".into()));
        }
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}
