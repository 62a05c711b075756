use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// This is the independent oracle for every autodiff check; it never touches
/// a tape.
pub fn finite_diff_gradient<S, F>(f: F, x: &Tensor<S>, step: S) -> Result<Tensor<S>>
where
    S: Real,
    F: Fn(&Tensor<S>) -> Result<S>,
{
    let mut grad = Vec::with_capacity(x.numel());
    let mut probe = x.data().to_vec();
    let two = S::lit(2.0);
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig - step;
        let minus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("non-finite function value around coordinate {i}")));
        }
        grad.push((plus - minus) / (two * step));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}
