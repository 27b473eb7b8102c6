//! Finite-difference gradient oracle.
//!
//! Numeric gradients come from central differences of a plain forward
//! evaluation; they never touch the tape's backward pass, so they are an
//! independent check of it. 32-bit checks use h = 1e-3, 64-bit verification
//! uses h = 1e-6 (truncation vs rounding trade-off at each precision).

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference step for the given precision.
pub fn default_step<S: Scalar>() -> f64 {
    if std::mem::size_of::<S>() == 4 {
        1e-3
    } else {
        1e-6
    }
}

/// Numeric gradient of `eval` w.r.t. every entry of every input, by central
/// differences: (f(x+h) - f(x-h)) / 2h.
pub fn finite_difference<S: Scalar>(
    eval: &mut dyn FnMut(&[Tensor<S>]) -> f64,
    inputs: &[Tensor<S>],
    h: f64,
) -> Vec<Tensor<f64>> {
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut grad = Tensor::<f64>::zeros(inputs[ti].shape());
        for j in 0..inputs[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + S::from_f64(h);
            let up = eval(&work);
            work[ti].data_mut()[j] = orig - S::from_f64(h);
            let down = eval(&work);
            work[ti].data_mut()[j] = orig;
            grad.data_mut()[j] = (up - down) / (2.0 * h);
        }
        grads.push(grad);
    }
    grads
}

/// Largest disagreement between analytic and numeric gradients, relative to
/// the gradient's own scale: max_i |a_i - n_i| / max(gmax, floor), where
/// gmax is the largest gradient magnitude in the tensor.
///
/// Entry-by-entry ratios are meaningless below the difference quotient's
/// rounding floor (about ulp/h of the loss), so near-zero entries are
/// measured against the dominant gradient scale instead; `floor` guards the
/// all-zero case.
pub fn max_rel_error<S: Scalar>(analytic: &[S], numeric: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.numel());
    let gmax = numeric
        .data()
        .iter()
        .map(|n| n.abs())
        .chain(analytic.iter().map(|a| a.to_f64().abs()))
        .fold(0.0, f64::max);
    let scale = gmax.max(floor).max(1e-12);
    analytic
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a.to_f64() - n).abs() / scale)
        .fold(0.0, f64::max)
}
