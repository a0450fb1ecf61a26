//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here; the tape's backward pass is never consulted
//! when computing the numeric reference.

use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(|analytic|, |numeric|)`, norms taken over the whole tensor.
/// Both vanishing counts as agreement.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Numeric gradient of scalar `f` at `inputs[which]`, by central differences.
pub fn numeric_grad(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    step: f64,
) -> Tensor {
    let mut probe = inputs.to_vec();
    let n = probe[which].len();
    let mut g = vec![0.0; n];
    for (i, gi) in g.iter_mut().enumerate() {
        let orig = probe[which].data()[i];
        probe[which].data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe[which].data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe[which].data_mut()[i] = orig;
        *gi = (plus - minus) / (2.0 * step);
    }
    Tensor::new(inputs[which].shape().to_vec(), g).unwrap()
}
