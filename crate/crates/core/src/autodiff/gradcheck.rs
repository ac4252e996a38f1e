//! Central finite differences for checking analytic gradients.

use super::tensor::Tensor;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_grad<F>(f: F, inputs: &[Tensor], which: usize, step: f64) -> Tensor
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let n = work[which].len();
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        let orig = work[which].data()[k];
        work[which].data_mut()[k] = orig + step;
        let plus = f(&work);
        work[which].data_mut()[k] = orig - step;
        let minus = f(&work);
        work[which].data_mut()[k] = orig;
        *o = (plus - minus) / (2.0 * step);
    }
    Tensor::from_parts(inputs[which].shape().to_vec(), out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are
/// (near) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
