//! Central finite-difference helpers for checking analytic gradients.

use crate::tensor::Tensor3;

/// Central-difference gradient of a scalar function of a parameter slice.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error between `analytic` and the central-difference gradient of
/// `f` at `x`.
pub fn check_slice_fn(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let numeric = numeric_gradient(f, x, h);
    relative_error(analytic, &numeric)
}

pub fn check_tensor_fn(
    mut f: impl FnMut(&Tensor3) -> f64,
    x: &Tensor3,
    analytic: &Tensor3,
    h: f64,
) -> f64 {
    let (m, hh, w) = x.shape();
    check_slice_fn(
        |d| f(&Tensor3::from_vec(m, hh, w, d.to_vec()).unwrap()),
        x.data(),
        analytic.data(),
        h,
    )
}
