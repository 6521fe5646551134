use super::{Result, Tensor};

/// Central-difference gradient of a scalar function, same shape as `x`.
pub fn finite_diff<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Tensor::new(x.shape(), plus, x.precision())?);
        let fm = f(&Tensor::new(x.shape(), minus, x.precision())?);
        grad.push((fp - fm) / (2.0 * step));
    }
    Tensor::new(x.shape(), grad, x.precision())
}

/// `|a − b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)` of two gradients.
///
/// Element-wise ratios blow up on entries that are zero up to truncation
/// noise, so whole-array comparisons use the norm form.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 7.0]).unwrap();
        let g = finite_diff(|_| 4.2, &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(g.shape(), x.shape());
    }

    #[test]
    fn relative_error_is_symmetric_and_scale_free() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.01) - relative_error(100.0, 101.0)).abs() < 1e-12);
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
