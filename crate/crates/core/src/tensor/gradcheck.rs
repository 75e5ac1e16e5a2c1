//! Central finite differences, the independent oracle for backward passes.

use super::array::Tensor;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        grad.push(central_difference(&mut f, &mut probe, i, h)?);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Central difference along a single coordinate; `probe` is restored afterwards.
pub fn central_difference<T: Scalar>(
    f: &mut impl FnMut(&Tensor<T>) -> T,
    probe: &mut Tensor<T>,
    index: usize,
    h: T,
) -> Result<T> {
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + h;
    let up = f(probe);
    probe.data_mut()[index] = orig - h;
    let down = f(probe);
    probe.data_mut()[index] = orig;
    for v in [up, down] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                index,
                value: v.to_f64_lossy(),
            });
        }
    }
    Ok((up - down) / (h + h))
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_f64([2, 3], &[0.1, -2.0, 3.5, 4.0, 0.0, 1.0]).unwrap();
        let g = finite_difference_gradient(|t| t.sum(), &x, 1e-4).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_difference_gradient(|t| t.item() * t.item(), &x, 1e-4).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_step_and_nan() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_difference_gradient(|t| t.item(), &x, 0.0).is_err());
        let err = finite_difference_gradient(|_| f64::NAN, &x, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }));
    }
}
