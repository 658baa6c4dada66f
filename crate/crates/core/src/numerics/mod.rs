//! Dense tensors, a reverse-mode tape and the few numeric kernels shared by
//! the rest of the crate.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

use crate::{Error, Exec, Result};

/// Added to vector norms before dividing, so the zero vector maps to zero.
pub const NORM_EPS: f64 = 1e-12;

/// `v / (‖v‖ + ε)` for a rank-1 tensor.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::shape(format!(
            "l2_normalize expects rank 1, got {:?}",
            v.shape()
        )));
    }
    let s = v.norm() + NORM_EPS;
    Ok(Tensor::from_parts(
        v.shape().to_vec(),
        v.data().iter().map(|x| x / s).collect(),
    ))
}

pub(crate) fn softmax_slice(z: &[f64], scale: f64) -> Vec<f64> {
    let max = z
        .iter()
        .map(|v| v * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v * scale - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Softmax of `scale · z`, computed after subtracting the maximum.
pub fn stable_softmax(z: &Tensor, scale: f64) -> Result<Tensor> {
    if z.rank() != 1 {
        return Err(Error::shape(format!(
            "stable_softmax expects rank 1, got {:?}",
            z.shape()
        )));
    }
    if !scale.is_finite() {
        return Err(Error::numeric("softmax scale is not finite"));
    }
    Tensor::new(z.shape().to_vec(), softmax_slice(z.data(), scale))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64 + Sync + Send,
{
    finite_diff_gradient_with(Exec::default(), f, x, eps)
}

/// [`finite_diff_gradient`] with an explicit execution strategy; each
/// coordinate is perturbed independently.
pub fn finite_diff_gradient_with<F>(exec: Exec, f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64 + Sync + Send,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::config(format!(
            "finite difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let partials = exec.map_range(x.len(), |i| {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (f(&plus), f(&minus));
        if fp.is_finite() && fm.is_finite() {
            Ok((fp - fm) / (2.0 * eps))
        } else {
            Err(Error::numeric(format!(
                "objective not finite around coordinate {i}"
            )))
        }
    });
    let data = partials.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(v.data()[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(v.data()[1], 0.8, epsilon = 1e-12);
        let v = l2_normalize(&Tensor::vector(vec![0.0, 1.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(v.data()[1], 1.0, epsilon = 1e-11);
        let v = l2_normalize(&Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&Tensor::zeros(&[2, 2])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = stable_softmax(&Tensor::vector(vec![1000.0, 1000.0]).unwrap(), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = stable_softmax(&Tensor::vector(vec![1.0, 0.0]).unwrap(), 2.0).unwrap();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(p.data()[0], e2 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.data()[0], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(p.data()[1], 0.1192, epsilon = 1e-4);
        assert!(stable_softmax(&Tensor::zeros(&[1, 2]), 1.0).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let x = Tensor::scalar(3.0).unwrap();
        let g = finite_diff_gradient(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert_abs_diff_eq!(g.data()[0], 6.0, epsilon = 1e-8);

        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_gradient(|_| 4.0, &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
        let g = finite_diff_gradient(|t| t.sum(), &x, 1e-5).unwrap();
        for v in g.data() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
        }

        assert!(matches!(
            finite_diff_gradient(|t| t.sum(), &x, 1e-2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            finite_diff_gradient(|_| f64::NAN, &x, 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            z in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
            scale in 0.01f64..5.0,
        ) {
            let a = stable_softmax(&Tensor::vector(z.clone()).unwrap(), scale).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = stable_softmax(&Tensor::vector(shifted).unwrap(), scale).unwrap();
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_norm_is_zero_or_one(v in proptest::collection::vec(-1e3f64..1e3, 1..16)) {
            let n = l2_normalize(&Tensor::vector(v).unwrap()).unwrap().norm();
            prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-9);
        }
    }
}
