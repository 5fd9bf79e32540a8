//! Trilinear upsampling with the align-corners-false convention.
//!
//! Output sample `o` along an axis of scale `in / out` reads source position
//! `max(0, (o + 0.5) * in / out - 0.5)`, interpolating between the two
//! neighbouring samples (clamped at the far edge). The 3D map is the product
//! of three 1D maps, so both it and its adjoint are applied axis by axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<Tap<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn interp_axis<T: Scalar>(x: &Tensor<T>, axis: usize, n_out: usize) -> Tensor<T> {
    let (outer, n_in, inner) = split(x.shape(), axis);
    if n_in == n_out {
        return x.clone();
    }
    let taps = taps::<T>(n_in, n_out);
    let mut shape = x.shape().to_vec();
    shape[axis] = n_out;
    let mut out = vec![T::zero(); outer * n_out * inner];
    let xs = x.data();
    for o in 0..outer {
        for (j, tap) in taps.iter().enumerate() {
            let dst = &mut out[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            let lo = &xs[(o * n_in + tap.lo) * inner..(o * n_in + tap.lo + 1) * inner];
            let hi = &xs[(o * n_in + tap.hi) * inner..(o * n_in + tap.hi + 1) * inner];
            let w0 = T::one() - tap.frac;
            for ((d, &a), &b) in dst.iter_mut().zip(lo).zip(hi) {
                *d = w0 * a + tap.frac * b;
            }
        }
    }
    Tensor::new(shape, out).expect("consistent shape")
}

fn interp_axis_adjoint<T: Scalar>(g: &Tensor<T>, axis: usize, n_in: usize) -> Tensor<T> {
    let (outer, n_out, inner) = split(g.shape(), axis);
    if n_in == n_out {
        return g.clone();
    }
    let taps = taps::<T>(n_in, n_out);
    let mut shape = g.shape().to_vec();
    shape[axis] = n_in;
    let mut out = vec![T::zero(); outer * n_in * inner];
    let gs = g.data();
    for o in 0..outer {
        for (j, tap) in taps.iter().enumerate() {
            let src = &gs[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            let w0 = T::one() - tap.frac;
            for (k, &v) in src.iter().enumerate() {
                out[(o * n_in + tap.lo) * inner + k] += w0 * v;
                out[(o * n_in + tap.hi) * inner + k] += tap.frac * v;
            }
        }
    }
    Tensor::new(shape, out).expect("consistent shape")
}

pub fn upsample_trilinear<T: Scalar>(input: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    let d = input.dims5()?;
    for (axis, (&src, &dst)) in d.spatial().iter().zip(&target).enumerate() {
        if dst < src || src == 0 {
            return Err(Error::config(format!(
                "upsampling target {target:?} is smaller than source {:?} along axis {}",
                d.spatial(),
                axis + 1
            )));
        }
    }
    let mut t = interp_axis(input, 1, target[0]);
    t = interp_axis(&t, 2, target[1]);
    Ok(interp_axis(&t, 3, target[2]))
}

/// Adjoint of [`upsample_trilinear`] from `grad_out` back to `source` extents.
pub fn upsample_trilinear_backward<T: Scalar>(grad_out: &Tensor<T>, source: [usize; 3]) -> Tensor<T> {
    let mut t = interp_axis_adjoint(grad_out, 3, source[2]);
    t = interp_axis_adjoint(&t, 2, source[1]);
    interp_axis_adjoint(&t, 1, source[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::full(&[1, 2, 3, 2, 2], 3.5f64);
        let y = upsample_trilinear(&x, [4, 6, 4]).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 3, 2, 2], |i| i as f64);
        assert_eq!(upsample_trilinear(&x, [2, 3, 2]).unwrap(), x);
    }

    #[test]
    fn two_to_four_samples() {
        let x = Tensor::new(vec![1, 2, 1, 1, 1], vec![0.0f64, 1.0]).unwrap();
        let y = upsample_trilinear(&x, [4, 1, 1]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn rejects_downsampling() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 4, 1]);
        assert!(upsample_trilinear(&x, [2, 4, 4]).is_err());
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::from_fn(&[2, 2, 3, 1, 2], |i| ((i * 7 % 5) as f64) - 2.0);
        let y = upsample_trilinear(&x, [4, 7, 2]).unwrap();
        let g = Tensor::from_fn(y.shape(), |i| (i as f64 * 0.3).sin());
        let gx = upsample_trilinear_backward(&g, [2, 3, 1]);
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&gx).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
