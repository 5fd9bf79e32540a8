//! Position-wise linear layer over the channel (last) axis.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const ROWS_PER_TASK: usize = 64;

/// `y[.., o] = sum_i x[.., i] * w[i, o] + b[o]` with `w` shaped `(Cin, Cout)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&[T]>) -> Result<Tensor<T>> {
    let (cin, cout) = match w.shape() {
        [i, o] => (*i, *o),
        s => return Err(Error::config(format!("linear weight must be 2-D, got {s:?}"))),
    };
    let last = *x.shape().last().unwrap_or(&0);
    if last != cin {
        return Err(Error::config(format!(
            "linear layer expects {cin} input channels, got {last} (channel axis)"
        )));
    }
    if let Some(b) = b {
        if b.len() != cout {
            return Err(Error::config(format!("linear bias has {} entries, expected {cout}", b.len())));
        }
    }
    let rows = x.numel() / cin.max(1);
    let mut out = vec![T::zero(); rows * cout];
    let xs = x.data();
    let ws = w.data();
    out.par_chunks_mut(ROWS_PER_TASK * cout)
        .enumerate()
        .for_each(|(task, chunk)| {
            for (r, acc) in chunk.chunks_exact_mut(cout).enumerate() {
                let row = task * ROWS_PER_TASK + r;
                if let Some(b) = b {
                    acc.copy_from_slice(b);
                }
                for (i, &xv) in xs[row * cin..(row + 1) * cin].iter().enumerate() {
                    for (a, &wv) in acc.iter_mut().zip(&ws[i * cout..(i + 1) * cout]) {
                        *a += xv * wv;
                    }
                }
            }
        });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = cout;
    Tensor::new(shape, out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / cin.max(1);
    let xs = x.data();
    let ws = w.data();
    let gs = grad_out.data();

    let mut gx = vec![T::zero(); rows * cin];
    gx.par_chunks_mut(ROWS_PER_TASK * cin)
        .enumerate()
        .for_each(|(task, chunk)| {
            for (r, acc) in chunk.chunks_exact_mut(cin).enumerate() {
                let row = task * ROWS_PER_TASK + r;
                let g = &gs[row * cout..(row + 1) * cout];
                for (i, a) in acc.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for (&gv, &wv) in g.iter().zip(&ws[i * cout..(i + 1) * cout]) {
                        s += gv * wv;
                    }
                    *a = s;
                }
            }
        });

    let mut gw = vec![T::zero(); cin * cout];
    gw.par_chunks_mut(cout).enumerate().for_each(|(i, acc)| {
        for row in 0..rows {
            let xv = xs[row * cin + i];
            for (a, &gv) in acc.iter_mut().zip(&gs[row * cout..(row + 1) * cout]) {
                *a += xv * gv;
            }
        }
    });

    let mut gb = vec![T::zero(); cout];
    for g in gs.chunks_exact(cout) {
        for (a, &v) in gb.iter_mut().zip(g) {
            *a += v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(x.shape().to_vec(), gx)?,
        weight: Tensor::new(vec![cin, cout], gw)?,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matmul() {
        let x = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let y = linear(&x, &w, Some(&[0.5, 0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.5, 2.0, 3.0, 3.5, 4.0, 7.0]);
    }

    #[test]
    fn backward_matches_perturbation() {
        let x = Tensor::from_fn(&[3, 100, 2], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.91).cos());
        let g = Tensor::from_fn(&[3, 100, 3], |i| (i as f64 * 0.13).sin());
        let grads = linear_backward(&x, &w, &g).unwrap();
        let base = linear(&x, &w, None).unwrap().dot(&g).unwrap();
        for i in 0..6 {
            let mut wp = w.clone();
            wp.data_mut()[i] += 1.0;
            let d = linear(&x, &wp, None).unwrap().dot(&g).unwrap() - base;
            assert!((d - grads.weight.data()[i]).abs() < 1e-9);
        }
        for i in [0, 17, 599] {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1.0;
            let d = linear(&xp, &w, None).unwrap().dot(&g).unwrap() - base;
            assert!((d - grads.input.data()[i]).abs() < 1e-9);
        }
    }
}
