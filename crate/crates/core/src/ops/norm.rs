//! Layer normalization (per voxel, over channels) and 3D batch normalization
//! (per channel, over batch and space).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_affine<T>(gamma: &[T], beta: &[T], c: usize) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::config(format!(
            "normalization affine parameters have lengths {}/{}, expected {c}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Normalized activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    /// One entry per voxel (layer norm) or per channel (batch norm).
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(input: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<Tensor<T>> {
    Ok(layer_norm_cached(input, gamma, beta, eps)?.0)
}

pub fn layer_norm_cached<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let c = *input.shape().last().unwrap_or(&0);
    check_affine(gamma, beta, c)?;
    let n = T::from_usize_lossy(c);
    let mut out = vec![T::zero(); input.numel()];
    let mut xhat = vec![T::zero(); input.numel()];
    let mut inv_std = Vec::with_capacity(input.numel() / c.max(1));
    for ((x, y), xh) in input
        .data()
        .chunks_exact(c)
        .zip(out.chunks_exact_mut(c))
        .zip(xhat.chunks_exact_mut(c))
    {
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for i in 0..c {
            xh[i] = (x[i] - mean) * is;
            y[i] = gamma[i] * xh[i] + beta[i];
        }
        inv_std.push(is);
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        NormCache {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        },
    ))
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn layer_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &[T],
    cache: &NormCache<T>,
) -> NormGrads<T> {
    let c = gamma.len();
    let n = T::from_usize_lossy(c);
    let mut gx = vec![T::zero(); grad_out.numel()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut gxh = vec![T::zero(); c];
    for (((g, xh), out), &is) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
        .zip(&cache.inv_std)
    {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..c {
            gg[i] += g[i] * xh[i];
            gb[i] += g[i];
            gxh[i] = g[i] * gamma[i];
            sum_g += gxh[i];
            sum_gx += gxh[i] * xh[i];
        }
        for i in 0..c {
            out[i] = is / n * (n * gxh[i] - sum_g - xh[i] * sum_gx);
        }
    }
    NormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gx).expect("shape"),
        gamma: gg,
        beta: gb,
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(c: usize) -> Self {
        Self {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        }
    }

    /// Exponential moving average update with the batch statistics; the
    /// variance is stored unbiased.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], count: usize, momentum: T) {
        let unbias = if count > 1 {
            T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
        } else {
            T::one()
        };
        for i in 0..self.mean.len() {
            self.mean[i] = (T::one() - momentum) * self.mean[i] + momentum * batch_mean[i];
            self.var[i] = (T::one() - momentum) * self.var[i] + momentum * batch_var[i] * unbias;
        }
    }
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    pub cache: NormCache<T>,
    /// Batch mean and biased variance (training mode only).
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// In training mode normalizes with the batch statistics; otherwise with the
/// running ones.
pub fn batch_norm3d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &BatchNormStats<T>,
    eps: T,
    training: bool,
) -> Result<BatchNormOutput<T>> {
    let d = input.dims5()?;
    check_affine(gamma, beta, d.c)?;
    let c = d.c;
    let m = input.numel() / c.max(1);
    let (mean, var) = if training {
        if m == 0 {
            return Err(Error::input("batch norm over an empty batch"));
        }
        let mf = T::from_usize_lossy(m);
        let mut mean = vec![T::zero(); c];
        for row in input.data().chunks_exact(c) {
            for (a, &v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= mf);
        let mut var = vec![T::zero(); c];
        for row in input.data().chunks_exact(c) {
            for i in 0..c {
                let dv = row[i] - mean[i];
                var[i] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= mf);
        (mean, var)
    } else {
        (running.mean.clone(), running.var.clone())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); input.numel()];
    let mut xhat = vec![T::zero(); input.numel()];
    for ((x, y), xh) in input
        .data()
        .chunks_exact(c)
        .zip(out.chunks_exact_mut(c))
        .zip(xhat.chunks_exact_mut(c))
    {
        for i in 0..c {
            xh[i] = (x[i] - mean[i]) * inv_std[i];
            y[i] = gamma[i] * xh[i] + beta[i];
        }
    }
    let shape = input.shape().to_vec();
    Ok(BatchNormOutput {
        output: Tensor::new(shape.clone(), out)?,
        cache: NormCache {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        },
        batch_stats: training.then_some((mean, var)),
    })
}

pub fn batch_norm3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &[T],
    cache: &NormCache<T>,
    training: bool,
) -> NormGrads<T> {
    let c = gamma.len();
    let m = grad_out.numel() / c.max(1);
    let mf = T::from_usize_lossy(m);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (g, xh) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
    {
        for i in 0..c {
            gg[i] += g[i] * xh[i];
            gb[i] += g[i];
            sum_gx[i] += g[i] * gamma[i] * xh[i];
        }
    }
    let mut gx = vec![T::zero(); grad_out.numel()];
    for ((g, xh), out) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        for i in 0..c {
            let gxh = g[i] * gamma[i];
            out[i] = if training {
                cache.inv_std[i] / mf * (mf * gxh - gb[i] * gamma[i] - xh[i] * sum_gx[i])
            } else {
                cache.inv_std[i] * gxh
            };
        }
    }
    NormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gx).expect("shape"),
        gamma: gg,
        beta: gb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(shape: &[usize], seed: u64, scale: f64, shift: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            shift + scale * z
        })
    }

    #[test]
    fn two_point_layer_norm() {
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![1.0f64, 3.0]).unwrap();
        let y = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn eval_batch_norm_with_unit_stats_is_identity() {
        let x = gaussian(&[2, 2, 2, 2, 3], 1, 1.0, 0.0);
        let stats = BatchNormStats::new(3);
        let out = batch_norm3d(&x, &[1.0; 3], &[0.0; 3], &stats, 0.0, false).unwrap();
        assert_eq!(out.output, x);
    }

    #[test]
    fn normalized_statistics() {
        let x = gaussian(&[2, 3, 4, 4, 6], 2, 3.0, 5.0);
        let eps = 1e-5;
        let y = layer_norm(&x, &[1.0; 6], &[0.0; 6], eps).unwrap();
        for row in y.data().chunks_exact(6) {
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
        let bn = batch_norm3d(&x, &[1.0; 6], &[0.0; 6], &BatchNormStats::new(6), eps, true).unwrap();
        let m = bn.output.numel() / 6;
        for ch in 0..6 {
            let vals: Vec<f64> = bn.output.data().iter().skip(ch).step_by(6).copied().collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    fn check_grad(training: bool, layer: bool) {
        let x = gaussian(&[2, 2, 2, 1, 3], 3, 1.5, 0.2);
        let gamma = [0.7, -1.2, 1.9];
        let beta = [0.1, 0.2, -0.3];
        let g = gaussian(x.shape(), 4, 1.0, 0.0);
        let stats = BatchNormStats { mean: vec![0.3, -0.1, 0.2], var: vec![1.5, 0.7, 2.0] };
        let f = |x: &Tensor<f64>, gamma: &[f64]| -> f64 {
            let y = if layer {
                layer_norm(x, gamma, &beta, 1e-5).unwrap()
            } else {
                batch_norm3d(x, gamma, &beta, &stats, 1e-5, training).unwrap().output
            };
            y.dot(&g).unwrap()
        };
        let grads = if layer {
            let (_, cache) = layer_norm_cached(&x, &gamma, &beta, 1e-5).unwrap();
            layer_norm_backward(&g, &gamma, &cache)
        } else {
            let out = batch_norm3d(&x, &gamma, &beta, &stats, 1e-5, training).unwrap();
            batch_norm3d_backward(&g, &gamma, &out.cache, training)
        };
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (f(&xp, &gamma) - f(&xm, &gamma)) / (2.0 * h);
            assert!((fd - grads.input.data()[i]).abs() < 1e-6, "x[{i}] {fd} vs {}", grads.input.data()[i]);
        }
        for i in 0..3 {
            let mut gp = gamma;
            let mut gm = gamma;
            gp[i] += h;
            gm[i] -= h;
            let fd = (f(&x, &gp) - f(&x, &gm)) / (2.0 * h);
            assert!((fd - grads.gamma[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        check_grad(true, true);
    }

    #[test]
    fn batch_norm_training_gradient() {
        check_grad(true, false);
    }

    #[test]
    fn batch_norm_eval_gradient() {
        check_grad(false, false);
    }
}
