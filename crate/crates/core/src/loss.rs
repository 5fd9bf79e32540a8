//! Hybrid soft-Dice + cross-entropy loss on softmax probabilities, with
//! analytic gradients and deep supervision over auxiliary outputs.
//!
//! For one sample with `I` voxels and `J` classes:
//!
//! ```text
//! L = 1 - (2/J) sum_j A_j / B_j - (1/I) sum_ij G_ij log(P_ij + eps)
//! A_j = sum_i G_ij P_ij,   B_j = sum_i G_ij^2 + sum_i P_ij^2 + eps
//! ```
//!
//! Batches average the per-sample losses.

use crate::decoder::downsample_labels;
use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::ops::activation::softmax_channels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_pair<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    p.expect_same_shape(g)?;
    p.dims5()?;
    if p.data().iter().any(|&v| !(v >= T::zero())) {
        return Err(Error::input("probabilities must be non-negative"));
    }
    if g.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::input("targets must be one-hot (entries 0 or 1)"));
    }
    Ok(())
}

/// Loss of one sample and, optionally, its gradient with respect to `p`.
/// Both slices hold `I` rows of `J` channels.
fn sample_loss<T: Scalar>(p: &[T], g: &[T], j: usize, eps: T, grad: Option<&mut [T]>) -> T {
    let n = p.len() / j;
    let mut a = vec![T::zero(); j];
    let mut b = vec![eps; j];
    let mut ce = T::zero();
    for (pr, gr) in p.chunks_exact(j).zip(g.chunks_exact(j)) {
        for k in 0..j {
            a[k] += gr[k] * pr[k];
            b[k] += gr[k] * gr[k] + pr[k] * pr[k];
            if gr[k] != T::zero() {
                ce += gr[k] * (pr[k] + eps).ln();
            }
        }
    }
    let jt = T::from_usize_lossy(j);
    let it = T::from_usize_lossy(n);
    let two = T::lit(2.0);
    let dice: T = a.iter().zip(&b).map(|(&a, &b)| a / b).fold(T::zero(), |s, v| s + v);
    let loss = T::one() - two / jt * dice - ce / it;
    if let Some(out) = grad {
        for ((o, pr), gr) in out.chunks_exact_mut(j).zip(p.chunks_exact(j)).zip(g.chunks_exact(j)) {
            for k in 0..j {
                let dd = gr[k] / b[k] - two * a[k] * pr[k] / (b[k] * b[k]);
                o[k] = -two / jt * dd - gr[k] / (it * (pr[k] + eps));
            }
        }
    }
    loss
}

/// Batch-mean hybrid loss of probabilities `p` against one-hot targets `g`,
/// both `(B, D, H, W, J)`.
pub fn hybrid_loss<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, eps: T) -> Result<T> {
    check_pair(p, g)?;
    let d = p.dims5()?;
    let per = d.voxels() * d.c;
    let total = p
        .data()
        .chunks_exact(per)
        .zip(g.data().chunks_exact(per))
        .map(|(ps, gs)| sample_loss(ps, gs, d.c, eps, None))
        .fold(T::zero(), |s, v| s + v);
    Ok(total / T::from_usize_lossy(d.b))
}

/// Loss and its gradient with respect to the probabilities.
pub fn hybrid_loss_grad<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, eps: T) -> Result<(T, Tensor<T>)> {
    check_pair(p, g)?;
    loss_grad_unchecked(p, g, eps)
}

// Non-finite probabilities flow through so callers can detect divergence.
fn loss_grad_unchecked<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, eps: T) -> Result<(T, Tensor<T>)> {
    let d = p.dims5()?;
    let per = d.voxels() * d.c;
    let mut grad = Tensor::zeros(p.shape());
    let mut total = T::zero();
    let inv_b = T::one() / T::from_usize_lossy(d.b);
    for ((ps, gs), out) in p
        .data()
        .chunks_exact(per)
        .zip(g.data().chunks_exact(per))
        .zip(grad.data_mut().chunks_exact_mut(per))
    {
        total += sample_loss(ps, gs, d.c, eps, Some(out));
        out.iter_mut().for_each(|v| *v *= inv_b);
    }
    Ok((total * inv_b, grad))
}

/// One-hot encoding of a batch of label masks as `(B, D, H, W, J)`.
pub fn one_hot<T: Scalar>(labels: &[LabelMask], classes: usize) -> Result<Tensor<T>> {
    let first = labels.first().ok_or_else(|| Error::input("empty label batch"))?;
    let s = first.shape();
    let v: usize = s.iter().product();
    let mut out = vec![T::zero(); labels.len() * v * classes];
    for (b, m) in labels.iter().enumerate() {
        if m.shape() != s {
            return Err(Error::input(format!("label grids differ: {:?} vs {s:?}", m.shape())));
        }
        if m.num_classes() > classes {
            return Err(Error::input(format!(
                "labels have {} classes, network predicts {classes}",
                m.num_classes()
            )));
        }
        for (i, &l) in m.data().iter().enumerate() {
            out[(b * v + i) * classes + l as usize] = T::one();
        }
    }
    Tensor::new(vec![labels.len(), s[0], s[1], s[2], classes], out)
}

/// Loss of raw logits and its gradient with respect to them (softmax over
/// the channel axis is part of the loss).
pub fn softmax_hybrid_loss<T: Scalar>(logits: &Tensor<T>, labels: &[LabelMask], eps: T) -> Result<(T, Tensor<T>)> {
    let d = logits.dims5()?;
    if labels.len() != d.b {
        return Err(Error::input(format!("{} label masks for batch {}", labels.len(), d.b)));
    }
    if labels[0].shape() != d.spatial() {
        return Err(Error::input(format!(
            "label grid {:?} differs from logit grid {:?}",
            labels[0].shape(),
            d.spatial()
        )));
    }
    let p = softmax_channels(logits);
    let g = one_hot(labels, d.c)?;
    let (loss, dp) = loss_grad_unchecked(&p, &g, eps)?;
    let mut dz = dp;
    for (dzr, pr) in dz.data_mut().chunks_exact_mut(d.c).zip(p.data().chunks_exact(d.c)) {
        let s = dzr.iter().zip(pr).fold(T::zero(), |s, (&a, &b)| s + a * b);
        for (v, &pk) in dzr.iter_mut().zip(pr) {
            *v = pk * (*v - s);
        }
    }
    Ok((loss, dz))
}

/// Weighted sum of the main-output loss and the auxiliary losses against
/// nearest-resampled labels. `weights[0]` is the main output's weight.
/// Returns the total and one logit gradient per output.
pub fn deep_supervised_loss<T: Scalar>(
    main: &Tensor<T>,
    aux: &[Tensor<T>],
    labels: &[LabelMask],
    weights: &[f64],
    eps: T,
) -> Result<(T, Vec<Tensor<T>>)> {
    if weights.len() != aux.len() + 1 {
        return Err(Error::input(format!(
            "{} supervision weights for {} outputs",
            weights.len(),
            aux.len() + 1
        )));
    }
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(weights.len());
    for (k, out) in std::iter::once(main).chain(aux).enumerate() {
        let w = weights[k];
        if w == 0.0 {
            grads.push(Tensor::zeros(out.shape()));
            continue;
        }
        let target = out.dims5()?.spatial();
        let resampled;
        let lab = if labels.first().map(|l| l.shape()) == Some(target) {
            labels
        } else {
            resampled = labels
                .iter()
                .map(|l| downsample_labels(l, target))
                .collect::<Result<Vec<_>>>()?;
            &resampled
        };
        let (l, g) = softmax_hybrid_loss(out, lab, eps)?;
        total += T::lit(w) * l;
        grads.push(g.scale(T::lit(w)));
    }
    Ok((total, grads))
}
