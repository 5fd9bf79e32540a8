//! Fourier-domain token mixing (AFNO-3D) and the multi-head self-attention
//! block it replaces.
//!
//! The AFNO block computes
//!
//! ```text
//! x_out = irfft3(shrink(merge(mlp(partition(rfft3(x)))))) + x
//! ```
//!
//! where the channel axis of the half spectrum is split into `K` blocks, each
//! block is mixed by its own two-layer complex MLP at every frequency, and
//! `shrink` is a component-wise soft threshold. The MLP nonlinearity is ReLU
//! applied separately to the real and imaginary parts.

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::activation::softmax_channels;
use crate::ops::linear::{linear, linear_backward};
use crate::scalar::Scalar;
use crate::spectral::{irfft3_adjoint, rfft3_adjoint, FftPlan3};
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfnoConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub shrink_threshold: f64,
    pub hidden_multiplier: usize,
    /// Keep only frequencies with `|k| <= kept_modes` on every axis; `None`
    /// keeps all of them.
    #[serde(default)]
    pub kept_modes: Option<usize>,
}

impl AfnoConfig {
    pub fn new(channels: usize, num_blocks: usize) -> Self {
        Self {
            channels,
            num_blocks,
            shrink_threshold: 0.01,
            hidden_multiplier: 1,
            kept_modes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.channels % self.num_blocks != 0 {
            return Err(Error::config(format!(
                "AFNO block count K = {} must divide the channel count C = {}",
                self.num_blocks, self.channels
            )));
        }
        if !(self.shrink_threshold >= 0.0) {
            return Err(Error::config(format!(
                "shrink threshold must be >= 0, got {}",
                self.shrink_threshold
            )));
        }
        if self.hidden_multiplier == 0 {
            return Err(Error::config("AFNO hidden multiplier must be >= 1"));
        }
        Ok(())
    }

    pub fn block_width(&self) -> usize {
        self.channels / self.num_blocks
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_multiplier * self.block_width()
    }

    /// Real scalars in one block:
    /// `2 * [K*(C/K)*(mC/K) + K*(mC/K) + K*(mC/K)*(C/K) + K*(C/K)]`.
    pub fn param_count(&self) -> u64 {
        let k = self.num_blocks as u64;
        let bw = self.block_width() as u64;
        let hw = self.hidden_width() as u64;
        2 * (k * bw * hw + k * hw + k * hw * bw + k * bw)
    }

    /// Parameters of a dense `C x C` complex two-layer MLP with the same
    /// hidden multiplier (the `K = 1` case).
    pub fn dense_param_count(&self) -> u64 {
        Self {
            num_blocks: 1,
            ..self.clone()
        }
        .param_count()
    }
}

/// Per-block complex MLP weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AfnoWeights<T> {
    /// `(K, C/K, mC/K)`
    pub w1: ComplexTensor<T>,
    /// `(K, mC/K)`
    pub b1: ComplexTensor<T>,
    /// `(K, mC/K, C/K)`
    pub w2: ComplexTensor<T>,
    /// `(K, C/K)`
    pub b2: ComplexTensor<T>,
}

impl<T: Scalar> AfnoWeights<T> {
    pub fn shapes(cfg: &AfnoConfig) -> [Vec<usize>; 4] {
        let (k, bw, hw) = (cfg.num_blocks, cfg.block_width(), cfg.hidden_width());
        [vec![k, bw, hw], vec![k, hw], vec![k, hw, bw], vec![k, bw]]
    }

    pub fn zeros(cfg: &AfnoConfig) -> Self {
        let [s1, sb1, s2, sb2] = Self::shapes(cfg);
        Self {
            w1: ComplexTensor::zeros(&s1),
            b1: ComplexTensor::zeros(&sb1),
            w2: ComplexTensor::zeros(&s2),
            b2: ComplexTensor::zeros(&sb2),
        }
    }

    pub fn tensors(&self) -> [&ComplexTensor<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn check(&self, cfg: &AfnoConfig) -> Result<()> {
        for (t, s) in self.tensors().iter().zip(Self::shapes(cfg)) {
            if t.shape() != s.as_slice() {
                return Err(Error::config(format!(
                    "AFNO weight has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Real scalars stored, counting two per complex entry.
    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| 2 * t.numel() as u64).sum()
    }
}

/// `(B, D, H, Wf, C)` to `(B, D, H, Wf, K, C/K)`; channels are innermost, so
/// this is a pure reshape.
pub fn partition_blocks<T: Scalar>(spectrum: &ComplexTensor<T>, k: usize) -> Result<ComplexTensor<T>> {
    let d = spectrum.dims5()?;
    if k == 0 || d.c % k != 0 {
        return Err(Error::config(format!(
            "cannot partition C = {} channels into K = {k} blocks",
            d.c
        )));
    }
    spectrum.clone().reshape(&[d.b, d.d, d.h, d.w, k, d.c / k])
}

pub fn merge_blocks<T: Scalar>(blocked: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    match blocked.shape() {
        &[b, d, h, w, k, bw] => blocked.clone().reshape(&[b, d, h, w, k * bw]),
        s => Err(Error::config(format!("expected a 6-axis blocked spectrum, got {s:?}"))),
    }
}

#[inline]
fn relu_split<T: Scalar>(z: Complex<T>) -> Complex<T> {
    Complex::new(z.re.max(T::zero()), z.im.max(T::zero()))
}

/// Applies `W2 * relu(W1 * x + b1) + b2` per block at every position and
/// also returns the pre-activations `W1 * x + b1`.
fn block_mlp_cached<T: Scalar>(
    blocked: &ComplexTensor<T>,
    weights: &AfnoWeights<T>,
) -> Result<(ComplexTensor<T>, Vec<Complex<T>>)> {
    let shape = blocked.shape();
    if shape.len() != 6 {
        return Err(Error::config(format!("expected a 6-axis blocked spectrum, got {shape:?}")));
    }
    let (k, bw) = (shape[4], shape[5]);
    let w1s = weights.w1.shape();
    if w1s.len() != 3 || w1s[0] != k || w1s[1] != bw {
        return Err(Error::config(format!(
            "block MLP weights {:?} do not match block layout (K = {k}, C/K = {bw})",
            w1s
        )));
    }
    let hw = w1s[2];
    if weights.w2.shape() != [k, hw, bw] || weights.b1.shape() != [k, hw] || weights.b2.shape() != [k, bw] {
        return Err(Error::config("inconsistent block MLP weight shapes".to_string()));
    }
    let positions = blocked.numel() / (k * bw);
    let x = blocked.data();
    let (w1, b1, w2, b2) = (
        weights.w1.data(),
        weights.b1.data(),
        weights.w2.data(),
        weights.b2.data(),
    );
    let zero = Complex::new(T::zero(), T::zero());
    let mut y = vec![zero; positions * k * bw];
    let mut u = vec![zero; positions * k * hw];
    y.par_chunks_mut(k * bw)
        .zip(u.par_chunks_mut(k * hw))
        .enumerate()
        .for_each(|(p, (yp, up))| {
            let mut hidden = vec![zero; hw];
            for i in 0..k {
                let xb = &x[(p * k + i) * bw..(p * k + i + 1) * bw];
                let ub = &mut up[i * hw..(i + 1) * hw];
                ub.copy_from_slice(&b1[i * hw..(i + 1) * hw]);
                for (a, &xa) in xb.iter().enumerate() {
                    let row = &w1[(i * bw + a) * hw..(i * bw + a + 1) * hw];
                    for (uj, &wv) in ub.iter_mut().zip(row) {
                        *uj += xa * wv;
                    }
                }
                for (h, &uj) in hidden.iter_mut().zip(ub.iter()) {
                    *h = relu_split(uj);
                }
                let yb = &mut yp[i * bw..(i + 1) * bw];
                yb.copy_from_slice(&b2[i * bw..(i + 1) * bw]);
                for (j, &hj) in hidden.iter().enumerate() {
                    let row = &w2[(i * hw + j) * bw..(i * hw + j + 1) * bw];
                    for (yo, &wv) in yb.iter_mut().zip(row) {
                        *yo += hj * wv;
                    }
                }
            }
        });
    Ok((Tensor::new(shape.to_vec(), y)?, u))
}

pub fn block_mlp<T: Scalar>(blocked: &ComplexTensor<T>, weights: &AfnoWeights<T>) -> Result<ComplexTensor<T>> {
    Ok(block_mlp_cached(blocked, weights)?.0)
}

#[inline]
fn shrink_component<T: Scalar>(v: T, lambda: T) -> T {
    let m = v.abs() - lambda;
    if m > T::zero() {
        m.copysign(v)
    } else {
        T::zero()
    }
}

/// `sign(v) * max(|v| - lambda, 0)` on real and imaginary parts separately.
pub fn soft_shrink<T: Scalar>(spectrum: &ComplexTensor<T>, lambda: T) -> ComplexTensor<T> {
    spectrum.map(|z| Complex::new(shrink_component(z.re, lambda), shrink_component(z.im, lambda)))
}

fn mode_kept(k: usize, n: usize, limit: usize) -> bool {
    k.min(n - k) <= limit
}

/// Zeroes every bin of a `(B, D, H, Wf, C)` spectrum outside the kept band.
pub fn truncate_modes<T: Scalar>(spectrum: &mut ComplexTensor<T>, dims: [usize; 3], limit: usize) {
    let s = spectrum.dims5().expect("5-axis spectrum");
    let c = s.c;
    for (i, row) in spectrum.data_mut().chunks_exact_mut(c).enumerate() {
        let kw = i % s.w;
        let kh = (i / s.w) % s.h;
        let kd = (i / (s.w * s.h)) % s.d;
        if !(mode_kept(kd, dims[0], limit) && mode_kept(kh, dims[1], limit) && kw <= limit) {
            row.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
        }
    }
}

/// Intermediates of a forward pass needed by [`afno3d_backward`].
#[derive(Clone, Debug)]
pub struct AfnoCache<T> {
    plan: FftPlan3<T>,
    spectrum: ComplexTensor<T>,
    pre_activation: Vec<Complex<T>>,
    pre_shrink: ComplexTensor<T>,
}

pub fn afno3d_forward<T: Scalar>(x: &Tensor<T>, cfg: &AfnoConfig, weights: &AfnoWeights<T>) -> Result<Tensor<T>> {
    Ok(afno3d_forward_cached(x, cfg, weights)?.0)
}

pub fn afno3d_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    cfg: &AfnoConfig,
    weights: &AfnoWeights<T>,
) -> Result<(Tensor<T>, AfnoCache<T>)> {
    cfg.validate()?;
    weights.check(cfg)?;
    let dims = x.dims5()?;
    if dims.c != cfg.channels {
        return Err(Error::config(format!(
            "AFNO block configured for {} channels, input has {}",
            cfg.channels, dims.c
        )));
    }
    let plan = FftPlan3::new(dims.spatial())?;
    let spectrum = plan.forward(x)?;
    let blocked = partition_blocks(&spectrum, cfg.num_blocks)?;
    let (mixed, pre_activation) = block_mlp_cached(&blocked, weights)?;
    let mut merged = merge_blocks(&mixed)?;
    if let Some(limit) = cfg.kept_modes {
        truncate_modes(&mut merged, dims.spatial(), limit);
    }
    let shrunk = soft_shrink(&merged, T::lit(cfg.shrink_threshold));
    let out = plan.inverse(&shrunk)?.add(x)?;
    Ok((
        out,
        AfnoCache {
            plan,
            spectrum,
            pre_activation,
            pre_shrink: merged,
        },
    ))
}

pub struct AfnoGrads<T> {
    pub input: Tensor<T>,
    pub weights: AfnoWeights<T>,
}

/// Reverse-mode gradient of an AFNO block. Complex gradients follow the
/// convention `dL/dRe + i dL/dIm`; soft-shrink passes no gradient at or
/// below the threshold.
pub fn afno3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cfg: &AfnoConfig,
    weights: &AfnoWeights<T>,
    cache: &AfnoCache<T>,
) -> Result<AfnoGrads<T>> {
    let lambda = T::lit(cfg.shrink_threshold);
    let mut g_spec = irfft3_adjoint(&cache.plan, grad_out)?;
    for (g, y) in g_spec.data_mut().iter_mut().zip(cache.pre_shrink.data()) {
        if y.re.abs() <= lambda {
            g.re = T::zero();
        }
        if y.im.abs() <= lambda {
            g.im = T::zero();
        }
    }
    if let Some(limit) = cfg.kept_modes {
        truncate_modes(&mut g_spec, cache.plan.dims(), limit);
    }

    let (k, bw, hw) = (cfg.num_blocks, cfg.block_width(), cfg.hidden_width());
    let sd = g_spec.dims5()?;
    let rows = sd.b * sd.d;
    let per_row = sd.h * sd.w;
    let x = cache.spectrum.data();
    let gy = g_spec.data();
    let u = &cache.pre_activation;
    let (w1, w2) = (weights.w1.data(), weights.w2.data());
    let zero = Complex::new(T::zero(), T::zero());

    struct Partial<T> {
        w1: Vec<Complex<T>>,
        b1: Vec<Complex<T>>,
        w2: Vec<Complex<T>>,
        b2: Vec<Complex<T>>,
        gx: Vec<Complex<T>>,
    }

    let partials: Vec<Partial<T>> = (0..rows)
        .into_par_iter()
        .map(|row| {
            let mut part = Partial {
                w1: vec![zero; k * bw * hw],
                b1: vec![zero; k * hw],
                w2: vec![zero; k * hw * bw],
                b2: vec![zero; k * bw],
                gx: vec![zero; per_row * k * bw],
            };
            let mut h = vec![zero; hw];
            let mut gu = vec![zero; hw];
            for q in 0..per_row {
                let p = row * per_row + q;
                for i in 0..k {
                    let ub = &u[(p * k + i) * hw..(p * k + i + 1) * hw];
                    let gyb = &gy[(p * k + i) * bw..(p * k + i + 1) * bw];
                    let xb = &x[(p * k + i) * bw..(p * k + i + 1) * bw];
                    for (hj, &uj) in h.iter_mut().zip(ub) {
                        *hj = relu_split(uj);
                    }
                    for (o, &g) in gyb.iter().enumerate() {
                        part.b2[i * bw + o] += g;
                    }
                    for j in 0..hw {
                        let w2row = &w2[(i * hw + j) * bw..(i * hw + j + 1) * bw];
                        let gw2row = &mut part.w2[(i * hw + j) * bw..(i * hw + j + 1) * bw];
                        let hc = h[j].conj();
                        let mut gh = zero;
                        for o in 0..bw {
                            gw2row[o] += hc * gyb[o];
                            gh += gyb[o] * w2row[o].conj();
                        }
                        let uj = ub[j];
                        gu[j] = Complex::new(
                            if uj.re > T::zero() { gh.re } else { T::zero() },
                            if uj.im > T::zero() { gh.im } else { T::zero() },
                        );
                        part.b1[i * hw + j] += gu[j];
                    }
                    let gxb = &mut part.gx[(q * k + i) * bw..(q * k + i + 1) * bw];
                    for a in 0..bw {
                        let w1row = &w1[(i * bw + a) * hw..(i * bw + a + 1) * hw];
                        let gw1row = &mut part.w1[(i * bw + a) * hw..(i * bw + a + 1) * hw];
                        let xc = xb[a].conj();
                        let mut gxa = zero;
                        for j in 0..hw {
                            gw1row[j] += xc * gu[j];
                            gxa += gu[j] * w1row[j].conj();
                        }
                        gxb[a] = gxa;
                    }
                }
            }
            part
        })
        .collect();

    let mut grads = AfnoWeights::<T>::zeros(cfg);
    let mut g_x_spec = Vec::with_capacity(rows * per_row * k * bw);
    for part in partials {
        for (acc, v) in [
            (grads.w1.data_mut(), &part.w1),
            (grads.b1.data_mut(), &part.b1),
            (grads.w2.data_mut(), &part.w2),
            (grads.b2.data_mut(), &part.b2),
        ] {
            for (a, &b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        }
        g_x_spec.extend_from_slice(&part.gx);
    }
    let g_x_spec = Tensor::new(cache.spectrum.shape().to_vec(), g_x_spec)?;
    let mut input = rfft3_adjoint(&cache.plan, &g_x_spec)?;
    input.add_assign(grad_out)?;
    Ok(AfnoGrads { input, weights: grads })
}

/// Projection weights of a multi-head self-attention block; every matrix is
/// `(C, C)` and applied as `x * W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Vec<T>,
    pub wk: Tensor<T>,
    pub bk: Vec<T>,
    pub wv: Tensor<T>,
    pub bv: Vec<T>,
    pub wo: Tensor<T>,
    pub bo: Vec<T>,
}

impl<T: Scalar> MhsaWeights<T> {
    pub fn zeros(c: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[c, c]),
            bq: vec![T::zero(); c],
            wk: Tensor::zeros(&[c, c]),
            bk: vec![T::zero(); c],
            wv: Tensor::zeros(&[c, c]),
            bv: vec![T::zero(); c],
            wo: Tensor::zeros(&[c, c]),
            bo: vec![T::zero(); c],
        }
    }

    pub fn param_count(&self) -> u64 {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .map(|t| t.numel() as u64)
            .sum::<u64>()
            + [&self.bq, &self.bk, &self.bv, &self.bo]
                .iter()
                .map(|b| b.len() as u64)
                .sum::<u64>()
    }
}

/// `4 C^2 + 4 C`: query, key, value and output projections with biases.
pub fn mhsa_param_count(c: usize) -> u64 {
    let c = c as u64;
    4 * c * c + 4 * c
}

#[derive(Clone, Debug)]
pub struct MhsaCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// `(B, heads, L, L)` row-stochastic attention weights.
    attn: Vec<T>,
    mixed: Tensor<T>,
}

fn mhsa_shapes<T: Scalar>(x: &Tensor<T>, heads: usize, max_tokens: usize) -> Result<(usize, usize, usize)> {
    let d = x.dims5()?;
    if heads == 0 || d.c % heads != 0 {
        return Err(Error::config(format!(
            "attention heads = {heads} must divide channels C = {}",
            d.c
        )));
    }
    let l = d.voxels();
    if l > max_tokens {
        return Err(Error::config(format!(
            "attention over {l} tokens exceeds the configured cap of {max_tokens}"
        )));
    }
    Ok((d.b, l, d.c))
}

/// Scaled dot-product attention over the flattened `D*H*W` token sequence,
/// followed by the output projection. No residual is added here.
pub fn mhsa_forward<T: Scalar>(
    x: &Tensor<T>,
    heads: usize,
    weights: &MhsaWeights<T>,
    max_tokens: usize,
) -> Result<Tensor<T>> {
    Ok(mhsa_forward_cached(x, heads, weights, max_tokens)?.0)
}

pub fn mhsa_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    heads: usize,
    weights: &MhsaWeights<T>,
    max_tokens: usize,
) -> Result<(Tensor<T>, MhsaCache<T>)> {
    let (b, l, c) = mhsa_shapes(x, heads, max_tokens)?;
    let q = linear(x, &weights.wq, Some(&weights.bq))?;
    let k = linear(x, &weights.wk, Some(&weights.bk))?;
    let v = linear(x, &weights.wv, Some(&weights.bv))?;
    let dh = c / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let (qs, ks, vs) = (q.data(), k.data(), v.data());

    let per_head: Vec<(Vec<T>, Vec<T>)> = (0..b * heads)
        .into_par_iter()
        .map(|bh| {
            let (bi, h) = (bh / heads, bh % heads);
            let tok = |t: usize| (bi * l + t) * c + h * dh;
            let mut scores = Tensor::<T>::zeros(&[l, l]);
            for i in 0..l {
                let qi = &qs[tok(i)..tok(i) + dh];
                let row = &mut scores.data_mut()[i * l..(i + 1) * l];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &ks[tok(j)..tok(j) + dh];
                    *s = qi.iter().zip(kj).map(|(&a, &bb)| a * bb).sum::<T>() * scale;
                }
            }
            let attn = softmax_channels(&scores).into_data();
            let mut out = vec![T::zero(); l * dh];
            for i in 0..l {
                let o = &mut out[i * dh..(i + 1) * dh];
                for j in 0..l {
                    let a = attn[i * l + j];
                    for (ov, &vv) in o.iter_mut().zip(&vs[tok(j)..tok(j) + dh]) {
                        *ov += a * vv;
                    }
                }
            }
            (attn, out)
        })
        .collect();

    let mut attn = Vec::with_capacity(b * heads * l * l);
    let mut mixed = Tensor::<T>::zeros(x.shape());
    for (bh, (a, o)) in per_head.into_iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        attn.extend_from_slice(&a);
        for i in 0..l {
            let dst = (bi * l + i) * c + h * dh;
            mixed.data_mut()[dst..dst + dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
        }
    }
    let out = linear(&mixed, &weights.wo, Some(&weights.bo))?;
    Ok((
        out,
        MhsaCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            mixed,
        },
    ))
}

pub struct MhsaGrads<T> {
    pub input: Tensor<T>,
    pub weights: MhsaWeights<T>,
}

pub fn mhsa_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    heads: usize,
    weights: &MhsaWeights<T>,
    cache: &MhsaCache<T>,
) -> Result<MhsaGrads<T>> {
    let d = cache.x.dims5()?;
    let (b, l, c) = (d.b, d.voxels(), d.c);
    let dh = c / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let out_grads = linear_backward(&cache.mixed, &weights.wo, grad_out)?;
    let gm = out_grads.input.data();
    let (qs, ks, vs) = (cache.q.data(), cache.k.data(), cache.v.data());

    let per_head: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..b * heads)
        .into_par_iter()
        .map(|bh| {
            let (bi, h) = (bh / heads, bh % heads);
            let tok = |t: usize| (bi * l + t) * c + h * dh;
            let attn = &cache.attn[bh * l * l..(bh + 1) * l * l];
            let mut gq = vec![T::zero(); l * dh];
            let mut gk = vec![T::zero(); l * dh];
            let mut gv = vec![T::zero(); l * dh];
            let mut ga = vec![T::zero(); l];
            for i in 0..l {
                let go = &gm[tok(i)..tok(i) + dh];
                let arow = &attn[i * l..(i + 1) * l];
                for j in 0..l {
                    let vj = &vs[tok(j)..tok(j) + dh];
                    ga[j] = go.iter().zip(vj).map(|(&a, &bb)| a * bb).sum();
                    for (g, &o) in gv[j * dh..(j + 1) * dh].iter_mut().zip(go) {
                        *g += arow[j] * o;
                    }
                }
                let dot: T = ga.iter().zip(arow).map(|(&g, &a)| g * a).sum();
                let qi = &qs[tok(i)..tok(i) + dh];
                for j in 0..l {
                    let gs = arow[j] * (ga[j] - dot) * scale;
                    let kj = &ks[tok(j)..tok(j) + dh];
                    for t in 0..dh {
                        gq[i * dh + t] += gs * kj[t];
                        gk[j * dh + t] += gs * qi[t];
                    }
                }
            }
            (gq, gk, gv)
        })
        .collect();

    let mut gq = Tensor::<T>::zeros(cache.x.shape());
    let mut gk = Tensor::<T>::zeros(cache.x.shape());
    let mut gv = Tensor::<T>::zeros(cache.x.shape());
    for (bh, (q, k, v)) in per_head.into_iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        for i in 0..l {
            let dst = (bi * l + i) * c + h * dh;
            gq.data_mut()[dst..dst + dh].copy_from_slice(&q[i * dh..(i + 1) * dh]);
            gk.data_mut()[dst..dst + dh].copy_from_slice(&k[i * dh..(i + 1) * dh]);
            gv.data_mut()[dst..dst + dh].copy_from_slice(&v[i * dh..(i + 1) * dh]);
        }
    }
    let q_grads = linear_backward(&cache.x, &weights.wq, &gq)?;
    let k_grads = linear_backward(&cache.x, &weights.wk, &gk)?;
    let v_grads = linear_backward(&cache.x, &weights.wv, &gv)?;
    let mut input = q_grads.input;
    input.add_assign(&k_grads.input)?;
    input.add_assign(&v_grads.input)?;
    Ok(MhsaGrads {
        input,
        weights: MhsaWeights {
            wq: q_grads.weight,
            bq: q_grads.bias,
            wk: k_grads.weight,
            bk: k_grads.bias,
            wv: v_grads.weight,
            bv: v_grads.bias,
            wo: out_grads.weight,
            bo: out_grads.bias,
        },
    })
}
