//! Tape-based reverse-mode differentiation over the network's fixed operator
//! set. Nodes are appended in evaluation order, so walking the tape backwards
//! is a valid topological order.

use std::collections::HashMap;

use crate::afno::{afno3d_backward, afno3d_forward_cached, AfnoCache, AfnoConfig, AfnoWeights};
use crate::afno::{mhsa_backward, mhsa_forward_cached, MhsaCache, MhsaWeights};
use crate::error::{Error, Result};
use crate::ops::activation::{gelu, gelu_grad_scalar, relu};
use crate::ops::conv::{
    conv3d, conv3d_backward, conv3d_transposed_to, conv3d_transposed_to_backward, ConvSpec,
};
use crate::ops::linear::{linear, linear_backward};
use crate::ops::norm::{
    batch_norm3d, batch_norm3d_backward, layer_norm_backward, layer_norm_cached, BatchNormStats,
    NormCache,
};
use crate::ops::upsample::{upsample_trilinear, upsample_trilinear_backward};
use crate::scalar::Scalar;
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Stored as `(re, im)` pairs along a trailing axis of length 2.
    pub complex: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, complex: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, tensor, complex });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|i| &mut self.entries[i].tensor)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.entries[id].tensor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stored real scalars; complex entries count twice by construction.
    pub fn param_count(&self) -> u64 {
        self.entries.iter().map(|e| e.tensor.numel() as u64).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTransposed {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        cache: NormCache<T>,
    },
    BatchNorm {
        x: Var,
        g: Var,
        b: Var,
        cache: NormCache<T>,
        training: bool,
    },
    Gelu(Var),
    Relu(Var),
    Add(Var, Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Afno {
        x: Var,
        params: [Var; 4],
        cfg: AfnoConfig,
        weights: Box<AfnoWeights<T>>,
        cache: Box<AfnoCache<T>>,
    },
    Mhsa {
        x: Var,
        params: [Var; 8],
        heads: usize,
        weights: Box<MhsaWeights<T>>,
        cache: Box<MhsaCache<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A recorded forward pass. Parameter values are borrowed from the store.
pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, Var>,
}

fn complex_param<T: Scalar>(t: &Tensor<T>) -> Result<ComplexTensor<T>> {
    ComplexTensor::from_real_pairs(t)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let v = self.push(self.params.tensor(id).clone(), Op::Param);
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    fn data(&self, v: Option<Var>) -> Option<&[T]> {
        v.map(|v| self.value(v).data())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv3d(self.value(x), self.value(w), self.data(b), spec)?;
        Ok(self.push(y, Op::Conv { x, w, b, spec: *spec }))
    }

    pub fn conv3d_transposed_to(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: &ConvSpec,
        out: [usize; 3],
    ) -> Result<Var> {
        let y = conv3d_transposed_to(self.value(x), self.value(w), self.data(b), spec, out)?;
        Ok(self.push(y, Op::ConvTransposed { x, w, b, spec: *spec }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = linear(self.value(x), self.value(w), self.data(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: T) -> Result<Var> {
        let (y, cache) = layer_norm_cached(self.value(x), self.value(g).data(), self.value(b).data(), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, g, b, cache }))
    }

    /// Returns the batch mean and biased variance in training mode so the
    /// caller can update its running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        g: Var,
        b: Var,
        running: &BatchNormStats<T>,
        eps: T,
        training: bool,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let out = batch_norm3d(
            self.value(x),
            self.value(g).data(),
            self.value(b).data(),
            running,
            eps,
            training,
        )?;
        let v = self.push(
            out.output,
            Op::BatchNorm {
                x,
                g,
                b,
                cache: out.cache,
                training,
            },
        );
        Ok((v, out.batch_stats))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = gelu(self.value(x));
        self.push(y, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn upsample(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let y = upsample_trilinear(self.value(x), target)?;
        Ok(self.push(y, Op::Upsample(x)))
    }

    /// Concatenates volumes of equal `(B, D, H, W)` along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::config("concat of zero tensors"))?)
            .dims5()?;
        let mut total = 0;
        for &v in xs {
            let d = self.value(v).dims5()?;
            if (d.b, d.d, d.h, d.w) != (first.b, first.d, first.h, first.w) {
                return Err(Error::config(format!(
                    "channel concat needs equal (B, D, H, W), got {:?} and {:?}",
                    first.to_vec(),
                    d.to_vec()
                )));
            }
            total += d.c;
        }
        let rows = first.b * first.voxels();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[4];
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let y = Tensor::new(vec![first.b, first.d, first.h, first.w, total], data)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    /// AFNO block; `params` are `w1, b1, w2, b2` stored as real pairs.
    pub fn afno(&mut self, x: Var, params: [Var; 4], cfg: &AfnoConfig) -> Result<Var> {
        let weights = AfnoWeights {
            w1: complex_param(self.value(params[0]))?,
            b1: complex_param(self.value(params[1]))?,
            w2: complex_param(self.value(params[2]))?,
            b2: complex_param(self.value(params[3]))?,
        };
        let (y, cache) = afno3d_forward_cached(self.value(x), cfg, &weights)?;
        Ok(self.push(
            y,
            Op::Afno {
                x,
                params,
                cfg: cfg.clone(),
                weights: Box::new(weights),
                cache: Box::new(cache),
            },
        ))
    }

    /// Self-attention without residual; `params` are `wq, bq, wk, bk, wv, bv, wo, bo`.
    pub fn mhsa(&mut self, x: Var, params: [Var; 8], heads: usize, max_tokens: usize) -> Result<Var> {
        let v = |i: usize| self.value(params[i]).clone();
        let weights = MhsaWeights {
            wq: v(0),
            bq: v(1).into_data(),
            wk: v(2),
            bk: v(3).into_data(),
            wv: v(4),
            bv: v(5).into_data(),
            wo: v(6),
            bo: v(7).into_data(),
        };
        let (y, cache) = mhsa_forward_cached(self.value(x), heads, &weights, max_tokens)?;
        Ok(self.push(
            y,
            Op::Mhsa {
                x,
                params,
                heads,
                weights: Box::new(weights),
                cache: Box::new(cache),
            },
        ))
    }

    /// Propagates the given output gradients back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }
        let vec_grad = |b: Var, g: Vec<T>| -> Result<(Var, Tensor<T>)> { Ok((b, Tensor::new(vec![g.len()], g)?)) };
        for (v, g) in seeds {
            self.value(v).expect_same_shape(&g)?;
            acc(&mut grads, v, g)?;
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Conv { x, w, b, spec } => {
                    let r = conv3d_backward(self.value(*x), self.value(*w), &g, spec)?;
                    acc(&mut grads, *x, r.input)?;
                    acc(&mut grads, *w, r.weight)?;
                    if let Some(b) = b {
                        let (b, t) = vec_grad(*b, r.bias)?;
                        acc(&mut grads, b, t)?;
                    }
                }
                Op::ConvTransposed { x, w, b, spec } => {
                    let r = conv3d_transposed_to_backward(self.value(*x), self.value(*w), &g, spec)?;
                    acc(&mut grads, *x, r.input)?;
                    acc(&mut grads, *w, r.weight)?;
                    if let Some(b) = b {
                        let (b, t) = vec_grad(*b, r.bias)?;
                        acc(&mut grads, b, t)?;
                    }
                }
                Op::Linear { x, w, b } => {
                    let r = linear_backward(self.value(*x), self.value(*w), &g)?;
                    acc(&mut grads, *x, r.input)?;
                    acc(&mut grads, *w, r.weight)?;
                    if let Some(b) = b {
                        let (b, t) = vec_grad(*b, r.bias)?;
                        acc(&mut grads, b, t)?;
                    }
                }
                Op::LayerNorm { x, g: gm, b, cache } => {
                    let r = layer_norm_backward(&g, self.value(*gm).data(), cache);
                    acc(&mut grads, *x, r.input)?;
                    let (gm, t) = vec_grad(*gm, r.gamma)?;
                    acc(&mut grads, gm, t)?;
                    let (b, t) = vec_grad(*b, r.beta)?;
                    acc(&mut grads, b, t)?;
                }
                Op::BatchNorm {
                    x,
                    g: gm,
                    b,
                    cache,
                    training,
                } => {
                    let r = batch_norm3d_backward(&g, self.value(*gm).data(), cache, *training);
                    acc(&mut grads, *x, r.input)?;
                    let (gm, t) = vec_grad(*gm, r.gamma)?;
                    acc(&mut grads, gm, t)?;
                    let (b, t) = vec_grad(*b, r.beta)?;
                    acc(&mut grads, b, t)?;
                }
                Op::Gelu(x) => {
                    let gx = self.value(*x).zip_map(&g, |xv, gv| gv * gelu_grad_scalar(xv))?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Relu(x) => {
                    let gx = self
                        .value(*x)
                        .zip_map(&g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Upsample(x) => {
                    let src = self.value(*x).dims5()?.spatial();
                    acc(&mut grads, *x, upsample_trilinear_backward(&g, src))?;
                }
                Op::Concat(xs) => {
                    let gd = g.dims5()?;
                    let rows = gd.b * gd.voxels();
                    let mut offset = 0;
                    for &v in xs {
                        let shape = self.value(v).shape().to_vec();
                        let c = shape[4];
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * gd.c + offset;
                            part.extend_from_slice(&g.data()[base..base + c]);
                        }
                        offset += c;
                        acc(&mut grads, v, Tensor::new(shape, part)?)?;
                    }
                }
                Op::Afno {
                    x,
                    params,
                    cfg,
                    weights,
                    cache,
                } => {
                    let r = afno3d_backward(&g, cfg, weights, cache)?;
                    acc(&mut grads, *x, r.input)?;
                    for (p, t) in params.iter().zip(r.weights.tensors()) {
                        acc(&mut grads, *p, t.to_real_pairs())?;
                    }
                }
                Op::Mhsa {
                    x,
                    params,
                    heads,
                    weights,
                    cache,
                } => {
                    let r = mhsa_backward(&g, *heads, weights, cache)?;
                    acc(&mut grads, *x, r.input)?;
                    let w = r.weights;
                    let parts = [
                        w.wq,
                        Tensor::new(vec![w.bq.len()], w.bq)?,
                        w.wk,
                        Tensor::new(vec![w.bk.len()], w.bk)?,
                        w.wv,
                        Tensor::new(vec![w.bv.len()], w.bv)?,
                        w.wo,
                        Tensor::new(vec![w.bo.len()], w.bo)?,
                    ];
                    for (p, t) in params.iter().zip(parts) {
                        acc(&mut grads, *p, t)?;
                    }
                }
            }
        }
        let mut params = vec![None; self.params.len()];
        for (&id, &v) in &self.param_nodes {
            params[id] = grads[v.0].take();
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .filter_map(|(i, _)| grads[i].take().map(|g| (Var(i), g)))
            .collect();
        Ok(Gradients { params, leaves })
    }
}

/// Gradients of one backward pass: per parameter id and per graph input.
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter; `None` if it did not take part in the pass.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(id).and_then(|g| g.as_ref())
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    /// One gradient per stored parameter, zeros for unused ones.
    pub fn into_dense(self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.params
            .into_iter()
            .zip(store.entries())
            .map(|(g, e)| g.unwrap_or_else(|| Tensor::zeros(e.tensor.shape())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn scalar_square_gradient() {
        // d (w x)^2 / dw = 2 w x^2
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1, 1], vec![1.5]).unwrap(), false).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 1, 1, 1, 1], vec![2.0]).unwrap());
        let w = g.param("w").unwrap();
        let y = g.linear(x, w, None).unwrap();
        let yv = g.value(y).data()[0];
        let seed = Tensor::new(vec![1, 1, 1, 1, 1], vec![2.0 * yv]).unwrap();
        let grads = g.backward(vec![(y, seed)]).unwrap();
        assert_eq!(grads.param(0).unwrap().data()[0], 2.0 * 1.5 * 4.0);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap(), false).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 1, 1, 1, 1], vec![2.0]).unwrap());
        let w = g.param("w").unwrap();
        let y1 = g.linear(x, w, None).unwrap();
        let w2 = g.param("w").unwrap();
        assert_eq!(w, w2);
        let y2 = g.linear(y1, w2, None).unwrap();
        // y2 = w^2 x; dy2/dw = 2 w x = 12
        let grads = g.backward(vec![(y2, Tensor::ones(&[1, 1, 1, 1, 1]))]).unwrap();
        assert_eq!(grads.param(0).unwrap().data()[0], 12.0);
        assert_eq!(grads.input(x).unwrap().data()[0], 9.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::zeros(&[1]), false).unwrap();
        assert!(store.insert("a", Tensor::zeros(&[1]), false).is_err());
    }

    #[test]
    fn concat_and_upsample_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&[1, 2, 2, 2, 2], &mut rng);
        let b = rand_t(&[1, 2, 2, 2, 3], &mut rng);
        let probe = rand_t(&[1, 4, 4, 4, 5], &mut rng);
        let store = ParamStore::new();
        let f = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut g = Graph::new(&store);
            let va = g.input(a.clone());
            let vb = g.input(b.clone());
            let c = g.concat_channels(&[va, vb]).unwrap();
            let u = g.upsample(c, [4, 4, 4]).unwrap();
            let r = g.gelu(u);
            (g.value(r).dot(&probe).unwrap(), g, va, vb, r)
        };
        let (_, g, va, vb, r) = f(&a, &b);
        let grads = g.backward(vec![(r, probe.clone())]).unwrap();
        let h = 1e-6;
        for i in 0..a.numel() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[i] += h;
            am.data_mut()[i] -= h;
            let fd = (f(&ap, &b).0 - f(&am, &b).0) / (2.0 * h);
            assert!((fd - grads.input(va).unwrap().data()[i]).abs() < 1e-7);
        }
        for i in 0..b.numel() {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp.data_mut()[i] += h;
            bm.data_mut()[i] -= h;
            let fd = (f(&a, &bp).0 - f(&a, &bm).0) / (2.0 * h);
            assert!((fd - grads.input(vb).unwrap().data()[i]).abs() < 1e-7);
        }
    }
}
