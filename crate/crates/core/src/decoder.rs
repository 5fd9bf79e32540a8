//! All-MLP decoder: project every stage to a common width, upsample to the
//! finest stage, concatenate, fuse with a pointwise convolution, then a
//! transposed convolution back to the input grid and a pointwise classifier.
//! Auxiliary heads classify the projected features of each stage at that
//! stage's own resolution for deep supervision.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::model::{Init, ParamSpec};
use crate::ops::conv::ConvSpec;
use crate::ops::norm::BatchNormStats;
use crate::scalar::Scalar;

pub const FUSE_BN: &str = "decoder.fuse_bn";

pub struct DecoderOutput<T> {
    /// Logits at the input resolution, `N_cls` channels.
    pub logits: Var,
    /// One logit volume per stage, finest first.
    pub aux: Vec<Var>,
    /// Batch mean and variance of the fuse norm (training mode only).
    pub bn_stats: Option<(Vec<T>, Vec<T>)>,
}

pub fn fuse_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::pointwise(cfg.num_stages() * cfg.decoder_dim, cfg.decoder_dim)
}

pub fn head_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::pointwise(cfg.num_classes, cfg.num_classes)
}

pub fn aux_spec(cfg: &ModelConfig) -> ConvSpec {
    ConvSpec::pointwise(cfg.decoder_dim, cfg.num_classes)
}

fn push_conv(out: &mut Vec<ParamSpec>, prefix: &str, spec: &ConvSpec) {
    let fan_in = spec.kernel_volume() * spec.in_channels / spec.groups;
    out.push(ParamSpec::new(format!("{prefix}.weight"), spec.weight_shape(), Init::Kaiming(fan_in)));
    out.push(ParamSpec::new(format!("{prefix}.bias"), vec![spec.out_channels], Init::Zeros));
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.decoder_dim;
    let mut out = Vec::new();
    for (i, &c) in cfg.dims.iter().enumerate() {
        out.push(ParamSpec::new(format!("decoder.proj{i}.weight"), vec![c, d], Init::TruncNormal));
        out.push(ParamSpec::new(format!("decoder.proj{i}.bias"), vec![d], Init::Zeros));
    }
    push_conv(&mut out, "decoder.fuse", &fuse_spec(cfg));
    out.push(ParamSpec::new(format!("{FUSE_BN}.gamma"), vec![d], Init::Ones));
    out.push(ParamSpec::new(format!("{FUSE_BN}.beta"), vec![d], Init::Zeros));
    let up = cfg.upsample_spec();
    let fan_in = up.kernel_volume() * up.in_channels;
    out.push(ParamSpec::new("decoder.up.weight", up.transposed_weight_shape(), Init::Kaiming(fan_in)));
    out.push(ParamSpec::new("decoder.up.bias", vec![up.out_channels], Init::Zeros));
    push_conv(&mut out, "decoder.head", &head_spec(cfg));
    for i in 0..cfg.num_stages() {
        push_conv(&mut out, &format!("decoder.aux{i}"), &aux_spec(cfg));
    }
    out
}

/// Non-trainable state: running statistics of the fuse norm.
pub fn buffer_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.decoder_dim;
    vec![
        ParamSpec::new(format!("{FUSE_BN}.running_mean"), vec![d], Init::Zeros),
        ParamSpec::new(format!("{FUSE_BN}.running_var"), vec![d], Init::Ones),
    ]
}

fn pw<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str, spec: &ConvSpec) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.conv3d(x, w, Some(b), spec)
}

pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    features: &[Var],
    cfg: &ModelConfig,
    input_spatial: [usize; 3],
    running: &BatchNormStats<T>,
    training: bool,
) -> Result<DecoderOutput<T>> {
    if features.len() != cfg.num_stages() {
        return Err(Error::input(format!(
            "decoder expects {} feature volumes, got {}",
            cfg.num_stages(),
            features.len()
        )));
    }
    let finest = g.value(features[0]).dims5()?.spatial();
    let mut projected = Vec::with_capacity(features.len());
    for (i, &f) in features.iter().enumerate() {
        let w = g.param(&format!("decoder.proj{i}.weight"))?;
        let b = g.param(&format!("decoder.proj{i}.bias"))?;
        projected.push(g.linear(f, w, Some(b))?);
    }
    let mut upsampled = Vec::with_capacity(projected.len());
    for &p in &projected {
        upsampled.push(g.upsample(p, finest)?);
    }
    let cat = g.concat_channels(&upsampled)?;
    let fused = pw(g, cat, "decoder.fuse", &fuse_spec(cfg))?;
    let fused = g.relu(fused);
    let gamma = g.param(&format!("{FUSE_BN}.gamma"))?;
    let beta = g.param(&format!("{FUSE_BN}.beta"))?;
    let (fused, bn_stats) = g.batch_norm(fused, gamma, beta, running, T::lit(cfg.norm_eps), training)?;
    let uw = g.param("decoder.up.weight")?;
    let ub = g.param("decoder.up.bias")?;
    let up = g.conv3d_transposed_to(fused, uw, Some(ub), &cfg.upsample_spec(), input_spatial)?;
    let logits = pw(g, up, "decoder.head", &head_spec(cfg))?;
    let aux = aux_heads(g, &projected, cfg)?;
    Ok(DecoderOutput { logits, aux, bn_stats })
}

/// Pointwise classifiers on the projected stage features.
pub fn aux_heads<T: Scalar>(g: &mut Graph<'_, T>, projected: &[Var], cfg: &ModelConfig) -> Result<Vec<Var>> {
    projected
        .iter()
        .enumerate()
        .map(|(i, &p)| pw(g, p, &format!("decoder.aux{i}"), &aux_spec(cfg)))
        .collect()
}

/// Nearest-neighbour label resampling: output voxel `o` reads source
/// `floor(o * in / out)` on every axis.
pub fn downsample_labels(mask: &LabelMask, target: [usize; 3]) -> Result<LabelMask> {
    let src = mask.shape();
    if target.iter().any(|&t| t == 0) {
        return Err(Error::input(format!("cannot resample labels to {target:?}")));
    }
    let idx = |o: usize, a: usize| o * src[a] / target[a];
    let mut data = Vec::with_capacity(target.iter().product());
    for z in 0..target[0] {
        for y in 0..target[1] {
            for x in 0..target[2] {
                let (sz, sy, sx) = (idx(z, 0), idx(y, 1), idx(x, 2));
                data.push(mask.data()[(sz * src[1] + sy) * src[2] + sx]);
            }
        }
    }
    LabelMask::new(target, data, mask.num_classes())
}
