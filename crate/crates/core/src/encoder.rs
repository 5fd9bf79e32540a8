//! Hierarchical encoder: every stage is an overlapped patch merge (strided
//! convolution plus layer norm) followed by `depth` blocks of
//! `layer_norm -> token mixer -> layer_norm -> Mix-FFN`.
//!
//! Both the AFNO mixer and Mix-FFN carry their own residual connection, so
//! the MHSA baseline is wrapped as `x + attention(x)` to keep the block shape
//! identical across the two mixers.

use crate::autograd::{Graph, Var};
use crate::config::{Mixing, ModelConfig, StageConfig};
use crate::error::Result;
use crate::model::{Init, ParamSpec};
use crate::ops::conv::ConvSpec;
use crate::scalar::Scalar;

/// One feature volume per stage, finest first.
pub struct EncoderOutput {
    pub features: Vec<Var>,
}

pub fn stage_prefix(i: usize) -> String {
    format!("encoder.stage{i}")
}

pub fn block_prefix(i: usize, j: usize) -> String {
    format!("encoder.stage{i}.block{j}")
}

pub const AFNO_PARAMS: [&str; 4] = ["w1", "b1", "w2", "b2"];
pub const MHSA_PARAMS: [&str; 8] = [
    "q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "o.weight", "o.bias",
];

fn push_norm(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec::new(format!("{prefix}.gamma"), vec![c], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.beta"), vec![c], Init::Zeros));
}

fn push_linear(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), vec![cin, cout], Init::TruncNormal));
    out.push(ParamSpec::new(format!("{prefix}.bias"), vec![cout], Init::Zeros));
}

fn push_conv(out: &mut Vec<ParamSpec>, prefix: &str, spec: &ConvSpec) {
    let fan_in = spec.kernel_volume() * spec.in_channels / spec.groups;
    out.push(ParamSpec::new(format!("{prefix}.weight"), spec.weight_shape(), Init::Kaiming(fan_in)));
    out.push(ParamSpec::new(format!("{prefix}.bias"), vec![spec.out_channels], Init::Zeros));
}

pub fn dwconv_spec(channels: usize) -> ConvSpec {
    ConvSpec::depthwise(3, 1, channels)
}

/// Token-mixer parameters of one block.
pub fn mixer_param_specs(prefix: &str, stage: &StageConfig, mixing: Mixing) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let p = format!("{prefix}.mixer");
    match mixing {
        Mixing::Afno => {
            let (k, bw, hw) = (stage.afno.num_blocks, stage.afno.block_width(), stage.afno.hidden_width());
            let shapes = [vec![k, bw, hw, 2], vec![k, hw, 2], vec![k, hw, bw, 2], vec![k, bw, 2]];
            for (name, shape) in AFNO_PARAMS.iter().zip(shapes) {
                let init = if name.starts_with('w') { Init::TruncNormal } else { Init::Zeros };
                out.push(ParamSpec::new(format!("{p}.{name}"), shape, init).complex());
            }
        }
        Mixing::Mhsa => {
            let c = stage.embed_dim;
            for proj in ["q", "k", "v", "o"] {
                push_linear(&mut out, &format!("{p}.{proj}"), c, c);
            }
        }
    }
    out
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for (i, stage) in cfg.stages().iter().enumerate() {
        let sp = stage_prefix(i);
        push_conv(&mut out, &format!("{sp}.patch"), &stage.patch_merge);
        push_norm(&mut out, &format!("{sp}.patch_norm"), stage.embed_dim);
        let c = stage.embed_dim;
        let hidden = c * stage.ffn_expansion;
        for j in 0..stage.depth {
            let bp = block_prefix(i, j);
            push_norm(&mut out, &format!("{bp}.norm1"), c);
            out.extend(mixer_param_specs(&bp, stage, cfg.mixing));
            push_norm(&mut out, &format!("{bp}.norm2"), c);
            push_linear(&mut out, &format!("{bp}.ffn.fc1"), c, hidden);
            push_conv(&mut out, &format!("{bp}.ffn.dwconv"), &dwconv_spec(hidden));
            push_linear(&mut out, &format!("{bp}.ffn.fc2"), hidden, c);
        }
    }
    out
}

fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str, eps: T) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

fn conv<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str, spec: &ConvSpec) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.conv3d(x, w, Some(b), spec)
}

/// Strided convolution lifting to the stage width, then layer norm.
pub fn patch_merge<T: Scalar>(g: &mut Graph<'_, T>, x: Var, i: usize, stage: &StageConfig, eps: T) -> Result<Var> {
    let sp = stage_prefix(i);
    let y = conv(g, x, &format!("{sp}.patch"), &stage.patch_merge)?;
    layer_norm(g, y, &format!("{sp}.patch_norm"), eps)
}

/// `fc2(gelu(dwconv(fc1(x)))) + x`.
pub fn mix_ffn<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str, hidden: usize) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = conv(g, h, &format!("{prefix}.dwconv"), &dwconv_spec(hidden))?;
    let h = g.gelu(h);
    let y = linear(g, h, &format!("{prefix}.fc2"))?;
    g.add(y, x)
}

pub fn token_mixer<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    prefix: &str,
    stage: &StageConfig,
    cfg: &ModelConfig,
) -> Result<Var> {
    let p = format!("{prefix}.mixer");
    match cfg.mixing {
        Mixing::Afno => {
            let mut vars = [x; 4];
            for (v, name) in vars.iter_mut().zip(AFNO_PARAMS) {
                *v = g.param(&format!("{p}.{name}"))?;
            }
            g.afno(x, vars, &stage.afno)
        }
        Mixing::Mhsa => {
            let mut vars = [x; 8];
            for (v, name) in vars.iter_mut().zip(MHSA_PARAMS) {
                *v = g.param(&format!("{p}.{name}"))?;
            }
            let a = g.mhsa(x, vars, stage.heads, cfg.max_tokens)?;
            g.add(x, a)
        }
    }
}

pub fn encoder_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    i: usize,
    j: usize,
    stage: &StageConfig,
    cfg: &ModelConfig,
) -> Result<Var> {
    let bp = block_prefix(i, j);
    let eps = T::lit(cfg.norm_eps);
    let n1 = layer_norm(g, x, &format!("{bp}.norm1"), eps)?;
    let m = token_mixer(g, n1, &bp, stage, cfg)?;
    let n2 = layer_norm(g, m, &format!("{bp}.norm2"), eps)?;
    mix_ffn(g, n2, &format!("{bp}.ffn"), stage.embed_dim * stage.ffn_expansion)
}

pub fn encoder_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, cfg: &ModelConfig) -> Result<EncoderOutput> {
    cfg.validate_shape(g.value(x).dims5()?.spatial())?;
    let eps = T::lit(cfg.norm_eps);
    let mut cur = x;
    let mut features = Vec::with_capacity(cfg.num_stages());
    for (i, stage) in cfg.stages().iter().enumerate() {
        cur = patch_merge(g, cur, i, stage, eps)?;
        for j in 0..stage.depth {
            cur = encoder_block(g, cur, i, j, stage, cfg)?;
        }
        features.push(cur);
    }
    Ok(EncoderOutput { features })
}
