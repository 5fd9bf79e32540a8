//! Parameter counting and analytic FLOP accounting.
//!
//! FLOPs count a multiply-accumulate as two operations:
//!
//! - convolution: `2 K^3 Cin/groups Cout` per output voxel
//! - linear layer: `2 Cin Cout` per position
//! - 3D FFT over `N` voxels: `5 N log2 N` per channel (split-radix estimate),
//!   forward and inverse alike
//! - AFNO block MLP: 8 FLOPs per complex multiply-accumulate over the `N / 2`
//!   half-spectrum positions
//! - attention: `4 L^2 C` for scores and values plus `8 L C^2` for the four
//!   projections
//!
//! Normalization, activations, upsampling and additions are not counted.

use crate::afno::{mhsa_param_count, AfnoConfig};
use crate::autograd::ParamStore;
use crate::config::{Mixing, ModelConfig};
use crate::decoder::{aux_spec, fuse_spec, head_spec, FUSE_BN};
use crate::encoder::{block_prefix, dwconv_spec, stage_prefix};
use crate::error::Result;
use crate::model::Model;
use crate::ops::conv::ConvSpec;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostBreakdown {
    pub fn from_entries(entries: Vec<CostEntry>) -> Self {
        let total_params = entries.iter().map(|e| e.params).sum();
        let total_flops = entries.iter().map(|e| e.flops).sum();
        Self { entries, total_params, total_flops }
    }

    pub fn get(&self, name: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Sum over entries whose name contains `pattern`.
    pub fn sum_matching(&self, pattern: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.name.contains(pattern))
            .fold((0, 0), |(p, f), e| (p + e.params, f + e.flops))
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let w = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  {:>12}  {:>16}\n", "layer", "params", "flops");
        for e in &self.entries {
            s += &format!("{:<w$}  {:>12}  {:>16}\n", e.name, e.params, e.flops);
        }
        s += &format!("{:<w$}  {:>12}  {:>16}\n", "total", self.total_params, self.total_flops);
        s
    }
}

/// Layer a stored tensor belongs to: the mixer as a whole, otherwise the
/// name without its last component.
pub fn layer_of(name: &str) -> &str {
    if let Some(i) = name.find(".mixer.") {
        return &name[..i + ".mixer".len()];
    }
    name.rsplit_once('.').map_or(name, |(head, _)| head)
}

/// Exact enumeration of stored scalars, grouped per layer. Complex tensors
/// already store two reals per entry.
pub fn count_store<T: Scalar>(store: &ParamStore<T>) -> CostBreakdown {
    let mut entries: Vec<CostEntry> = Vec::new();
    for e in store.entries() {
        let layer = layer_of(&e.name);
        let n = e.tensor.numel() as u64;
        match entries.last_mut() {
            Some(last) if last.name == layer => last.params += n,
            _ => entries.push(CostEntry { name: layer.to_string(), params: n, flops: 0 }),
        }
    }
    CostBreakdown::from_entries(entries)
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> CostBreakdown {
    count_store(model.params())
}

/// Per-channel cost of one 3D FFT over `spatial`.
pub fn rfft3_flops(spatial: [usize; 3]) -> u64 {
    let n = spatial.iter().product::<usize>() as f64;
    if n <= 1.0 {
        return 0;
    }
    (5.0 * n * n.log2()).round() as u64
}

pub fn half_spectrum_positions(spatial: [usize; 3]) -> u64 {
    (spatial[0] * spatial[1] * (spatial[2] / 2).max(1)) as u64
}

/// Cost of one token mixer split into its cross-token part (FFTs or
/// attention scores) and its per-token part (block MLP or projections).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerFlops {
    pub interaction: u64,
    pub pointwise: u64,
}

impl MixerFlops {
    pub fn total(&self) -> u64 {
        self.interaction + self.pointwise
    }
}

pub fn afno_mixer_flops(cfg: &AfnoConfig, spatial: [usize; 3]) -> MixerFlops {
    let c = cfg.channels as u64;
    let (k, bw, hw) = (cfg.num_blocks as u64, cfg.block_width() as u64, cfg.hidden_width() as u64);
    MixerFlops {
        interaction: 2 * c * rfft3_flops(spatial),
        pointwise: 8 * 2 * k * bw * hw * half_spectrum_positions(spatial),
    }
}

pub fn mhsa_mixer_flops(channels: usize, tokens: usize) -> MixerFlops {
    let (c, l) = (channels as u64, tokens as u64);
    MixerFlops { interaction: 4 * l * l * c, pointwise: 8 * l * c * c }
}

fn conv_flops(spec: &ConvSpec, out_voxels: usize) -> u64 {
    2 * (spec.kernel_volume() * spec.in_channels / spec.groups * spec.out_channels * out_voxels) as u64
}

fn conv_params(spec: &ConvSpec) -> u64 {
    (spec.kernel_volume() * spec.in_channels / spec.groups * spec.out_channels + spec.out_channels) as u64
}

fn linear_entry(name: String, cin: usize, cout: usize, positions: usize) -> CostEntry {
    CostEntry {
        name,
        params: (cin * cout + cout) as u64,
        flops: 2 * (cin * cout * positions) as u64,
    }
}

fn norm_entry(name: String, c: usize) -> CostEntry {
    CostEntry { name, params: 2 * c as u64, flops: 0 }
}

/// Closed-form parameter counts and FLOPs of one forward pass of a single
/// volume of extent `input`, in the same layer order as [`count_params`].
pub fn count_flops(cfg: &ModelConfig, input: [usize; 3]) -> Result<CostBreakdown> {
    cfg.validate()?;
    cfg.validate_shape(input)?;
    let spatial = cfg.stage_spatial(input)?;
    let vox = |s: [usize; 3]| s.iter().product::<usize>();
    let mut e = Vec::new();
    for (i, stage) in cfg.stages().iter().enumerate() {
        let sp = stage_prefix(i);
        let l = vox(spatial[i]);
        let c = stage.embed_dim;
        let hidden = c * stage.ffn_expansion;
        e.push(CostEntry {
            name: format!("{sp}.patch"),
            params: conv_params(&stage.patch_merge),
            flops: conv_flops(&stage.patch_merge, l),
        });
        e.push(norm_entry(format!("{sp}.patch_norm"), c));
        for j in 0..stage.depth {
            let bp = block_prefix(i, j);
            e.push(norm_entry(format!("{bp}.norm1"), c));
            let (params, flops) = match cfg.mixing {
                Mixing::Afno => (stage.afno.param_count(), afno_mixer_flops(&stage.afno, spatial[i]).total()),
                Mixing::Mhsa => (mhsa_param_count(c), mhsa_mixer_flops(c, l).total()),
            };
            e.push(CostEntry { name: format!("{bp}.mixer"), params, flops });
            e.push(norm_entry(format!("{bp}.norm2"), c));
            e.push(linear_entry(format!("{bp}.ffn.fc1"), c, hidden, l));
            let dw = dwconv_spec(hidden);
            e.push(CostEntry { name: format!("{bp}.ffn.dwconv"), params: conv_params(&dw), flops: conv_flops(&dw, l) });
            e.push(linear_entry(format!("{bp}.ffn.fc2"), hidden, c, l));
        }
    }
    let d = cfg.decoder_dim;
    for (i, &c) in cfg.dims.iter().enumerate() {
        e.push(linear_entry(format!("decoder.proj{i}"), c, d, vox(spatial[i])));
    }
    let fine = vox(spatial[0]);
    let fuse = fuse_spec(cfg);
    e.push(CostEntry { name: "decoder.fuse".into(), params: conv_params(&fuse), flops: conv_flops(&fuse, fine) });
    e.push(norm_entry(FUSE_BN.into(), d));
    // every input voxel of the transposed convolution scatters a full kernel
    let up = cfg.upsample_spec();
    e.push(CostEntry {
        name: "decoder.up".into(),
        params: conv_params(&up),
        flops: 2 * (up.kernel_volume() * up.in_channels / up.groups * up.out_channels * fine) as u64,
    });
    let head = head_spec(cfg);
    e.push(CostEntry { name: "decoder.head".into(), params: conv_params(&head), flops: conv_flops(&head, vox(input)) });
    let aux = aux_spec(cfg);
    for (i, s) in spatial.iter().enumerate() {
        e.push(CostEntry { name: format!("decoder.aux{i}"), params: conv_params(&aux), flops: conv_flops(&aux, vox(*s)) });
    }
    Ok(CostBreakdown::from_entries(e))
}

/// First cubic grid (even side, `L = side^3` tokens) at which the AFNO mixer
/// is cheaper than attention for the same channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossover {
    pub side: usize,
    pub tokens: usize,
    pub afno_flops: u64,
    pub mhsa_flops: u64,
}

pub fn crossover(cfg: &AfnoConfig, max_side: usize) -> Option<Crossover> {
    (2..=max_side).step_by(2).find_map(|side| {
        let s = [side; 3];
        let a = afno_mixer_flops(cfg, s).total();
        let m = mhsa_mixer_flops(cfg.channels, side * side * side).total();
        (a < m).then_some(Crossover { side, tokens: side * side * side, afno_flops: a, mhsa_flops: m })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_counts() {
        let cfg = AfnoConfig::new(64, 8);
        // independent evaluation: w1, b1, w2, b2, two reals each
        let enumerated: u64 = [8 * 8 * 8, 8 * 8, 8 * 8 * 8, 8 * 8].iter().map(|n| 2 * n).sum();
        assert_eq!(cfg.param_count(), enumerated);
        assert_eq!(enumerated, 2304);
        assert_eq!(mhsa_param_count(64), 16640);
        let ratio: f64 = 2304.0 / 16640.0;
        assert!((ratio - 0.138).abs() < 0.001);
    }

    #[test]
    fn empty_store_counts_zero() {
        let b = count_store(&ParamStore::<f32>::new());
        assert_eq!((b.total_params, b.entries.len()), (0, 0));
    }

    #[test]
    fn enumeration_matches_closed_form() {
        for mixing in [Mixing::Afno, Mixing::Mhsa] {
            for cfg in [ModelConfig::tiny(), ModelConfig::default()] {
                let cfg = ModelConfig { mixing, ..cfg };
                let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
                let enumerated = count_params(&model);
                let closed = count_flops(&cfg, cfg.input_shape).unwrap();
                let pairs: Vec<(String, u64)> = enumerated.entries.iter().map(|e| (e.name.clone(), e.params)).collect();
                let expected: Vec<(String, u64)> = closed.entries.iter().map(|e| (e.name.clone(), e.params)).collect();
                assert_eq!(pairs, expected);
                assert_eq!(enumerated.total_params, model.param_count());
            }
        }
    }

    #[test]
    fn totals_are_sums() {
        let b = count_flops(&ModelConfig::default(), [16, 16, 16]).unwrap();
        assert_eq!(b.total_flops, b.entries.iter().map(|e| e.flops).sum::<u64>());
        assert_eq!(b.total_params, b.entries.iter().map(|e| e.params).sum::<u64>());
    }

    #[test]
    fn pointwise_conv_flops() {
        let cfg = ModelConfig::tiny();
        let b = count_flops(&cfg, [4, 4, 4]).unwrap();
        let n = cfg.num_classes as u64;
        assert_eq!(b.get("decoder.head").unwrap().flops, 2 * n * n * 64);
    }

    #[test]
    fn fft_cost_model() {
        assert_eq!(rfft3_flops([8, 8, 8]), 5 * 512 * 9);
        assert_eq!(rfft3_flops([2, 1, 1]), 10);
        assert_eq!(rfft3_flops([1, 1, 1]), 0);
    }

    #[test]
    fn doubling_extent_scales_block_mlp_by_eight() {
        let cfg = AfnoConfig::new(64, 8);
        let a = afno_mixer_flops(&cfg, [8, 8, 8]);
        let b = afno_mixer_flops(&cfg, [16, 16, 16]);
        assert_eq!(b.pointwise, 8 * a.pointwise);
        let (n1, n2) = (512.0f64, 4096.0f64);
        let model = n2 * n2.log2() / (n1 * n1.log2());
        assert!((b.interaction as f64 / a.interaction as f64 - model).abs() < 1e-6);
    }

    #[test]
    fn attention_grows_quadratically() {
        let a = mhsa_mixer_flops(64, 512);
        let b = mhsa_mixer_flops(64, 4096);
        assert_eq!(b.interaction, 64 * a.interaction);
        assert_eq!(b.pointwise, 8 * a.pointwise);
    }

    #[test]
    fn crossover_is_located() {
        let cfg = AfnoConfig::new(64, 8);
        let c = crossover(&cfg, 64).unwrap();
        assert!(c.afno_flops < c.mhsa_flops);
        if c.side > 2 {
            let s = c.side - 2;
            assert!(afno_mixer_flops(&cfg, [s; 3]).total() >= mhsa_mixer_flops(64, s * s * s).total());
        }
    }

    #[test]
    fn layer_grouping() {
        assert_eq!(layer_of("encoder.stage0.block1.mixer.q.weight"), "encoder.stage0.block1.mixer");
        assert_eq!(layer_of("encoder.stage0.block1.mixer.w1"), "encoder.stage0.block1.mixer");
        assert_eq!(layer_of("decoder.fuse_bn.gamma"), "decoder.fuse_bn");
    }
}
