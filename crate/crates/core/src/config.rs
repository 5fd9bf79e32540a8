//! Declarative run description: model architecture, optimizer settings and
//! data source. Every field has a default so a partial config file is enough.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::afno::AfnoConfig;
use crate::data_io::PhantomSpec;
use crate::error::{Error, Result};
use crate::ops::conv::ConvSpec;
use crate::spectral::check_width;

/// Token mixer used inside every encoder block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    #[default]
    Afno,
    Mhsa,
}

impl std::fmt::Display for Mixing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mixing::Afno => "afno",
            Mixing::Mhsa => "mhsa",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Spatial extent `(D, H, W)` the model is validated against.
    pub input_shape: [usize; 3],
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub strides: Vec<usize>,
    pub patch_kernel: usize,
    pub patch_padding: usize,
    pub mixing: Mixing,
    pub afno_blocks: Vec<usize>,
    pub shrink_threshold: f64,
    pub hidden_multiplier: usize,
    pub kept_modes: Option<usize>,
    pub heads: Vec<usize>,
    /// Attention is quadratic in the token count; stages above this refuse to run.
    pub max_tokens: usize,
    pub ffn_expansion: usize,
    pub decoder_dim: usize,
    pub norm_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            input_shape: [16, 16, 16],
            dims: vec![23, 64, 128, 256],
            depths: vec![2, 2, 2, 2],
            strides: vec![2, 2, 2, 2],
            patch_kernel: 3,
            patch_padding: 1,
            mixing: Mixing::Afno,
            afno_blocks: vec![1, 8, 8, 8],
            shrink_threshold: 0.01,
            hidden_multiplier: 1,
            kept_modes: None,
            heads: vec![1, 2, 4, 8],
            max_tokens: 4096,
            ffn_expansion: 4,
            decoder_dim: 128,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Resolved per-stage settings.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub patch_merge: ConvSpec,
    pub afno: AfnoConfig,
    pub heads: usize,
    pub ffn_expansion: usize,
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("{name}: {msg}"))
}

impl ModelConfig {
    /// Small four-stage model used by the tests.
    pub fn tiny() -> Self {
        Self {
            input_shape: [4, 4, 4],
            dims: vec![4, 8, 12, 16],
            depths: vec![1, 1, 1, 1],
            afno_blocks: vec![2, 2, 2, 2],
            heads: vec![1, 2, 2, 4],
            ffn_expansion: 2,
            decoder_dim: 8,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.dims.len()
    }

    pub fn stages(&self) -> Vec<StageConfig> {
        (0..self.num_stages())
            .map(|i| {
                let cin = if i == 0 { self.in_channels } else { self.dims[i - 1] };
                StageConfig {
                    embed_dim: self.dims[i],
                    depth: self.depths[i],
                    patch_merge: ConvSpec::cube(
                        self.patch_kernel,
                        self.strides[i],
                        self.patch_padding,
                        cin,
                        self.dims[i],
                    ),
                    afno: AfnoConfig {
                        channels: self.dims[i],
                        num_blocks: self.afno_blocks[i],
                        shrink_threshold: self.shrink_threshold,
                        hidden_multiplier: self.hidden_multiplier,
                        kept_modes: self.kept_modes,
                    },
                    heads: self.heads[i],
                    ffn_expansion: self.ffn_expansion,
                }
            })
            .collect()
    }

    /// Spatial extent of every stage output for a given input extent.
    pub fn stage_spatial(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let mut cur = input;
        let mut out = Vec::with_capacity(self.num_stages());
        for (i, stage) in self.stages().iter().enumerate() {
            cur = stage
                .patch_merge
                .output_spatial(cur)
                .map_err(|e| field(&format!("model.strides[{i}]"), e))?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Transposed convolution taking the finest features back to the input grid.
    pub fn upsample_spec(&self) -> ConvSpec {
        let s = self.strides[0];
        ConvSpec::cube(s, s, 0, self.decoder_dim, self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if n == 0 {
            return Err(field("model.dims", "at least one stage is required"));
        }
        for (name, len) in [
            ("model.depths", self.depths.len()),
            ("model.strides", self.strides.len()),
            ("model.afno_blocks", self.afno_blocks.len()),
            ("model.heads", self.heads.len()),
        ] {
            if len != n {
                return Err(field(name, format!("has {len} entries, expected one per stage ({n})")));
            }
        }
        if self.in_channels == 0 {
            return Err(field("model.in_channels", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(field("model.num_classes", "must be >= 2"));
        }
        if self.input_shape.contains(&0) {
            return Err(field("model.input_shape", "every extent must be >= 1"));
        }
        if self.dims[0] == 0 {
            return Err(field("model.dims", "must be >= 1"));
        }
        if let Some(i) = (1..n).find(|&i| self.dims[i] <= self.dims[i - 1]) {
            return Err(field(
                "model.dims",
                format!("must strictly increase across stages (stage {i}: {} <= {})", self.dims[i], self.dims[i - 1]),
            ));
        }
        if let Some(i) = self.depths.iter().position(|&d| d == 0) {
            return Err(field(&format!("model.depths[{i}]"), "must be >= 1"));
        }
        if let Some(i) = self.strides.iter().position(|&s| s == 0) {
            return Err(field(&format!("model.strides[{i}]"), "must be >= 1"));
        }
        if self.patch_kernel == 0 {
            return Err(field("model.patch_kernel", "must be >= 1"));
        }
        if self.ffn_expansion == 0 {
            return Err(field("model.ffn_expansion", "must be >= 1"));
        }
        if self.decoder_dim == 0 {
            return Err(field("model.decoder_dim", "must be >= 1"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(field("model.norm_eps", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(field("model.bn_momentum", "must lie in [0, 1]"));
        }
        if !(self.shrink_threshold >= 0.0) || !self.shrink_threshold.is_finite() {
            return Err(field("model.shrink_threshold", "must be finite and >= 0"));
        }
        if self.hidden_multiplier == 0 {
            return Err(field("model.hidden_multiplier", "must be >= 1"));
        }
        for (i, stage) in self.stages().iter().enumerate() {
            match self.mixing {
                Mixing::Afno => {
                    if stage.afno.num_blocks == 0 || stage.embed_dim % stage.afno.num_blocks != 0 {
                        return Err(field(
                            &format!("model.afno_blocks[{i}]"),
                            format!("K = {} must divide C = {}", stage.afno.num_blocks, stage.embed_dim),
                        ));
                    }
                }
                Mixing::Mhsa => {
                    if stage.heads == 0 || stage.embed_dim % stage.heads != 0 {
                        return Err(field(
                            &format!("model.heads[{i}]"),
                            format!("{} heads must divide C = {}", stage.heads, stage.embed_dim),
                        ));
                    }
                }
            }
        }
        self.validate_shape(self.input_shape)
    }

    /// Checks that an input extent runs through every stage.
    pub fn validate_shape(&self, input: [usize; 3]) -> Result<()> {
        let spatial = self.stage_spatial(input)?;
        for (i, s) in spatial.iter().enumerate() {
            match self.mixing {
                Mixing::Afno => check_width(s[2]).map_err(|e| {
                    field(
                        "model.input_shape",
                        format!("stage {i} width {} cannot run the Fourier mixer ({e})", s[2]),
                    )
                })?,
                Mixing::Mhsa => {
                    let l = s.iter().product::<usize>();
                    if l > self.max_tokens {
                        return Err(field(
                            "model.max_tokens",
                            format!("stage {i} has {l} tokens, above the cap of {}", self.max_tokens),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Deep-supervision weights `(1, 1/2, 1/4, ...)` over the main output and
/// one auxiliary head per stage, normalized to sum to one.
pub fn default_supervision_weights(stages: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=stages).map(|i| 0.5f64.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub deep_supervision_weights: Vec<f64>,
    pub dice_eps: f64,
    pub seed: u64,
    /// Evaluate the held-out split every this many epochs (0 disables).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 3e-5,
            momentum: 0.9,
            epochs: 10,
            max_steps: None,
            batch_size: 2,
            deep_supervision_weights: default_supervision_weights(4),
            dice_eps: 1e-5,
            seed: 0,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stages: usize) -> Result<()> {
        for (name, v) in [
            ("train.learning_rate", self.learning_rate),
            ("train.weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(field(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(field("train.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(field("train.epochs", "must be >= 1"));
        }
        if self.max_steps == Some(0) {
            return Err(field("train.max_steps", "must be >= 1 when set"));
        }
        if self.batch_size == 0 {
            return Err(field("train.batch_size", "must be >= 1"));
        }
        if !(self.dice_eps > 0.0) {
            return Err(field("train.dice_eps", "must be > 0"));
        }
        let w = &self.deep_supervision_weights;
        if w.len() != stages + 1 {
            return Err(field(
                "train.deep_supervision_weights",
                format!("has {} entries, expected {} (main output plus one per stage)", w.len(), stages + 1),
            ));
        }
        if w.iter().any(|&v| !(v >= 0.0)) {
            return Err(field("train.deep_supervision_weights", "entries must be >= 0"));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(field("train.deep_supervision_weights", format!("must sum to 1, sum is {total}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset directory; when unset, phantoms are generated.
    pub dir: Option<PathBuf>,
    pub samples: usize,
    pub train_fraction: f64,
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            samples: 20,
            train_fraction: 0.8,
            phantom: PhantomSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(field("data.train_fraction", "must lie strictly between 0 and 1"));
        }
        if self.dir.is_none() {
            if self.samples == 0 {
                return Err(field("data.samples", "must be >= 1"));
            }
            self.phantom.validate().map_err(|e| field("data.phantom", e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Floating-point width of the whole run: 32 or 64.
    pub precision: u32,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: 32,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.precision != 32 && self.precision != 64 {
            return Err(field("precision", format!("must be 32 or 64, got {}", self.precision)));
        }
        self.model.validate()?;
        self.train.validate(self.model.num_stages())?;
        self.data.validate()?;
        if self.data.dir.is_none() {
            let grid = self.data.phantom.grid;
            if grid != self.model.input_shape {
                return Err(field(
                    "data.phantom.grid",
                    format!("{grid:?} differs from model.input_shape {:?}", self.model.input_shape),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        let mhsa = ModelConfig {
            mixing: Mixing::Mhsa,
            ..ModelConfig::default()
        };
        mhsa.validate().unwrap();
    }

    #[test]
    fn default_stage_ladder() {
        let cfg = ModelConfig::default();
        assert_eq!(
            cfg.stage_spatial([16, 16, 16]).unwrap(),
            vec![[8, 8, 8], [4, 4, 4], [2, 2, 2], [1, 1, 1]]
        );
        let s1 = ModelConfig {
            strides: vec![1, 2, 2, 2],
            ..ModelConfig::default()
        };
        assert_eq!(s1.stage_spatial([16, 16, 16]).unwrap()[0], [16, 16, 16]);
    }

    #[test]
    fn supervision_weights_normalized() {
        let w = default_supervision_weights(4);
        assert_eq!(w.len(), 5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] / w[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors_name_the_field() {
        let cases: Vec<(ModelConfig, &str)> = vec![
            (ModelConfig { dims: vec![23, 64, 64, 256], ..Default::default() }, "model.dims"),
            (ModelConfig { afno_blocks: vec![2, 8, 8, 8], ..Default::default() }, "model.afno_blocks[0]"),
            (ModelConfig { num_classes: 1, ..Default::default() }, "model.num_classes"),
            (ModelConfig { depths: vec![2, 2, 2], ..Default::default() }, "model.depths"),
            (ModelConfig { input_shape: [16, 16, 12], ..Default::default() }, "model.input_shape"),
            (
                ModelConfig { mixing: Mixing::Mhsa, max_tokens: 100, ..Default::default() },
                "model.max_tokens",
            ),
            (
                ModelConfig { mixing: Mixing::Mhsa, heads: vec![2, 2, 4, 8], ..Default::default() },
                "model.heads[0]",
            ),
        ];
        for (cfg, name) in cases {
            let err = cfg.validate().unwrap_err().to_string();
            assert!(err.contains(name), "{err} should mention {name}");
        }
        let t = TrainConfig { deep_supervision_weights: vec![0.5, 0.5], ..Default::default() };
        assert!(t.validate(4).unwrap_err().to_string().contains("deep_supervision_weights"));
        let r = RunConfig { precision: 16, ..Default::default() };
        assert!(r.validate().unwrap_err().to_string().contains("precision"));
    }

    #[test]
    fn width_twelve_breaks_an_afno_stage() {
        // 12 -> 6 -> 3: odd width at stage 2
        let cfg = ModelConfig { input_shape: [16, 16, 12], ..Default::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("pad width to even"), "{err}");
    }
}
