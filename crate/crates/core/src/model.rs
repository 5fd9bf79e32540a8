//! The full network: parameter layout and initialization, forward passes and
//! one-call loss plus gradients for training.

use crate::autograd::{Graph, ParamStore};
use crate::config::ModelConfig;
use crate::decoder::{self, DecoderOutput, FUSE_BN};
use crate::encoder;
use crate::error::{Error, Result};
use crate::loss::deep_supervised_loss;
use crate::metrics::LabelMask;
use crate::ops::norm::BatchNormStats;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation [`INIT_STD`], resampled outside two
    /// standard deviations.
    TruncNormal,
    /// Normal with variance `2 / fan_in`.
    Kaiming(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Complex tensor stored as a trailing (re, im) axis.
    pub complex: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self { name: name.into(), shape, init, complex: false }
    }

    pub fn complex(mut self) -> Self {
        self.complex = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Each tensor draws from its own stream keyed by name, so changing one
    /// part of the architecture leaves every other tensor bit-identical.
    pub fn materialize<T: Scalar>(&self, seed: u64) -> Tensor<T> {
        let n = self.numel();
        let data: Vec<T> = match self.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal | Init::Kaiming(_) => {
                let std = match self.init {
                    Init::Kaiming(fan_in) => (2.0 / fan_in.max(1) as f64).sqrt(),
                    _ => INIT_STD,
                };
                let dist = Normal::new(0.0, std).expect("finite std");
                let truncate = matches!(self.init, Init::TruncNormal);
                let mut rng = stream(seed, &self.name);
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut rng);
                        if !truncate || v.abs() <= 2.0 * std {
                            break T::lit(v);
                        }
                    })
                    .collect()
            }
        };
        Tensor::new(self.shape.clone(), data).expect("spec shape matches data")
    }
}

/// Every trainable tensor of a configuration, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = encoder::param_specs(cfg);
    out.extend(decoder::param_specs(cfg));
    out
}

pub fn buffer_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    decoder::buffer_specs(cfg)
}

pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub aux: Vec<Tensor<T>>,
}

/// Result of one training forward/backward pass.
pub struct StepOutput<T> {
    pub loss: T,
    /// One gradient per stored parameter, in storage order.
    pub grads: Vec<Tensor<T>>,
    pub bn_stats: Option<(Vec<T>, Vec<T>)>,
    /// Number of values each batch-norm channel was averaged over.
    pub bn_count: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    buffers: ParamStore<T>,
}

fn build_store<T: Scalar>(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for s in specs {
        store.insert(s.name.clone(), s.materialize(seed), s.complex)?;
    }
    Ok(store)
}

fn check_store<T: Scalar>(what: &str, specs: &[ParamSpec], store: &ParamStore<T>) -> Result<()> {
    if specs.len() != store.len() {
        return Err(Error::format(format!(
            "{what}: expected {} tensors, found {}",
            specs.len(),
            store.len()
        )));
    }
    for (s, e) in specs.iter().zip(store.entries()) {
        if s.name != e.name {
            return Err(Error::format(format!("{what}: expected tensor {:?}, found {:?}", s.name, e.name)));
        }
        if s.shape != e.tensor.shape() || s.complex != e.complex {
            return Err(Error::format(format!(
                "{what}: tensor {} has shape {:?}, configuration needs {:?}",
                s.name,
                e.tensor.shape(),
                s.shape
            )));
        }
    }
    Ok(())
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_store(&param_specs(&config), seed)?;
        let buffers = build_store(&buffer_specs(&config), seed)?;
        Ok(Self { config, params, buffers })
    }

    /// Reassembles a model from stored tensors, checking names and shapes
    /// against the configuration.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>, buffers: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_store("parameters", &param_specs(&config), &params)?;
        check_store("buffers", &buffer_specs(&config), &buffers)?;
        Ok(Self { config, params, buffers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn param_count(&self) -> u64 {
        self.params.param_count()
    }

    pub fn running_stats(&self) -> BatchNormStats<T> {
        let get = |n: &str| self.buffers.get(&format!("{FUSE_BN}.{n}")).expect("buffer present").data().to_vec();
        BatchNormStats { mean: get("running_mean"), var: get("running_var") }
    }

    pub fn update_running_stats(&mut self, mean: &[T], var: &[T], count: usize) {
        let mut stats = self.running_stats();
        stats.update(mean, var, count, T::lit(self.config.bn_momentum));
        for (n, v) in [("running_mean", stats.mean), ("running_var", stats.var)] {
            let t = self.buffers.get_mut(&format!("{FUSE_BN}.{n}")).expect("buffer present");
            t.data_mut().copy_from_slice(&v);
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<[usize; 3]> {
        let d = x.dims5()?;
        if d.c != self.config.in_channels {
            return Err(Error::input(format!(
                "input has {} channels, model expects {}",
                d.c, self.config.in_channels
            )));
        }
        self.config.validate_shape(d.spatial())?;
        Ok(d.spatial())
    }

    /// Records the whole network on `g`.
    pub fn build<'a>(
        &self,
        g: &mut Graph<'a, T>,
        x: Tensor<T>,
        running: &BatchNormStats<T>,
        training: bool,
    ) -> Result<DecoderOutput<T>> {
        let spatial = self.check_input(&x)?;
        let xv = g.input(x);
        let enc = encoder::encoder_forward(g, xv, &self.config)?;
        decoder::decoder_forward(g, &enc.features, &self.config, spatial, running, training)
    }

    /// Inference-mode forward pass with all outputs.
    pub fn forward_all(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let running = self.running_stats();
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, x.clone(), &running, false)?;
        Ok(ForwardOutput {
            logits: g.value(out.logits).clone(),
            aux: out.aux.iter().map(|&a| g.value(a).clone()).collect(),
        })
    }

    /// Inference-mode logits `(B, D, H, W, N_cls)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_all(x)?.logits)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<LabelMask>> {
        let logits = self.forward(x)?;
        let b = logits.dims5()?.b;
        (0..b).map(|i| LabelMask::from_logits(&logits, i)).collect()
    }

    /// Deep-supervised loss and parameter gradients for a batch.
    pub fn loss_and_grads(
        &self,
        x: &Tensor<T>,
        labels: &[LabelMask],
        weights: &[f64],
        eps: f64,
        training: bool,
    ) -> Result<StepOutput<T>> {
        let running = self.running_stats();
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, x.clone(), &running, training)?;
        let aux: Vec<Tensor<T>> = out.aux.iter().map(|&a| g.value(a).clone()).collect();
        let (loss, seeds) = deep_supervised_loss(g.value(out.logits), &aux, labels, weights, T::lit(eps))?;
        let outputs = std::iter::once(out.logits).chain(out.aux.iter().copied());
        let grads = g.backward(outputs.zip(seeds).collect())?.into_dense(&self.params);
        let fuse = g.value(out.logits).dims5()?;
        let finest = self.config.stage_spatial(fuse.spatial())?[0];
        Ok(StepOutput {
            loss,
            grads,
            bn_stats: out.bn_stats,
            bn_count: fuse.b * finest.iter().product::<usize>(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |s: &ParamStore<T>| {
            let mut out = ParamStore::new();
            for e in s.entries() {
                out.insert(e.name.clone(), e.tensor.cast(), e.complex).expect("unique names");
            }
            out
        };
        Model { config: self.config.clone(), params: conv(&self.params), buffers: conv(&self.buffers) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mixing;

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = Model::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let b = Model::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let c = Model::<f32>::new(ModelConfig::tiny(), 6).unwrap();
        let x = Tensor::from_fn(&[1, 4, 4, 4, 1], |i| (i as f32).cos());
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert_ne!(a.forward(&x).unwrap(), c.forward(&x).unwrap());
    }

    #[test]
    fn init_statistics() {
        let s = ParamSpec::new("w", vec![20000], Init::TruncNormal);
        let t: Tensor<f64> = s.materialize(1);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let std = (t.data().iter().map(|v| v * v).sum::<f64>() / 20000.0).sqrt();
        // a normal truncated at two sigma keeps 0.774 of the variance
        assert!((std / 0.02 - 0.774f64.sqrt()).abs() < 0.02, "{std}");
        let k: Tensor<f64> = ParamSpec::new("k", vec![20000], Init::Kaiming(50)).materialize(1);
        let std = (k.data().iter().map(|v| v * v).sum::<f64>() / 20000.0).sqrt();
        assert!((std / 0.2 - 1.0).abs() < 0.03, "{std}");
    }

    #[test]
    fn mixer_swap_touches_only_mixer_tensors() {
        let a = Model::<f64>::new(ModelConfig::tiny(), 9).unwrap();
        let b = Model::<f64>::new(ModelConfig { mixing: Mixing::Mhsa, ..ModelConfig::tiny() }, 9).unwrap();
        let shared = |m: &Model<f64>| {
            m.params()
                .entries()
                .iter()
                .filter(|e| !e.name.contains(".mixer."))
                .map(|e| (e.name.clone(), e.tensor.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(shared(&a), shared(&b));
    }

    #[test]
    fn from_parts_checks_layout() {
        let m = Model::<f64>::new(ModelConfig::tiny(), 0).unwrap();
        let ok = Model::from_parts(m.config().clone(), m.params().clone(), m.buffers().clone());
        assert!(ok.is_ok());
        let other = ModelConfig { decoder_dim: 6, ..ModelConfig::tiny() };
        let err = Model::from_parts(other, m.params().clone(), m.buffers().clone()).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn rejects_wrong_input() {
        let m = Model::<f64>::new(ModelConfig::tiny(), 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 4, 4, 4, 2])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 4, 4, 5, 1])).is_err());
    }

    #[test]
    fn running_stats_follow_training_batches() {
        let mut m = Model::<f64>::new(ModelConfig::tiny(), 0).unwrap();
        let x = Tensor::from_fn(&[2, 4, 4, 4, 1], |i| (i as f64 * 0.1).sin());
        let labels: Vec<LabelMask> = (0..2)
            .map(|_| LabelMask::new([4, 4, 4], (0..64).map(|i| (i % 3 == 0) as u8).collect(), 2).unwrap())
            .collect();
        let w = crate::config::default_supervision_weights(4);
        let step = m.loss_and_grads(&x, &labels, &w, 1e-5, true).unwrap();
        assert_eq!(step.grads.len(), m.params().len());
        assert_eq!(step.bn_count, 16);
        let (mean, var) = step.bn_stats.unwrap();
        m.update_running_stats(&mean, &var, step.bn_count);
        let r = m.running_stats();
        assert!((r.mean[0] - 0.1 * mean[0]).abs() < 1e-15);
    }
}
