//! Volumetric segmentation with Fourier-domain token mixing.
//!
//! The network is a four-stage hierarchical transformer encoder whose token
//! mixer is an adaptive Fourier neural operator (AFNO): a real 3D FFT over the
//! spatial axes, a block-diagonal complex MLP applied at every retained
//! frequency, component-wise soft shrinkage and an inverse FFT with a residual
//! connection. A light all-MLP decoder fuses the four feature scales and
//! returns per-class logits at the input resolution.
//!
//! Everything is written from scratch on top of a small dense tensor type:
//! convolutions, FFTs, normalization layers, a tape-based reverse-mode
//! autodiff over the closed operator set, the hybrid Dice + cross-entropy loss
//! with deep supervision, DSC/HD95 metrics, analytic parameter/FLOP accounting
//! and a synthetic phantom generator.

pub mod afno;
pub mod autograd;
pub mod config;
pub mod data_io;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod model_stats;
pub mod ops;
pub mod rng;
pub mod optim;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use config::{Mixing, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use scalar::Scalar;
pub use tensor::{ComplexTensor, Tensor};
