//! Primitive tensor operations and their adjoints.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod upsample;

pub use activation::{gelu, relu, softmax_channels};
pub use conv::{conv3d, conv3d_transposed, conv3d_transposed_to, ConvSpec};
pub use linear::linear;
pub use norm::{batch_norm3d, layer_norm, BatchNormStats};
pub use upsample::upsample_trilinear;
