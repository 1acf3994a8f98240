//! Network building blocks: residual unit, squeeze-and-excitation, MBConv
//! and the classification/regression head.
//!
//! Blocks own only [`ParamId`](crate::tensor::ParamId)s; the values live in a
//! shared [`ParamStore`](crate::tensor::ParamStore) so a whole network can be
//! optimized and checkpointed as one ordered list.

mod head;
mod layers;
mod mbconv;
mod residual;
mod se;

pub use head::{Head, HeadConfig, HeadMode};
pub use layers::{ConvLayer, DenseLayer, DepthwiseLayer};
pub use mbconv::{MbConv, MbConvConfig};
pub use residual::{residual_forward, ResidualBlock, ResidualConfig};
pub use se::{se_excite, se_scale, se_squeeze, GateActivation, SeBlock, SeConfig, SeVariant};
