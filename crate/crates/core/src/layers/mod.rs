//! Standard network layers. Each layer offers `apply` (pure forward), `forward` (caches what
//! `backward` needs) and `backward` (returns the input gradient, accumulates parameter gradients).

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;

pub use batchnorm::{BatchNormLayer, BN_EPS, BN_MOMENTUM};
pub use conv::{conv_output_size, ConvLayer};
pub use dense::DenseLayer;
pub use loss::{softmax_cross_entropy, LossOutput};
pub use pool::{GlobalAvgPool, PoolKind, PoolLayer};
