//! Multiple Parametric Exponential Linear Units (MPELU) for deep convolutional networks.
//!
//! The crate bundles a small deterministic CPU tensor library, the MPELU activation with its
//! learnable `alpha`/`beta`, the TaylorELU initializer, residual and network-in-network
//! architectures, signal-propagation analysis tools, CIFAR/IDX data handling and an SGD trainer.

pub mod activation;
pub mod analysis;
pub mod data;
pub mod error;
pub mod graph;
pub mod init;
pub mod layers;
pub mod models;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use activation::{ActivationKind, ActivationLayer, ParamMode};
pub use analysis::{
    grad_check, grad_check_where, residual_bound, residual_exact, residual_histogram, signal_stats,
    GradCheckConfig, GradCheckReport, LossHead, StatsReport, StatsTarget,
};
pub use error::{Error, Result};
pub use graph::{NetworkGraph, Node, Op};
pub use init::{init_network, lsuv_init, taylor_std, FanInfo, FanMode, InitMethod};
pub use models::{
    build_block, build_nin, build_plain, build_resnet, Architecture, BlockVariant, NinConfig, PlainConfig,
    ResNetConfig,
};
pub use param::Param;
pub use rng::Rng;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/mpelu.md")]
    mod mpelu {}
    #[doc = include_str!("../../../book/src/initialization.md")]
    mod initialization {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    mod architectures {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
