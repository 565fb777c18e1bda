//! Feed-forward experts, noisy top-K MoE layers and the host classifier.

mod classifier;
mod ffn;
mod moe;
mod norm;

pub use classifier::{
    classifier_forward, Block, ClassifierModel, FeedForward, FfnKind, ForwardOptions, ForwardPass,
    ModelArch, TensorInfo,
};
pub use ffn::{Activation, DenseFfn, Ffn, FfnExpert};
pub use moe::{
    balance_loss, moe_forward, rank_experts, router_probs, Gating, MoeLayer, Router,
    RoutingOutcome, TokenRoute,
};
pub use norm::{LayerNorm, LAYER_NORM_EPS};

pub(crate) use moe::dispatch_fractions;
