//! Small differentiable MLP over flat parameter vectors.
//!
//! Gradients come from explicit per-layer backward rules, both with respect
//! to parameters and to inputs.

mod forward;
mod optim;
mod spec;
mod stats;

pub(crate) use forward::moments;
pub use forward::{
    accuracy, backward, calibrate_stats, commit_running_stats, forward, loss_and_grads, softmax_cross_entropy,
    ForwardTrace, LossGrads, Mode,
};
pub use optim::{cosine_lr, sgd_step};
pub use spec::{LayerKind, LayerSpec, NetSpec, ParamVector, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use stats::{BnStatSet, LayerStats};

#[cfg(test)]
mod tests;
