//! Small dense networks with exact reverse-mode gradients.

mod activation;
mod gradcheck;
mod mlp;
mod optim;

pub use activation::{softmax, softmax_backprop, softmax_blocks, softmax_blocks_backprop, softmax_into, Activation};
pub use gradcheck::{gradient_check, probe_weights};
pub use mlp::{chain, clip_global_norm, Dense, GradRecord, LayerGrad, LayerSpec, Mlp, ParamGrads, Tape};
pub use optim::{apply_update, AdamParams, Optimizer, UpdateMode};
