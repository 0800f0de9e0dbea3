//! Dense feed-forward networks with reverse-mode gradients, optimizers and
//! checkpoint I/O.

mod checkpoint;
mod optim;
mod params;
mod tape;

pub use checkpoint::{
    decode_params, encode_params, load_checkpoint, save_checkpoint, Manifest, OptimizerMeta, CHECKPOINT_SCHEMA,
};
pub use optim::{adam_step, cosine_lr, rmsprop_step, AdamState, LrSchedule, Optimizer, OptimizerKind, RmsPropState};
pub use params::{mlp_forward, Activation, LayerSpec, NetworkParams, NetworkParamsBuilder};
pub use tape::{grad, Matrix, Pooling, Segments, Tape, Var};
