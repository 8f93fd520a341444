//! Reverse-mode differentiation over dense tensors, with the layer set used
//! by the detector networks.

mod checkpoint;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    assign_by_name, checkpoint_paths, load_checkpoint, read_checkpoint_manifest, save_checkpoint,
    CheckpointEntry, CheckpointManifest,
};
pub use graph::{Graph, Mode, Var, CE_CLAMP};
pub use kernels::{BnLayout, PoolKind, BN_EPSILON, BN_MOMENTUM};
pub use optim::{clip_global_norm, global_grad_norm, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
