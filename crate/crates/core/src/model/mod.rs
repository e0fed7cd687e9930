//! The decoder: parameters, checkpoints and forward passes.

pub mod checkpoint;
pub mod engine;
pub mod params;

pub use engine::{
    cache_commit, forward_block, forward_block_rows, forward_full, prefill, AttentionMask, BlockKv,
    BlockOutput, ForwardWeights, KvCache, LinearId, LinearKind, LogitRows, Matrix, VectorId,
};
pub use params::{Gradients, Layout, ModelConfig, ParameterSet, TensorKind};
