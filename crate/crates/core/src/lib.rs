//! Chunk-level KV-cache (CLC) reuse engine.
//!
//! This crate holds the pure algorithmic pieces: dense f32 kernels with
//! rotary position embeddings, a small deterministic decoder-only transformer
//! that supports isolated chunk prefill and selective recomputation, the
//! cache-reuse strategies layered on top of it, and the scoring/analysis
//! functions used by the benchmark harness.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the on-disk
//! chunk store and the command-line harness live in `clc-bench`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cache;
pub mod metrics;
pub mod model;
pub mod strategies;
pub mod tensor;

mod digest;

pub use cache::{assemble, cache_key, AssembledContext, ChunkCache, ChunkId, Segment, SelectionMask};
pub use metrics::{adjusted_f1, f1, normalize_answer, EvalRecord, EvalReport};
pub use model::{
    GenerationResult, LayerKv, Model, ModelConfig, ModelError, StopReason, BOS, EOS, PAD,
};
pub use strategies::{run_strategy, StrategyConfig, StrategyError, StrategyInputs};
pub use tensor::{RopeParams, Tensor, TensorError};
