//! Order-invariant KV-cache fusion for decoder-only transformers.
//!
//! A retrieval-augmented decoder normally concatenates its passages into one
//! long prompt, which makes the output depend on passage order ("lost in the
//! middle"). This crate implements the alternative: a frozen prefill decoder
//! encodes every passage independently at local positions `0..n-1`, the
//! per-passage KV caches are fused by concatenation along the token axis, and
//! a trainable decoder generates the answer conditioned on that fused cache
//! at positions `n..n+m-1`. Because every passage block carries identical
//! positions and softmax normalizes over the whole slot set, the logits are
//! invariant under any permutation of the passage blocks.
//!
//! Modules:
//! - [`tensor`]: dense f32 tensors with reverse-mode autodiff; every
//!   reduction accumulates in f64 in ascending index order, which is what
//!   makes the permutation-invariance tests pass at tight tolerances.
//! - [`model`]: the decoder-only transformer (RoPE, causal multi-head
//!   attention with cache prefixes, gated MLP, RMS norms) plus checkpoints.
//! - [`fusion`]: parallel prefill, the cache-fusion reshape, fused-cache
//!   decoding, greedy generation, and the concatenated-prompt baseline.
//! - [`train`]: the training loop (frozen prefill decoder, AdamW, linear
//!   warmup + cosine decay, gradient accumulation and clipping).
//! - [`data`]: byte-level tokenizer, input templates, synthetic key-fact QA
//!   generator, JSONL persistence.
//! - [`eval`]: exact match, token-level match, the gold-position sweep and
//!   shuffled protocol, report files.

pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use data::{Passage, QAInstance, Tokenizer};
pub use error::Error;
pub use eval::{EvalConfig, EvalMode, EvalReport};
pub use fusion::{FusedCache, PassageBatch};
pub use model::{LayerCache, Model, ModelConfig};
pub use tensor::{Graph, Tensor};
pub use train::{TrainConfig, TrainState};

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Number of worker threads for the parallel sections (per-passage prefill,
/// per-instance evaluation). Reads `KVFUSE_THREADS` once; defaults to the
/// machine's available parallelism.
pub fn max_threads() -> usize {
    use std::sync::OnceLock;
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("KVFUSE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&v| v >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    })
}
