//! Execution of compiled transformer weights.
//!
//! Each block computes `H = X + MHA(X)` and `X' = H + MLP(H)` with causal
//! softmax heads scaled by `1/√d_head` and a gated MLP
//! `(u₁ ⊙ relu(u₂))·W_2 + b_2`. There is no normalization layer.

mod bundle;
mod exec;
mod weights;

use thiserror::Error;

use crate::decode::{self, Decoded};

pub use bundle::{load_bundle, read_manifest, save_bundle, Manifest, TensorEntry, MANIFEST_FILE, WEIGHTS_FILE};
pub use exec::{DecodeSession, Executor};
pub use weights::{Dims, HeadEntry, HeadWeights, LaneEntry, LayerWeights, MlpWeights, ModelWeights, TensorRef};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("sequence would exceed the context length {context_len}")]
    ContextOverflow { context_len: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("sequences must start with [BOS]")]
    MissingBos,
    #[error("non-finite activation after layer {layer} at position {pos}")]
    NonFinite { layer: usize, pos: usize },
    #[error("max_steps must be at least 1")]
    NoBudget,
    #[error("weight bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Logits at the last position of `tokens`.
pub fn forward(weights: &ModelWeights, tokens: &[usize]) -> Result<Vec<f64>, EngineError> {
    Executor::new(weights.clone()).forward(tokens)
}

/// Ids of the `SAT` and `UNSAT` tokens present in the vocabulary.
pub fn stop_tokens(weights: &ModelWeights) -> Vec<usize> {
    ["SAT", "UNSAT"].iter().filter_map(|t| weights.vocab.id(t)).collect()
}

/// Feeds `prompt` into a fresh session and decodes greedily until a stop
/// token or `max_steps` generated tokens. Running out of budget is reported
/// through [`decode::DecodeHalt::BudgetExhausted`].
pub fn greedy_decode(exec: &Executor, prompt: &[usize], max_steps: usize) -> Result<Decoded, EngineError> {
    if max_steps == 0 {
        return Err(EngineError::NoBudget);
    }
    let stop = stop_tokens(exec.weights());
    let mut session = exec.session();
    decode::greedy_decode(&mut session, prompt, &stop, max_steps)
}
