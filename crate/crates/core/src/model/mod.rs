//! The instrumented decoder-only transformer and scripted oracle models.
//!
//! The transformer is deliberately plain: learned absolute position
//! embeddings, pre-norm blocks, plain multi-head attention, GELU MLPs, and
//! a separate unembedding matrix. What it adds over a minimal
//! implementation is instrumentation — every forward pass can capture
//! residual streams at each layer boundary, per-head attention matrices,
//! and each head's additive contribution to the residual stream — plus
//! head ablation, which zeroes selected heads' contributions.

mod checkpoint;
mod oracle;
mod trace;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use oracle::{EpisodeResponder, ModelResponder, OracleModel, ResponderAnswer};
pub use trace::{CaptureOptions, CapturePositions, HeadMask, TraceBundle};
pub use transformer::{
    token_to_answer, ForwardPass, LayerParams, ModelConfig, Params, TransformerModel, LN_EPS,
};

use thiserror::Error;

use crate::numcore::NumError;
use crate::tasks::TaskError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("prompt must be nonempty")]
    EmptyPrompt,
    #[error("head ({layer}, {head}) out of range for {n_layers} layers x {n_heads} heads")]
    HeadOutOfRange {
        layer: usize,
        head: usize,
        n_layers: usize,
        n_heads: usize,
    },
    #[error("{0} was not captured in this trace")]
    NotCaptured(&'static str),
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}
