//! Shared text/motion vocabulary, prompt formats and a small causal transformer.
//!
//! The vocabulary starts with special tokens and caption words, then grows by the
//! format tags and one token per codebook entry. The model is trained on the tape;
//! [`Session`] decodes incrementally with key/value caches.

mod infer;
mod model;
mod prompt;
mod vocab;

use thiserror::Error;

pub use infer::{logprobs, sample, Completion, SampleConfig, Session};
pub use model::{LmConfig, TinyLM};
pub use prompt::{
    encode_prompt, encode_target, parse_output, parse_output_text, target_ids, template_text, MixedSequence, Payload, StructuredOutput,
    Task,
};
pub use vocab::{
    detokenize, motion_token, parse_motion_token, TokenClass, Vocabulary, ANSWER_CLOSE, ANSWER_OPEN, BOS, EOS, FORMAT_TOKENS, MOTION_CLOSE,
    MOTION_OPEN, PAD, SPECIALS, THINK_CLOSE, THINK_OPEN, UNK,
};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("{0}")]
    Invalid(String),
    #[error("sequence length {len} exceeds the context window of {context}")]
    Context { len: usize, context: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LmError>;
