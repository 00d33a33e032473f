//! Evaluation suite: retrieval precision, Fréchet distance, multimodal distance,
//! diversity and multimodality over embedder space, and BLEU, ROUGE-L and CIDEr
//! over captions.

mod captions;
mod embedding;
mod eval;

use thiserror::Error;

pub use captions::{bleu, caption_words, cider, rouge_l};
pub use embedding::{diversity, euclidean, fid, mm_dist, mmodality, r_precision, random_embeddings};
pub use eval::{eval_m2t, eval_t2m, EvalConfig, EvalContext, EvalError, EvalReport, Generator, Scores};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{what}: have {have}, need at least {need}")]
    TooFew { what: &'static str, have: usize, need: usize },
    #[error("{what}: lengths {left} and {right} differ")]
    Mismatch { what: &'static str, left: usize, right: usize },
    #[error("matrix square root failed to converge (residual {residual:e})")]
    MatrixRoot { residual: f64 },
}

pub type Result<T> = std::result::Result<T, MetricError>;
