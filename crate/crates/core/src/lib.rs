//! Desk-scale unified text-to-motion and motion-to-text modeling.
//!
//! A synthetic 2-D skeleton corpus feeds a VQ motion tokenizer and a contrastive
//! motion/text embedder. A small decoder-only transformer over a mixed text and
//! motion-token vocabulary is trained with reasoning-trace supervision, then
//! post-trained with group-relative policy optimization against embedding-space
//! rewards, and evaluated with retrieval, distribution and captioning metrics.
//! Everything runs on CPU in f64 with seeded, reproducible stages.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedder;
pub mod metrics;
pub mod pipeline;
pub mod rewards;
pub mod synthdata;
pub mod tensor;
pub mod tokenizer_vq;
pub mod train_grpo;
pub mod train_sft;
pub mod vocab_lm;
