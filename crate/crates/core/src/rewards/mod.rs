//! Task rewards: a binary format reward, motion and semantic similarity rewards for
//! text-to-motion, and a doubled caption similarity reward for motion-to-text.
//!
//! Similarity terms are cosines in the frozen dual-encoder space. They are gated to
//! zero whenever the output fails the task grammar or carries an empty payload.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{cosine, DualEncoder, EmbedError};
use crate::synthdata::text_tokens;
use crate::tensor::Tensor;
use crate::tokenizer_vq::{VqError, VqModel};
use crate::vocab_lm::{parse_output_text, StructuredOutput, Task};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("zero-norm or non-finite {0} embedding")]
    Degenerate(&'static str),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

pub type Result<T> = std::result::Result<T, RewardError>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<f64>,
    pub total: f64,
    /// The generated caption was empty, so the caption term was zeroed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_caption: bool,
    /// A motion token could not be decoded, so the similarity terms were zeroed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undecodable: bool,
}

/// 1 when the raw output matches the task grammar, else 0.
pub fn format_reward(raw_output: &str, task: Task) -> f64 {
    if parse_output_text(raw_output, task).format_valid {
        1.0
    } else {
        0.0
    }
}

fn cos(a: &[f64], b: &[f64], what: &'static str) -> Result<f64> {
    cosine(a, b).ok_or(RewardError::Degenerate(what))
}

/// Frozen models the similarity rewards are computed with.
pub struct RewardModels<'a> {
    pub embedder: &'a DualEncoder,
    pub tokenizer: &'a VqModel,
}

/// Precomputed embeddings of one record's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTarget {
    pub motion: Vec<f64>,
    pub caption: Vec<f64>,
}

impl<'a> RewardModels<'a> {
    pub fn target(&self, motion: &Tensor, caption: &str) -> Result<RewardTarget> {
        Ok(RewardTarget {
            motion: self.embedder.embed_motion(motion)?,
            caption: self.embedder.embed_text(caption)?,
        })
    }

    /// `cos(f_motion(generated), f_motion(reference))`.
    pub fn motion_reward(&self, generated: &Tensor, reference: &Tensor) -> Result<f64> {
        let g = self.embedder.embed_motion(generated)?;
        cos(&g, &self.embedder.embed_motion(reference)?, "motion")
    }

    /// `cos(f_motion(generated), f_text(caption))`.
    pub fn semantic_reward(&self, generated: &Tensor, caption: &str) -> Result<f64> {
        let g = self.embedder.embed_motion(generated)?;
        cos(&g, &self.embedder.embed_text(caption)?, "motion")
    }

    /// `2 cos(f_text(generated), f_text(reference))`; an empty caption scores 0.
    pub fn caption_reward(&self, generated: &str, reference: &str) -> Result<(f64, bool)> {
        if !has_words(generated) {
            return Ok((0.0, true));
        }
        let g = self.embedder.embed_text(generated)?;
        Ok((2.0 * cos(&g, &self.embedder.embed_text(reference)?, "caption")?, false))
    }

    /// Reward of one parsed output against a record's precomputed target.
    pub fn total_reward(&self, task: Task, output: &StructuredOutput, target: &RewardTarget) -> Result<RewardBreakdown> {
        let format = if output.format_valid { 1.0 } else { 0.0 };
        let mut r = RewardBreakdown {
            format,
            ..RewardBreakdown::default()
        };
        match task {
            Task::T2M => {
                let (mut motion, mut semantic) = (0.0, 0.0);
                match output.motion_indices.as_deref() {
                    Some(idx) if output.format_valid && !idx.is_empty() => match self.tokenizer.decode(idx) {
                        Ok(frames) => {
                            let g = self.embedder.embed_motion(&frames)?;
                            motion = cos(&g, &target.motion, "motion")?;
                            semantic = cos(&g, &target.caption, "motion")?;
                        }
                        Err(VqError::TokenRange { .. }) => r.undecodable = true,
                        Err(e) => return Err(e.into()),
                    },
                    _ => {}
                }
                r.motion = Some(motion);
                r.semantic = Some(semantic);
                r.total = format + motion + semantic;
            }
            Task::M2T => {
                let mut caption = 0.0;
                if output.format_valid {
                    let text = output.answer_text.as_deref().unwrap_or("");
                    if has_words(text) {
                        let g = self.embedder.embed_text(text)?;
                        caption = 2.0 * cos(&g, &target.caption, "caption")?;
                    } else {
                        r.empty_caption = true;
                    }
                }
                r.caption = Some(caption);
                r.total = format + caption;
            }
        }
        Ok(r)
    }

    /// Rewards for many outputs of one record, computed in parallel.
    pub fn score_all(&self, task: Task, outputs: &[StructuredOutput], target: &RewardTarget) -> Result<Vec<RewardBreakdown>> {
        outputs.par_iter().map(|o| self.total_reward(task, o, target)).collect()
    }
}

fn has_words(text: &str) -> bool {
    text_tokens(text).iter().any(|w| *w != "," && *w != ".")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EmbedderConfig;
    use crate::tokenizer_vq::VqConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixtures() -> (DualEncoder, VqModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let emb = DualEncoder::new(EmbedderConfig::default(), &mut rng).unwrap();
        let cfg = VqConfig {
            codebook_size: 8,
            latent_dim: 8,
            hidden: 8,
            ..VqConfig::default()
        };
        (emb, VqModel::untrained(&cfg, &mut rng).unwrap())
    }

    #[test]
    fn format_reward_cases() {
        assert_eq!(
            format_reward("<think>a</think><Motion><Motion_3><Motion_7></Motion>", Task::T2M),
            1.0
        );
        assert_eq!(
            format_reward("<think>a</think><Motion><Motion_3></Motion><Motion><Motion_1></Motion>", Task::T2M),
            0.0
        );
        assert_eq!(format_reward("", Task::T2M), 0.0);
        assert_eq!(format_reward("<think>x</think><Answer>a person walks</Answer>", Task::M2T), 1.0);
        assert_eq!(format_reward("<think>x</think><Answer>a person walks</Answer>", Task::T2M), 0.0);
    }

    #[test]
    fn gating_and_identity() {
        let (emb, vq) = fixtures();
        let m = RewardModels {
            embedder: &emb,
            tokenizer: &vq,
        };
        let gt = vq.decode(&[1, 2, 3, 4]).unwrap();
        let target = m.target(&gt, "a person walks forward").unwrap();

        let invalid = parse_output_text("<think>a</think><Motion><Motion_1>", Task::T2M);
        let r = m.total_reward(Task::T2M, &invalid, &target).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!((r.motion, r.semantic, r.caption), (Some(0.0), Some(0.0), None));

        let same = parse_output_text(
            "<think>a</think><Motion><Motion_1><Motion_2><Motion_3><Motion_4></Motion>",
            Task::T2M,
        );
        let r = m.total_reward(Task::T2M, &same, &target).unwrap();
        let sem = m.semantic_reward(&gt, "a person walks forward").unwrap();
        assert!((r.motion.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.total - (2.0 + sem)).abs() < 1e-12);

        let empty = parse_output_text("<think>a</think><Motion></Motion>", Task::T2M);
        assert_eq!(m.total_reward(Task::T2M, &empty, &target).unwrap().total, 1.0);

        let far = parse_output_text("<think>a</think><Motion><Motion_99></Motion>", Task::T2M);
        let r = m.total_reward(Task::T2M, &far, &target).unwrap();
        assert!(r.undecodable && r.total == 1.0);
    }

    #[test]
    fn caption_reward_doubles_cosine() {
        let (emb, vq) = fixtures();
        let m = RewardModels {
            embedder: &emb,
            tokenizer: &vq,
        };
        let gt = vq.decode(&[0, 5]).unwrap();
        let target = m.target(&gt, "someone jumps high").unwrap();
        assert!((m.caption_reward("someone jumps high", "someone jumps high").unwrap().0 - 2.0).abs() < 1e-12);
        assert_eq!(m.caption_reward(" . ", "someone jumps").unwrap(), (0.0, true));
        let out = parse_output_text("<think>x</think><Answer>someone jumps high</Answer>", Task::M2T);
        let r = m.total_reward(Task::M2T, &out, &target).unwrap();
        assert!((r.total - 3.0).abs() < 1e-12);
        let blank = parse_output_text("<think>x</think><Answer></Answer>", Task::M2T);
        let r = m.total_reward(Task::M2T, &blank, &target).unwrap();
        assert!(r.empty_caption && r.total == 1.0);
        for (a, b) in [("a man waves", "someone squats low"), ("jumps", "a person walks then turns")] {
            let (v, _) = m.caption_reward(a, b).unwrap();
            assert!(v.abs() <= 2.0);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let (emb, vq) = fixtures();
        let m = RewardModels {
            embedder: &emb,
            tokenizer: &vq,
        };
        let target = m.target(&vq.decode(&[2, 2]).unwrap(), "a man turns around").unwrap();
        let outs: Vec<StructuredOutput> = (0..8)
            .map(|i| {
                parse_output_text(
                    &format!("<think>a</think><Motion><Motion_{}><Motion_{}></Motion>", i, 7 - i),
                    Task::T2M,
                )
            })
            .collect();
        let par = m.score_all(Task::T2M, &outs, &target).unwrap();
        let seq: Vec<_> = outs.iter().map(|o| m.total_reward(Task::T2M, o, &target).unwrap()).collect();
        assert_eq!(par, seq);
    }
}
