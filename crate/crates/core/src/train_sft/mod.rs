//! Supervised fine-tuning on reasoning-augmented targets.
//!
//! Phase one trains on text-to-motion samples only. Phase two draws the task of
//! every batch slot uniformly at random. The learning rate follows one cosine decay
//! across both phases.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::DatasetRecord;
use crate::tensor::{clip_global_norm, cosine_lr, AdamConfig, AdamState, Tape, TensorError};
use crate::vocab_lm::{encode_prompt, encode_target, sample, LmError, MixedSequence, Payload, SampleConfig, Task, TinyLM, Vocabulary};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("invalid SFT config: {0}")]
    Config(String),
    #[error("no training examples")]
    Empty,
    #[error("{records} records but {tokens} motion token sequences")]
    Mismatch { records: usize, tokens: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SftError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub grad_clip: f64,
    /// Each training sequence starts at a random position in `0..=position_shift`
    /// (capped by the context window), so the model cannot key structure on absolute position.
    pub position_shift: usize,
    /// Inverted-dropout rate on embeddings and residual branches during training.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs_phase1: 40,
            epochs_phase2: 60,
            batch_size: 8,
            lr_max: 1e-3,
            lr_min: 1e-5,
            grad_clip: 1.0,
            position_shift: 160,
            dropout: 0.1,
            seed: 0,
        }
    }
}

/// Both task views of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub t2m: MixedSequence,
    pub m2t: MixedSequence,
}

impl TaskPair {
    pub fn get(&self, task: Task) -> &MixedSequence {
        match task {
            Task::T2M => &self.t2m,
            Task::M2T => &self.m2t,
        }
    }
}

/// Full prompt+target sequences for every record; `motion_tokens[i]` are record `i`'s codes.
pub fn build_examples(vocab: &Vocabulary, records: &[DatasetRecord], motion_tokens: &[Vec<usize>]) -> Result<Vec<TaskPair>> {
    if records.len() != motion_tokens.len() {
        return Err(SftError::Mismatch {
            records: records.len(),
            tokens: motion_tokens.len(),
        });
    }
    records
        .iter()
        .zip(motion_tokens)
        .map(|(r, tokens)| {
            let p = encode_prompt(vocab, Task::T2M, Payload::Caption(&r.caption))?;
            let t2m = encode_target(vocab, &p, &r.cot, Payload::Motion(tokens))?;
            let p = encode_prompt(vocab, Task::M2T, Payload::Motion(tokens))?;
            let m2t = encode_target(vocab, &p, &r.cot, Payload::Caption(&r.caption))?;
            let unknown = t2m.unknown_words + m2t.unknown_words;
            if unknown > 0 {
                log::warn!("record {}: {unknown} words mapped to <unk>", r.id);
            }
            Ok(TaskPair { t2m, m2t })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "t2m_warmup")]
    T2mWarmup,
    #[serde(rename = "mixed")]
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub t2m: usize,
    pub m2t: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub steps: usize,
    /// Mean target cross-entropy over every training sequence of both tasks after training.
    pub final_loss: f64,
    pub log: Vec<SftLogEntry>,
}

impl SftConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs_phase1 + self.epochs_phase2 == 0 {
            return Err(SftError::Config("batch_size and total epochs must be positive".into()));
        }
        if !(self.lr_max > 0.0) || self.lr_min < 0.0 || self.grad_clip < 0.0 {
            return Err(SftError::Config(
                "lr_max must be positive, lr_min and grad_clip non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SftError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, records: usize) -> usize {
        records.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, records: usize) -> usize {
        (self.epochs_phase1 + self.epochs_phase2) * self.steps_per_epoch(records)
    }
}

/// Mean target cross-entropy of a batch; errors if no position is supervised.
pub fn sft_loss<'t>(model: &TinyLM, tape: &'t Tape, batch: &[MixedSequence]) -> Result<crate::tensor::Var<'t>> {
    Ok(model.sequence_loss(tape, batch)?)
}

/// Runs both phases over `examples`, updating `model` in place.
pub fn run_sft(model: &mut TinyLM, examples: &[TaskPair], cfg: &SftConfig) -> Result<SftReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(SftError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params, AdamConfig::default());
    let total = cfg.total_steps(examples.len());
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs_phase1 + cfg.epochs_phase2 {
        let phase = if epoch < cfg.epochs_phase1 {
            Phase::T2mWarmup
        } else {
            Phase::Mixed
        };
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<MixedSequence> = chunk
                .iter()
                .map(|&i| {
                    let task = match phase {
                        Phase::T2mWarmup => Task::T2M,
                        Phase::Mixed if rng.gen_bool(0.5) => Task::T2M,
                        Phase::Mixed => Task::M2T,
                    };
                    examples[i].get(task).clone()
                })
                .collect();
            let t2m = batch.iter().filter(|s| s.task == Task::T2M).count();
            let tape = Tape::new();
            let context = model.config.context;
            let starts: Vec<usize> = batch
                .iter()
                .map(|s| rng.gen_range(0..=cfg.position_shift.min(context.saturating_sub(s.len()))))
                .collect();
            let loss = model.sequence_loss_train(&tape, &batch, &starts, cfg.dropout, &mut rng)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(SftError::Diverged { step, loss: value });
            }
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.absorb_grads(&tape)?;
            let grad_norm = if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut model.params, cfg.grad_clip)?
            } else {
                model.params.flat_grads().iter().map(|g| g * g).sum::<f64>().sqrt()
            };
            let lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)?;
            adam.step(&mut model.params, lr)?;
            if step % 100 == 0 || step + 1 == total {
                log::info!("sft step {step}/{total} epoch {epoch} {phase:?}: loss {value:.4} lr {lr:.2e}");
            }
            log.push(SftLogEntry {
                step,
                epoch,
                phase,
                t2m,
                m2t: batch.len() - t2m,
                loss: value,
                lr,
                grad_norm,
            });
            step += 1;
        }
    }
    let final_loss = corpus_loss(model, examples, cfg.batch_size.max(16))?;
    Ok(SftReport {
        steps: step,
        final_loss,
        log,
    })
}

/// Token-weighted target cross-entropy over both task views of every example.
pub fn corpus_loss(model: &TinyLM, examples: &[TaskPair], chunk: usize) -> Result<f64> {
    let seqs: Vec<&MixedSequence> = examples.iter().flat_map(|p| [&p.t2m, &p.m2t]).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for part in seqs.chunks(chunk.max(1)) {
        let batch: Vec<MixedSequence> = part.iter().map(|s| (*s).clone()).collect();
        let n: usize = batch.iter().map(|s| s.loss_mask.iter().skip(1).filter(|&&m| m).count()).sum();
        sum += sft_loss(model, &Tape::new(), &batch)?.item() * n as f64;
        count += n;
    }
    Ok(sum / count.max(1) as f64)
}

/// Fraction of sequences whose greedy continuation of the prompt reproduces the target exactly.
pub fn greedy_exact_match(model: &TinyLM, seqs: &[&MixedSequence]) -> Result<f64> {
    use rayon::prelude::*;
    let hits: Vec<bool> = seqs
        .par_iter()
        .map(|s| {
            let p = s.prompt_len();
            let target = &s.ids[p..];
            let out = sample(model, &s.ids[..p], &SampleConfig::greedy(target.len()), 0)?;
            Ok(out.ids == target)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / seqs.len().max(1) as f64)
}
