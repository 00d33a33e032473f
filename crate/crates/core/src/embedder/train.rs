use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine, motion_features, DualEncoder, EmbedError, EmbedderConfig, Result, LOGIT_SCALE, MAX_LOGIT_SCALE, MOTION_FEATURES};
use crate::metrics::r_precision;
use crate::synthdata::{derive_seed, Dataset};
use crate::tensor::{cosine_lr, AdamConfig, AdamState, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderLogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub logit_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    /// Mean loss of the untrained model over 20 random batches.
    pub initial_loss: f64,
    /// Mean loss over the last 20 steps.
    pub final_loss: f64,
    pub val_matched_cosine: f64,
    pub val_mismatched_cosine: f64,
    /// Top-1 retrieval of the true caption among 32 candidates on the validation split.
    pub val_top1: f64,
    pub log: Vec<EmbedderLogEntry>,
}

fn feature_stats(data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sum = vec![0.0; MOTION_FEATURES];
    let mut sq = vec![0.0; MOTION_FEATURES];
    let mut n = 0.0;
    for clip in &data.clips {
        let f = motion_features(&clip.frames)?;
        for row in f.values.chunks(MOTION_FEATURES) {
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-3))
        .collect();
    Ok((mean, std))
}

/// Matched and mismatched mean cosines and pool-32 top-1 retrieval on `data`.
pub(crate) fn alignment(model: &DualEncoder, data: &Dataset, seed: u64) -> Result<(f64, f64, f64)> {
    let clips: Vec<&Tensor> = data.clips.iter().map(|c| &c.frames).collect();
    let texts: Vec<&str> = data.records.iter().map(|r| r.caption.as_str()).collect();
    let m = model.embed_motions(&clips)?;
    let t = model.embed_texts(&texts)?;
    let n = m.len();
    let cos = |i: usize, j: usize| cosine(&m[i], &t[j]).unwrap_or(0.0);
    let matched = (0..n).map(|i| cos(i, i)).sum::<f64>() / n as f64;
    let mismatched = (0..n).map(|i| cos(i, (i + 1) % n)).sum::<f64>() / n as f64;
    let top1 = if n >= 32 {
        r_precision(&m, &t, 32, 1000, seed).map(|r| r[0]).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    Ok((matched, mismatched, top1))
}

/// Trains the dual encoder on matched `(clip, caption)` pairs of `train` and reports alignment on `val`.
pub fn train_embedder(train: &Dataset, val: &Dataset, cfg: &EmbedderConfig) -> Result<(DualEncoder, EmbedderReport)> {
    if cfg.batch_size < 2 || train.len() < cfg.batch_size {
        return Err(EmbedError::Batch(cfg.batch_size.min(train.len())));
    }
    if cfg.steps == 0 || !(cfg.lr > 0.0) {
        return Err(EmbedError::Config("steps and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DualEncoder::new(cfg.clone(), &mut rng)?;
    let (mean, std) = feature_stats(train)?;
    model.feat_mean = mean;
    model.feat_std = std;
    let initial_loss = {
        let mut probe = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
        let mut sum = 0.0;
        for _ in 0..20 {
            let picks = sample(&mut probe, train.len(), cfg.batch_size).into_vec();
            let clips: Vec<&Tensor> = picks.iter().map(|&i| &train.clips[i].frames).collect();
            let texts: Vec<&str> = picks.iter().map(|&i| train.records[i].caption.as_str()).collect();
            sum += model.info_nce(&Tape::new(), &clips, &texts)?.item();
        }
        sum / 20.0
    };
    let mut adam = AdamState::new(&model.params, AdamConfig::default());
    let mut log = Vec::with_capacity(cfg.steps);
    let max_scale = MAX_LOGIT_SCALE.ln();

    for step in 0..cfg.steps {
        let picks = sample(&mut rng, train.len(), cfg.batch_size).into_vec();
        let clips: Vec<&Tensor> = picks.iter().map(|&i| &train.clips[i].frames).collect();
        let texts: Vec<&str> = picks.iter().map(|&i| train.records[i].caption.as_str()).collect();
        let tape = Tape::new();
        let loss = model.info_nce(&tape, &clips, &texts)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(EmbedError::Diverged { step, loss: value });
        }
        tape.backward(loss)?;
        model.params.zero_grad();
        model.params.absorb_grads(&tape)?;
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)?;
        adam.step(&mut model.params, lr)?;
        let s = &mut model.params.get_mut(LOGIT_SCALE)?.value[0];
        *s = s.min(max_scale);
        if step % 200 == 0 || step + 1 == cfg.steps {
            log::info!("embedder step {step}: loss {value:.4}");
        }
        log.push(EmbedderLogEntry {
            step,
            lr,
            loss: value,
            logit_scale: model.logit_scale(),
        });
    }
    model.params.freeze();

    let window = |entries: &[EmbedderLogEntry]| entries.iter().map(|e| e.loss).sum::<f64>() / entries.len() as f64;
    let k = log.len().min(20);
    let (matched, mismatched, top1) = alignment(&model, val, cfg.seed)?;
    let report = EmbedderReport {
        initial_loss,
        final_loss: window(&log[log.len() - k..]),
        val_matched_cosine: matched,
        val_mismatched_cosine: mismatched,
        val_top1: top1,
        log,
    };
    Ok((model, report))
}
