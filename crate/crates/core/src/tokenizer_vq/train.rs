use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codebook::{perplexity, Codebook};
use super::network::{decoder, encoder, init_params, vq_loss};
use super::{Result, VqError, VqModel};
use crate::synthdata::{Dataset, FRAME_DIM};
use crate::tensor::{cosine_lr, AdamConfig, AdamState, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub decay: f64,
    pub reset_window: usize,
    pub reset_threshold: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            latent_dim: 64,
            hidden: 64,
            decay: 0.99,
            reset_window: 256,
            reset_threshold: 1,
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqLogEntry {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub embed: f64,
    pub commit: f64,
    pub codes_reset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    /// Validation reconstruction MSE in body-lengths squared.
    pub val_mse: f64,
    /// MSE of predicting the mean training pose for every validation frame.
    pub mean_pose_mse: f64,
    /// `exp(entropy)` of validation code usage.
    pub perplexity: f64,
    pub codes_used: usize,
    pub steps: usize,
    pub log: Vec<VqLogEntry>,
}

const STD_FLOOR: f64 = 0.05;

fn frame_stats(data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let mut sum = [0.0; FRAME_DIM];
    let mut sq = [0.0; FRAME_DIM];
    let mut n = 0.0;
    for clip in &data.clips {
        for row in clip.frames.values.chunks(FRAME_DIM) {
            for j in 0..FRAME_DIM {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

impl VqConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VqError::Config(m.to_string()));
        if self.codebook_size == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return bad("codebook_size, latent_dim and hidden must be positive");
        }
        if self.batch_size == 0 || self.steps == 0 || self.reset_window == 0 {
            return bad("steps, batch_size and reset_window must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

/// Trains encoder, decoder and codebook on `train`, then measures `val`.
pub fn train_tokenizer(train: &Dataset, val: &Dataset, cfg: &VqConfig) -> Result<(VqModel, TokenizerReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(VqError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (frame_mean, frame_std) = frame_stats(train);
    let mut model = VqModel {
        params: init_params(cfg, &mut rng)?,
        codebook: Codebook::from_codes(Tensor::zeros(&[cfg.codebook_size, cfg.latent_dim]), cfg.decay)?,
        frame_mean,
        frame_std,
    };
    let normalized: Vec<Tensor> = train.clips.iter().map(|c| model.normalize(&c.frames)).collect();
    for clip in &train.clips {
        VqModel::check_frames(&clip.frames)?;
    }
    let mut adam = AdamState::new(&model.params, AdamConfig::default());
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..normalized.len())).collect();
        let lens: Vec<usize> = picks.iter().map(|&i| normalized[i].rows()).collect();
        let token_lens: Vec<usize> = lens.iter().map(|l| l / model.downsample()).collect();
        let mut values = Vec::with_capacity(lens.iter().sum::<usize>() * FRAME_DIM);
        for &i in &picks {
            values.extend_from_slice(&normalized[i].values);
        }
        let batch = Tensor {
            shape: vec![lens.iter().sum(), FRAME_DIM],
            values,
        };

        let tape = Tape::new();
        let x = tape.constant(batch);
        let z = encoder(&tape, &model.params, x, &lens)?;
        let latents = z.value();
        if step == 0 {
            model.codebook = Codebook::init_from_latents(cfg.codebook_size, &latents, cfg.decay, &mut rng)?;
        }
        let (assign, zq) = model.codebook.quantize(&latents)?;
        let zq = tape.constant(zq);
        let straight_through = z.add(zq.sub(z.detach())?)?;
        let x_hat = decoder(&tape, &model.params, straight_through, &token_lens)?;
        let loss = vq_loss(x, x_hat, z, zq)?;
        let total = loss.total.item();
        if !total.is_finite() {
            return Err(VqError::Diverged { step, loss: total });
        }
        tape.backward(loss.total)?;
        model.params.zero_grad();
        model.params.absorb_grads(&tape)?;
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)?;
        adam.step(&mut model.params, lr)?;

        model.codebook.ema_update(&latents, &assign)?;
        let mut codes_reset = 0;
        if (step + 1) % cfg.reset_window == 0 && step + 1 < cfg.steps {
            codes_reset = model.codebook.reset_dead_codes(&latents, cfg.reset_threshold, &mut rng)?;
        }
        let entry = VqLogEntry {
            step,
            lr,
            total,
            recon: loss.recon.item(),
            embed: loss.embed.item(),
            commit: loss.commit.item(),
            codes_reset,
        };
        if step % 200 == 0 || step + 1 == cfg.steps {
            log::info!(
                "tokenizer step {step}: total {:.4} recon {:.4} commit {:.4} resets {codes_reset}",
                entry.total,
                entry.recon,
                entry.commit
            );
        }
        log.push(entry);
    }

    let (val_mse, mean_pose_mse, indices) = evaluate(&model, val)?;
    let mut used = indices.clone();
    used.sort_unstable();
    used.dedup();
    let report = TokenizerReport {
        val_mse,
        mean_pose_mse,
        perplexity: perplexity(&indices, model.codebook_size()),
        codes_used: used.len(),
        steps: cfg.steps,
        log,
    };
    Ok((model, report))
}

/// `(reconstruction MSE, mean-pose MSE, all token indices)` over a dataset.
pub(crate) fn evaluate(model: &VqModel, data: &Dataset) -> Result<(f64, f64, Vec<usize>)> {
    let per_clip: Vec<(f64, f64, usize, Vec<usize>)> = data
        .clips
        .par_iter()
        .map(|clip| {
            let idx = model.tokenize(&clip.frames)?;
            let rec = model.decode(&idx)?;
            let mut se = 0.0;
            let mut base = 0.0;
            for (r, (a, b)) in clip.frames.values.iter().zip(&rec.values).enumerate() {
                se += (a - b) * (a - b);
                let m = model.frame_mean[r % FRAME_DIM];
                base += (a - m) * (a - m);
            }
            Ok((se, base, clip.frames.len(), idx))
        })
        .collect::<Result<_>>()?;
    let mut se = 0.0;
    let mut base = 0.0;
    let mut n = 0usize;
    let mut indices = Vec::new();
    for (s, b, c, idx) in per_clip {
        se += s;
        base += b;
        n += c;
        indices.extend(idx);
    }
    Ok((se / n as f64, base / n as f64, indices))
}
