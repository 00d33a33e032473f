//! Motion tokenizer: a 1-D convolutional VQ-VAE with an EMA-maintained codebook.
//!
//! Clips of `T` frames become `T / DOWNSAMPLE` discrete tokens; the decoder maps
//! tokens back to frames. Batches are processed as concatenated frame rows with
//! per-clip lengths so convolutions never mix neighbouring clips.

mod codebook;
mod network;
mod train;

use std::path::Path;

use thiserror::Error;

pub use codebook::{perplexity, Codebook};
pub use network::{vq_loss, VqLoss};
pub use train::{train_tokenizer, TokenizerReport, VqConfig};

use crate::synthdata::{SynthError, DOWNSAMPLE, FRAME_DIM};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VqError {
    #[error("clip length T={t} is not a multiple of the downsample factor l={l}")]
    Length { t: usize, l: usize },
    #[error("motion token at position {position} has index {index}, codebook size is {k}")]
    TokenRange { position: usize, index: usize, k: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid tokenizer config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, VqError>;

/// Encoder output for one clip: `[T / l, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub latents: Tensor,
    pub downsample: usize,
}

/// Encoder, decoder, input normalization and codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct VqModel {
    pub params: ParamStore,
    pub codebook: Codebook,
    /// Per-coordinate mean and standard deviation of training frames.
    pub frame_mean: Vec<f64>,
    pub frame_std: Vec<f64>,
}

const CODES: &str = "codebook.codes";
const COUNTS: &str = "codebook.ema_counts";
const SUMS: &str = "codebook.ema_sums";
const USAGE: &str = "codebook.usage";
const DECAY: &str = "codebook.decay";
const MEAN: &str = "norm.mean";
const STD: &str = "norm.std";

impl VqModel {
    pub fn downsample(&self) -> usize {
        DOWNSAMPLE
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.size()
    }

    /// Randomly initialized network with standard-normal codes and identity normalization.
    pub fn untrained<R: rand::Rng>(cfg: &VqConfig, rng: &mut R) -> Result<Self> {
        let params = network::init_params(cfg, rng)?;
        let n = cfg.codebook_size * cfg.latent_dim;
        let codes = Tensor {
            shape: vec![cfg.codebook_size, cfg.latent_dim],
            values: (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
        };
        Ok(Self {
            params,
            codebook: Codebook::from_codes(codes, cfg.decay)?,
            frame_mean: vec![0.0; FRAME_DIM],
            frame_std: vec![1.0; FRAME_DIM],
        })
    }

    fn normalize(&self, frames: &Tensor) -> Tensor {
        let mut out = frames.clone();
        for row in out.values.chunks_mut(FRAME_DIM) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.frame_mean[j]) / self.frame_std[j];
            }
        }
        out
    }

    fn denormalize(&self, frames: &mut Tensor) {
        for row in frames.values.chunks_mut(FRAME_DIM) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.frame_std[j] + self.frame_mean[j];
            }
        }
    }

    fn check_frames(frames: &Tensor) -> Result<()> {
        if frames.shape.len() != 2 || frames.shape[1] != FRAME_DIM {
            return Err(VqError::Shape(format!("frames {:?}, expected [T, {FRAME_DIM}]", frames.shape)));
        }
        let t = frames.shape[0];
        if t == 0 || !t.is_multiple_of(DOWNSAMPLE) {
            return Err(VqError::Length { t, l: DOWNSAMPLE });
        }
        Ok(())
    }

    /// `[T, 16]` frames to `[T / l, d]` latents.
    pub fn encode(&self, frames: &Tensor) -> Result<LatentSeq> {
        Self::check_frames(frames)?;
        let tape = Tape::new();
        let x = tape.constant(self.normalize(frames));
        let z = network::encoder(&tape, &self.params, x, &[frames.shape[0]])?;
        Ok(LatentSeq {
            latents: z.value(),
            downsample: DOWNSAMPLE,
        })
    }

    pub fn quantize(&self, z: &LatentSeq) -> Result<(Vec<usize>, Tensor)> {
        self.codebook.quantize(&z.latents)
    }

    /// Frames to motion token indices.
    pub fn tokenize(&self, frames: &Tensor) -> Result<Vec<usize>> {
        Ok(self.quantize(&self.encode(frames)?)?.0)
    }

    /// Quantized latents `[n, d]` to frames `[n * l, 16]`.
    pub fn decode_latents(&self, zq: &Tensor) -> Result<Tensor> {
        if zq.rows() == 0 || zq.cols() != self.codebook.dim() {
            return Err(VqError::Shape(format!("quantized latents {:?}", zq.shape)));
        }
        let tape = Tape::new();
        let z = tape.constant(zq.clone());
        let out = network::decoder(&tape, &self.params, z, &[zq.rows()])?;
        let mut frames = out.value();
        self.denormalize(&mut frames);
        Ok(frames)
    }

    /// Token indices to frames; every index must be below K.
    pub fn decode(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(VqError::EmptyBatch);
        }
        self.decode_latents(&self.codebook.lookup(indices)?)
    }

    /// Encode, quantize and decode.
    pub fn reconstruct(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, zq) = self.quantize(&self.encode(frames)?)?;
        self.decode_latents(&zq)
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let k = self.codebook.size();
        let d = self.codebook.dim();
        let mut out = self.params.to_tensors();
        out.push((CODES.into(), self.codebook.codes.clone()));
        out.push((
            COUNTS.into(),
            Tensor {
                shape: vec![k],
                values: self.codebook.ema_counts.clone(),
            },
        ));
        out.push((
            SUMS.into(),
            Tensor {
                shape: vec![k, d],
                values: self.codebook.ema_sums.clone(),
            },
        ));
        out.push((
            USAGE.into(),
            Tensor {
                shape: vec![k],
                values: self.codebook.usage.iter().map(|&u| u as f64).collect(),
            },
        ));
        out.push((
            DECAY.into(),
            Tensor {
                shape: vec![1],
                values: vec![self.codebook.decay],
            },
        ));
        out.push((
            MEAN.into(),
            Tensor {
                shape: vec![FRAME_DIM],
                values: self.frame_mean.clone(),
            },
        ));
        out.push((
            STD.into(),
            Tensor {
                shape: vec![FRAME_DIM],
                values: self.frame_std.clone(),
            },
        ));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let store = ParamStore::from_tensors(self.to_tensors())?;
        save_checkpoint(path, &store)?;
        Ok(())
    }

    /// Loads a checkpoint with every parameter frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let store = load_checkpoint(path)?;
        let mut params = ParamStore::new();
        let mut extra = std::collections::HashMap::new();
        for (name, t) in store.to_tensors() {
            if name.starts_with("codebook.") || name.starts_with("norm.") {
                extra.insert(name, t);
            } else {
                params.insert(&name, t)?;
            }
        }
        params.freeze();
        let mut take = |name: &str| {
            extra.remove(name).ok_or_else(|| {
                VqError::Tensor(TensorError::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!("missing entry `{name}`"),
                })
            })
        };
        let codes = take(CODES)?;
        let counts = take(COUNTS)?;
        let sums = take(SUMS)?;
        let usage = take(USAGE)?;
        let decay = take(DECAY)?;
        let mean = take(MEAN)?;
        let std = take(STD)?;
        let mut codebook = Codebook::from_codes(codes, decay.values[0])?;
        codebook.ema_counts = counts.values;
        codebook.ema_sums = sums.values;
        codebook.usage = usage.values.iter().map(|&u| u as u64).collect();
        Ok(Self {
            params,
            codebook,
            frame_mean: mean.values,
            frame_std: std.values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_model(seed: u64) -> VqModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = VqConfig {
            codebook_size: 8,
            ..VqConfig::default()
        };
        let params = network::init_params(&cfg, &mut rng).unwrap();
        let codes = Tensor {
            shape: vec![8, cfg.latent_dim],
            values: (0..8 * cfg.latent_dim).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect(),
        };
        VqModel {
            params,
            codebook: Codebook::from_codes(codes, 0.99).unwrap(),
            frame_mean: vec![0.0; FRAME_DIM],
            frame_std: vec![1.0; FRAME_DIM],
        }
    }

    fn frames(t: usize) -> Tensor {
        Tensor {
            shape: vec![t, FRAME_DIM],
            values: (0..t * FRAME_DIM).map(|i| (i as f64 * 0.37).sin()).collect(),
        }
    }

    #[test]
    fn encode_shapes_and_length_check() {
        let m = tiny_model(0);
        assert_eq!(m.encode(&frames(64)).unwrap().latents.shape, vec![16, 64]);
        assert_eq!(m.encode(&frames(16)).unwrap().latents.shape, vec![4, 64]);
        let e = m.encode(&frames(17)).unwrap_err().to_string();
        assert!(e.contains("T=17") && e.contains("l=4"), "{e}");
    }

    #[test]
    fn decode_shapes_and_range_check() {
        let m = tiny_model(1);
        assert_eq!(m.decode(&[0, 1, 2, 3]).unwrap().shape, vec![16, 16]);
        assert_eq!(m.reconstruct(&frames(32)).unwrap().shape, vec![32, 16]);
        let e = m.decode(&[1, 8]).unwrap_err().to_string();
        assert!(e.contains("position 1") && e.contains("index 8"), "{e}");
    }

    #[test]
    fn checkpoint_round_trip_freezes() {
        let m = tiny_model(2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vq.ckpt");
        m.save(&p).unwrap();
        let l = VqModel::load(&p).unwrap();
        assert!(l.params.is_frozen());
        assert_eq!(l.codebook, m.codebook);
        assert_eq!(l.params.to_tensors(), m.params.to_tensors());
        assert_eq!(l.decode(&[3, 1]).unwrap(), m.decode(&[3, 1]).unwrap());
    }
}
