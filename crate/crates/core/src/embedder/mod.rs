//! Contrastive motion/text dual encoder sharing one embedding space.
//!
//! The motion branch runs a per-frame MLP over normalized coordinates, velocities
//! and a clip-relative phase code, mean-pools over time and projects to `embed_dim`.
//! The text branch mean-pools hashed unigram and bigram embeddings and projects to
//! the same dimension. Training minimizes a symmetric InfoNCE loss with a learnable
//! logit scale.

mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use train::{train_embedder, EmbedderLogEntry, EmbedderReport};

use crate::synthdata::{text_tokens, FRAME_DIM};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("cannot embed a clip with shape {0:?}")]
    Clip(Vec<usize>),
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    Batch(usize),
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub text_buckets: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 128,
            text_buckets: 2048,
            temperature: 0.07,
            steps: 1500,
            batch_size: 32,
            lr: 1e-3,
            lr_min: 1e-5,
            seed: 0,
        }
    }
}

const PHASE_FEATURES: usize = 4;
pub const MOTION_FEATURES: usize = 2 * FRAME_DIM + PHASE_FEATURES;
const TEXT_WIDTH: usize = 64;
const LOGIT_SCALE: &str = "logit_scale";
/// Upper bound on the learned inverse temperature.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
const INIT_PROJ_GAIN: f64 = 0.1;
const FEAT_MEAN: &str = "feat.mean";
const FEAT_STD: &str = "feat.std";

/// Per-frame features `[T, MOTION_FEATURES]`: coordinates, frame-to-frame deltas
/// (zero at the first frame) and sine/cosine codes of the clip-relative phase.
pub fn motion_features(frames: &Tensor) -> Result<Tensor> {
    if frames.shape.len() != 2 || frames.shape[1] != FRAME_DIM || frames.shape[0] == 0 {
        return Err(EmbedError::Clip(frames.shape.clone()));
    }
    let t = frames.shape[0];
    let mut values = Vec::with_capacity(t * MOTION_FEATURES);
    for r in 0..t {
        let row = frames.row(r);
        values.extend_from_slice(row);
        if r == 0 {
            values.extend(std::iter::repeat_n(0.0, FRAME_DIM));
        } else {
            values.extend(row.iter().zip(frames.row(r - 1)).map(|(a, b)| a - b));
        }
        let phase = std::f64::consts::PI * (r as f64 + 0.5) / t as f64;
        values.extend([phase.sin(), phase.cos(), (2.0 * phase).sin(), (2.0 * phase).cos()]);
    }
    Ok(Tensor {
        shape: vec![t, MOTION_FEATURES],
        values,
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Hash buckets of the lowercase words and adjacent word pairs of a text; punctuation is ignored.
pub fn text_buckets(text: &str, buckets: usize) -> Vec<usize> {
    let words: Vec<String> = text_tokens(text)
        .into_iter()
        .filter(|w| *w != "," && *w != ".")
        .map(str::to_lowercase)
        .collect();
    let mut out: Vec<usize> = words.iter().map(|w| (fnv1a(w.as_bytes()) % buckets as u64) as usize).collect();
    for pair in words.windows(2) {
        let key = format!("{} {}", pair[0], pair[1]);
        out.push((fnv1a(key.as_bytes()) % buckets as u64) as usize);
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if a.len() != b.len() || na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: EmbedderConfig,
    pub params: ParamStore,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
}

impl DualEncoder {
    pub fn new<R: Rng>(config: EmbedderConfig, rng: &mut R) -> Result<Self> {
        let EmbedderConfig {
            embed_dim: e,
            hidden: h,
            text_buckets: b,
            temperature,
            ..
        } = config;
        if e == 0 || h == 0 || b == 0 || !(temperature > 0.0) {
            return Err(EmbedError::Config(format!(
                "embed_dim, hidden and text_buckets must be positive and temperature > 0, got {config:?}"
            )));
        }
        let mut p = ParamStore::new();
        let glorot = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        p.insert_normal("motion.w1", &[MOTION_FEATURES, h], glorot(MOTION_FEATURES, h), rng)?;
        p.insert_const("motion.b1", &[h], 0.0)?;
        p.insert_normal("motion.w2", &[h, h], glorot(h, h), rng)?;
        p.insert_const("motion.b2", &[h], 0.0)?;
        // Both branches start from one shared output offset with small input-dependent
        // parts, so initial similarities are nearly uniform across the batch.
        let offset: Vec<f64> = (0..e).map(|_| rng.sample::<f64, _>(StandardNormal) / (e as f64).sqrt()).collect();
        let offset = Tensor::new(vec![e], offset)?;
        p.insert_normal("motion.proj", &[h, e], INIT_PROJ_GAIN * glorot(h, e), rng)?;
        p.insert("motion.proj_b", offset.clone())?;
        p.insert_normal("text.emb", &[b, TEXT_WIDTH], 0.1, rng)?;
        p.insert_normal("text.w1", &[TEXT_WIDTH, h], glorot(TEXT_WIDTH, h), rng)?;
        p.insert_const("text.b1", &[h], 0.0)?;
        p.insert_normal("text.proj", &[h, e], INIT_PROJ_GAIN * glorot(h, e), rng)?;
        p.insert("text.proj_b", offset)?;
        p.insert_const(LOGIT_SCALE, &[1], (1.0 / temperature).ln())?;
        Ok(Self {
            config,
            params: p,
            feat_mean: vec![0.0; MOTION_FEATURES],
            feat_std: vec![1.0; MOTION_FEATURES],
        })
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.get(LOGIT_SCALE).map(|p| p.value[0].exp()).unwrap_or(f64::NAN)
    }

    /// Normalized feature rows for a batch of clips, stacked, with per-clip `(start, len)`.
    fn motion_input(&self, clips: &[&Tensor]) -> Result<(Tensor, Vec<(usize, usize)>)> {
        let mut values = Vec::new();
        let mut segments = Vec::with_capacity(clips.len());
        let mut start = 0;
        for clip in clips {
            let f = motion_features(clip)?;
            let n = f.rows();
            for row in f.values.chunks(MOTION_FEATURES) {
                values.extend(
                    row.iter()
                        .zip(self.feat_mean.iter().zip(&self.feat_std))
                        .map(|(v, (m, s))| (v - m) / s),
                );
            }
            segments.push((start, n));
            start += n;
        }
        Ok((
            Tensor {
                shape: vec![start, MOTION_FEATURES],
                values,
            },
            segments,
        ))
    }

    /// Motion embeddings `[clips, embed_dim]` on the tape.
    pub fn motion_branch<'t>(&self, tape: &'t Tape, clips: &[&Tensor]) -> Result<Var<'t>> {
        let (x, segments) = self.motion_input(clips)?;
        let p = |n: &str| tape.param(&self.params, n);
        let h = tape
            .constant(x)
            .matmul(p("motion.w1")?)?
            .add(p("motion.b1")?)?
            .gelu()
            .matmul(p("motion.w2")?)?
            .add(p("motion.b2")?)?
            .gelu();
        Ok(h.segment_mean(&segments)?.matmul(p("motion.proj")?)?.add(p("motion.proj_b")?)?)
    }

    /// Text embeddings `[texts, embed_dim]` on the tape.
    pub fn text_branch<'t>(&self, tape: &'t Tape, texts: &[&str]) -> Result<Var<'t>> {
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(texts.len());
        for text in texts {
            let b = text_buckets(text, self.config.text_buckets);
            if b.is_empty() {
                return Err(EmbedError::EmptyText);
            }
            segments.push((ids.len(), b.len()));
            ids.extend(b);
        }
        let p = |n: &str| tape.param(&self.params, n);
        let pooled = p("text.emb")?.embedding(&ids)?.segment_mean(&segments)?;
        let h = pooled.matmul(p("text.w1")?)?.add(p("text.b1")?)?.gelu();
        Ok(h.matmul(p("text.proj")?)?.add(p("text.proj_b")?)?)
    }

    /// Symmetric InfoNCE over matched `(clip, text)` pairs; every other pair in the batch is a negative.
    pub fn info_nce<'t>(&self, tape: &'t Tape, clips: &[&Tensor], texts: &[&str]) -> Result<Var<'t>> {
        if clips.len() < 2 || clips.len() != texts.len() {
            return Err(EmbedError::Batch(clips.len().min(texts.len())));
        }
        let m = self.motion_branch(tape, clips)?;
        let t = self.text_branch(tape, texts)?;
        let scale = tape.param(&self.params, LOGIT_SCALE)?;
        Ok(contrastive_loss(m, t, scale)?)
    }

    pub fn embed_motions(&self, clips: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        if clips.is_empty() {
            return Ok(Vec::new());
        }
        let v = self.motion_branch(&Tape::new(), clips)?.value();
        Ok(v.values.chunks(self.dim()).map(<[f64]>::to_vec).collect())
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let v = self.text_branch(&Tape::new(), texts)?.value();
        Ok(v.values.chunks(self.dim()).map(<[f64]>::to_vec).collect())
    }

    pub fn embed_motion(&self, frames: &Tensor) -> Result<Vec<f64>> {
        Ok(self.embed_motions(&[frames])?.remove(0))
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_texts(&[text])?.remove(0))
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let mut out = self.params.to_tensors();
        out.push((
            FEAT_MEAN.into(),
            Tensor {
                shape: vec![MOTION_FEATURES],
                values: self.feat_mean.clone(),
            },
        ));
        out.push((
            FEAT_STD.into(),
            Tensor {
                shape: vec![MOTION_FEATURES],
                values: self.feat_std.clone(),
            },
        ));
        out.push((
            "meta.config".into(),
            Tensor {
                shape: vec![4],
                values: vec![c.embed_dim as f64, c.hidden as f64, c.text_buckets as f64, c.temperature],
            },
        ));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &ParamStore::from_tensors(self.to_tensors())?)?;
        Ok(())
    }

    /// Loads a checkpoint with every parameter frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let store = load_checkpoint(path)?;
        let mut params = ParamStore::new();
        let mut extra = std::collections::HashMap::new();
        for (name, t) in store.to_tensors() {
            if name.starts_with("feat.") || name.starts_with("meta.") {
                extra.insert(name, t);
            } else {
                params.insert(&name, t)?;
            }
        }
        params.freeze();
        let mut take = |name: &str| {
            extra.remove(name).ok_or_else(|| TensorError::Checkpoint {
                path: path.display().to_string(),
                msg: format!("missing entry `{name}`"),
            })
        };
        let mean = take(FEAT_MEAN)?;
        let std = take(FEAT_STD)?;
        let meta = take("meta.config")?.values;
        let config = EmbedderConfig {
            embed_dim: meta[0] as usize,
            hidden: meta[1] as usize,
            text_buckets: meta[2] as usize,
            temperature: meta[3],
            ..EmbedderConfig::default()
        };
        Ok(Self {
            config,
            params,
            feat_mean: mean.values,
            feat_std: std.values,
        })
    }
}

/// Mean of the two cross-entropies of `exp(scale) · cos(m_i, t_j)` with the diagonal as targets.
pub fn contrastive_loss<'t>(motion: Var<'t>, text: Var<'t>, log_scale: Var<'t>) -> crate::tensor::Result<Var<'t>> {
    let n = motion.shape()[0];
    let sim = motion.normalize_rows().matmul(text.normalize_rows().transpose()?)?;
    let logits = sim.mul(log_scale.exp())?;
    let targets: Vec<usize> = (0..n).collect();
    let mask = vec![true; n];
    let a = logits.cross_entropy(&targets, &mask)?;
    let b = logits.transpose()?.cross_entropy(&targets, &mask)?;
    Ok(a.add(b)?.scale(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(t: usize, phase: f64) -> Tensor {
        Tensor {
            shape: vec![t, FRAME_DIM],
            values: (0..t * FRAME_DIM).map(|i| (i as f64 * 0.13 + phase).sin()).collect(),
        }
    }

    fn model() -> DualEncoder {
        DualEncoder::new(EmbedderConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn features_layout() {
        let f = motion_features(&clip(4, 0.0)).unwrap();
        assert_eq!(f.shape, vec![4, MOTION_FEATURES]);
        assert!(f.row(0)[FRAME_DIM..2 * FRAME_DIM].iter().all(|v| *v == 0.0));
        let c = clip(4, 0.0);
        assert_eq!(f.row(2)[FRAME_DIM], c.row(2)[0] - c.row(1)[0]);
        assert!(motion_features(&Tensor::zeros(&[0, FRAME_DIM])).is_err());
    }

    #[test]
    fn deterministic_embeddings_and_self_cosine() {
        let m = model();
        let a = m.embed_motion(&clip(16, 0.3)).unwrap();
        let b = m.embed_motion(&clip(16, 0.3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        assert!((cosine(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let t = m.embed_text("a person walks forward").unwrap();
        assert_eq!(t.len(), a.len());
        assert!(matches!(m.embed_text(" . "), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn batched_matches_single() {
        let m = model();
        let c1 = clip(16, 0.1);
        let c2 = clip(32, 0.7);
        let both = m.embed_motions(&[&c1, &c2]).unwrap();
        assert!(both[1].iter().zip(m.embed_motion(&c2).unwrap()).all(|(a, b)| (a - b).abs() < 1e-12));
        let texts = m.embed_texts(&["a man jumps", "someone waves"]).unwrap();
        assert_eq!(texts[0], m.embed_text("a man jumps").unwrap());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), None);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let m = model();
        let c = clip(16, 0.0);
        assert!(matches!(m.info_nce(&Tape::new(), &[&c], &["a person"]), Err(EmbedError::Batch(1))));
    }

    #[test]
    fn contrastive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let point = Tensor {
            shape: vec![4 * 3 + 4 * 3 + 1],
            values: (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let r = grad_check(
            |_, x| {
                let m = x.slice(0, 0, 12)?.reshape(&[4, 3])?;
                let t = x.slice(0, 12, 12)?.reshape(&[4, 3])?;
                let s = x.slice(0, 24, 1)?;
                contrastive_loss(m, t, s)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.ckpt");
        m.save(&p).unwrap();
        let l = DualEncoder::load(&p).unwrap();
        assert!(l.params.is_frozen());
        assert_eq!(l.embed_text("someone jumps").unwrap(), m.embed_text("someone jumps").unwrap());
        let c = clip(16, 0.2);
        assert_eq!(l.embed_motion(&c).unwrap(), m.embed_motion(&c).unwrap());
    }
}
