use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::prompt::MixedSequence;
use super::{LmError, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tape, Tensor, TensorError, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            context: 256,
        }
    }
}

/// Pre-norm decoder-only transformer with learned positions and an untied output head.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    pub config: LmConfig,
    pub params: ParamStore,
}

pub(crate) fn blk(i: usize, name: &str) -> String {
    format!("blk{i}.{name}")
}

const META: &str = "meta.config";

impl TinyLM {
    pub fn new<R: Rng>(config: LmConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let LmConfig {
            layers,
            heads,
            d_model: d,
            d_ff: ff,
            context,
        } = config;
        if heads == 0 || d % heads != 0 || layers == 0 || context == 0 || vocab_size == 0 {
            return Err(LmError::Invalid(format!("unusable model config {config:?} for vocab {vocab_size}")));
        }
        let std = 0.02;
        let proj_std = std / (2.0 * layers as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert_normal("tok_emb", &[vocab_size, d], std, rng)?;
        p.insert_normal("pos_emb", &[context, d], std, rng)?;
        for i in 0..layers {
            p.insert_const(&blk(i, "ln1.g"), &[d], 1.0)?;
            p.insert_const(&blk(i, "ln1.b"), &[d], 0.0)?;
            for w in ["attn.q", "attn.k", "attn.v"] {
                p.insert_normal(&blk(i, w), &[d, d], std, rng)?;
            }
            p.insert_normal(&blk(i, "attn.o"), &[d, d], proj_std, rng)?;
            p.insert_const(&blk(i, "ln2.g"), &[d], 1.0)?;
            p.insert_const(&blk(i, "ln2.b"), &[d], 0.0)?;
            p.insert_normal(&blk(i, "mlp.w1"), &[d, ff], std, rng)?;
            p.insert_const(&blk(i, "mlp.b1"), &[ff], 0.0)?;
            p.insert_normal(&blk(i, "mlp.w2"), &[ff, d], proj_std, rng)?;
            p.insert_const(&blk(i, "mlp.b2"), &[d], 0.0)?;
        }
        p.insert_const("ln_f.g", &[d], 1.0)?;
        p.insert_const("ln_f.b", &[d], 0.0)?;
        p.insert_normal("head.w", &[d, vocab_size], std, rng)?;
        p.insert_const("head.b", &[vocab_size], 0.0)?;
        Ok(Self { config, params: p })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get("tok_emb").map(|p| p.shape[0]).unwrap_or(0)
    }

    /// Appends `n_new` vocabulary rows. Each new input embedding is the mean of the
    /// existing rows; new output-head columns and biases are likewise mean-initialized.
    pub fn expand_vocab(&mut self, n_new: usize) -> Result<()> {
        let v = self.vocab_size();
        let d = self.config.d_model;
        {
            let emb = self.params.get_mut("tok_emb")?;
            let mean: Vec<f64> = (0..d)
                .map(|j| (0..v).map(|r| emb.value[r * d + j]).sum::<f64>() / v as f64)
                .collect();
            for _ in 0..n_new {
                emb.value.extend_from_slice(&mean);
            }
            emb.shape = vec![v + n_new, d];
            emb.grad = vec![0.0; emb.value.len()];
        }
        {
            let head = self.params.get_mut("head.w")?;
            let mut value = Vec::with_capacity(d * (v + n_new));
            for r in 0..d {
                let row = &head.value[r * v..(r + 1) * v];
                let mean = row.iter().sum::<f64>() / v as f64;
                value.extend_from_slice(row);
                value.extend(std::iter::repeat_n(mean, n_new));
            }
            head.value = value;
            head.shape = vec![d, v + n_new];
            head.grad = vec![0.0; head.value.len()];
        }
        {
            let bias = self.params.get_mut("head.b")?;
            let mean = bias.value.iter().sum::<f64>() / v as f64;
            bias.value.extend(std::iter::repeat_n(mean, n_new));
            bias.shape = vec![v + n_new];
            bias.grad = vec![0.0; bias.value.len()];
        }
        Ok(())
    }

    fn check_lengths(&self, seqs: &[&[usize]], starts: &[usize]) -> Result<()> {
        if seqs.is_empty() || starts.len() != seqs.len() {
            return Err(LmError::Invalid("empty batch or missing start positions".into()));
        }
        for (s, &p) in seqs.iter().zip(starts) {
            if s.is_empty() || p + s.len() > self.config.context {
                return Err(LmError::Context {
                    len: p + s.len(),
                    context: self.config.context,
                });
            }
        }
        Ok(())
    }

    /// Next-token logits `[Σ len, V]` for a batch of sequences stacked row-wise.
    pub fn forward<'t>(&self, tape: &'t Tape, seqs: &[&[usize]]) -> Result<Var<'t>> {
        self.forward_at(tape, seqs, &vec![0; seqs.len()])
    }

    /// As [`TinyLM::forward`], with sequence `i` occupying positions `starts[i]..starts[i] + len`.
    pub fn forward_at<'t>(&self, tape: &'t Tape, seqs: &[&[usize]], starts: &[usize]) -> Result<Var<'t>> {
        self.forward_impl(tape, seqs, starts, None)
    }

    /// Training-mode forward: inverted dropout with rate `dropout` on the embeddings and on
    /// every residual branch.
    pub fn forward_train<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        seqs: &[&[usize]],
        starts: &[usize],
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(LmError::Invalid(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        self.forward_impl(tape, seqs, starts, Some((dropout, rng as &mut dyn RngCore)))
    }

    fn forward_impl<'t>(
        &self,
        tape: &'t Tape,
        seqs: &[&[usize]],
        starts: &[usize],
        mut dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var<'t>> {
        self.check_lengths(seqs, starts)?;
        let mut drop = |x: Var<'t>| -> Result<Var<'t>> {
            match dropout.as_mut() {
                Some((p, rng)) if *p > 0.0 => {
                    let keep = 1.0 - *p;
                    let shape = x.shape();
                    let n = shape.iter().product();
                    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                    Ok(x.mul(tape.constant(Tensor::new(shape, mask)?))?)
                }
                _ => Ok(x),
            }
        };
        let LmConfig {
            layers, heads, d_model, ..
        } = self.config;
        let dh = d_model / heads;
        let p = |name: &str| tape.param(&self.params, name);
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = seqs.iter().zip(starts).flat_map(|(s, &p)| p..p + s.len()).collect();
        let mut x = drop(p("tok_emb")?.embedding(&ids)?.add(p("pos_emb")?.embedding(&positions)?)?)?;
        let scale = 1.0 / (dh as f64).sqrt();
        for i in 0..layers {
            let h = x.layer_norm(p(&blk(i, "ln1.g"))?, p(&blk(i, "ln1.b"))?, LN_EPS)?;
            let q = h.matmul(p(&blk(i, "attn.q"))?)?;
            let k = h.matmul(p(&blk(i, "attn.k"))?)?;
            let v = h.matmul(p(&blk(i, "attn.v"))?)?;
            let mut per_seq = Vec::with_capacity(seqs.len());
            let mut off = 0;
            for s in seqs {
                let n = s.len();
                let (qs, ks, vs) = (q.slice(0, off, n)?, k.slice(0, off, n)?, v.slice(0, off, n)?);
                let mut per_head = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let qh = qs.slice(1, hd * dh, dh)?;
                    let kh = ks.slice(1, hd * dh, dh)?;
                    let vh = vs.slice(1, hd * dh, dh)?;
                    let att = qh.matmul(kh.transpose()?)?.scale(scale).causal_mask()?.softmax();
                    per_head.push(att.matmul(vh)?);
                }
                per_seq.push(Var::concat(&per_head, 1)?);
                off += n;
            }
            let attn = drop(Var::concat(&per_seq, 0)?.matmul(p(&blk(i, "attn.o"))?)?)?;
            x = x.add(attn)?;
            let h = x.layer_norm(p(&blk(i, "ln2.g"))?, p(&blk(i, "ln2.b"))?, LN_EPS)?;
            let m = h
                .matmul(p(&blk(i, "mlp.w1"))?)?
                .add(p(&blk(i, "mlp.b1"))?)?
                .gelu()
                .matmul(p(&blk(i, "mlp.w2"))?)?
                .add(p(&blk(i, "mlp.b2"))?)?;
            x = x.add(drop(m)?)?;
        }
        let h = x.layer_norm(p("ln_f.g")?, p("ln_f.b")?, LN_EPS)?;
        Ok(h.matmul(p("head.w")?)?.add(p("head.b")?)?)
    }

    /// Mean cross-entropy of next-token prediction over supervised positions.
    pub fn sequence_loss<'t>(&self, tape: &'t Tape, batch: &[MixedSequence]) -> Result<Var<'t>> {
        self.sequence_loss_at(tape, batch, &vec![0; batch.len()])
    }

    /// As [`TinyLM::sequence_loss`], with per-sequence start positions and training-mode dropout.
    pub fn sequence_loss_train<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        batch: &[MixedSequence],
        starts: &[usize],
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let seqs: Vec<&[usize]> = batch.iter().map(|s| s.ids.as_slice()).collect();
        let logits = self.forward_train(tape, &seqs, starts, dropout, rng)?;
        Self::masked_loss(logits, batch)
    }

    fn sequence_loss_at<'t>(&self, tape: &'t Tape, batch: &[MixedSequence], starts: &[usize]) -> Result<Var<'t>> {
        let seqs: Vec<&[usize]> = batch.iter().map(|s| s.ids.as_slice()).collect();
        let logits = self.forward_at(tape, &seqs, starts)?;
        Self::masked_loss(logits, batch)
    }

    fn masked_loss<'t>(logits: Var<'t>, batch: &[MixedSequence]) -> Result<Var<'t>> {
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for s in batch {
            for t in 0..s.ids.len() {
                if t + 1 < s.ids.len() {
                    targets.push(s.ids[t + 1]);
                    mask.push(s.loss_mask[t + 1]);
                } else {
                    targets.push(0);
                    mask.push(false);
                }
            }
        }
        Ok(logits.cross_entropy(&targets, &mask)?)
    }

    /// Log-probability of each realized token `seq[t]` for `t` in `range`, per sequence,
    /// concatenated into one vector.
    pub fn token_logprobs<'t>(&self, tape: &'t Tape, seqs: &[&[usize]], ranges: &[std::ops::Range<usize>]) -> Result<Var<'t>> {
        if seqs.len() != ranges.len() {
            return Err(LmError::Invalid("one range per sequence required".into()));
        }
        let logits = self.forward(tape, seqs)?;
        let mut targets = Vec::new();
        let mut rows = Vec::new();
        let mut off = 0;
        for (s, r) in seqs.iter().zip(ranges) {
            if r.start == 0 || r.end > s.len() {
                return Err(LmError::Invalid(format!("range {r:?} invalid for length {}", s.len())));
            }
            for t in 0..s.len() {
                targets.push(if t + 1 < s.len() { s[t + 1] } else { 0 });
            }
            rows.extend(r.clone().map(|t| Some(off + t - 1)));
            off += s.len();
        }
        let all = logits.log_prob_gather(&targets)?;
        let n = all.shape()[0];
        Ok(all.reshape(&[n, 1])?.gather_rows(&rows)?.reshape(&[rows.len()])?)
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let c = self.config;
        let mut out = self.params.to_tensors();
        out.push((
            META.into(),
            Tensor {
                shape: vec![5],
                values: [c.layers, c.heads, c.d_model, c.d_ff, c.context].map(|v| v as f64).to_vec(),
            },
        ));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &ParamStore::from_tensors(self.to_tensors())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = load_checkpoint(path)?;
        let mut params = ParamStore::new();
        let mut meta = None;
        for (name, t) in store.to_tensors() {
            if name == META {
                meta = Some(t.values);
            } else {
                params.insert(&name, t)?;
            }
        }
        let m = meta.ok_or_else(|| TensorError::Checkpoint {
            path: path.display().to_string(),
            msg: format!("missing entry `{META}`"),
        })?;
        let config = LmConfig {
            layers: m[0] as usize,
            heads: m[1] as usize,
            d_model: m[2] as usize,
            d_ff: m[3] as usize,
            context: m[4] as usize,
        };
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(v: usize) -> TinyLM {
        let cfg = LmConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            context: 16,
        };
        TinyLM::new(cfg, v, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn dropout_is_seeded_and_off_at_zero() {
        let m = tiny(6);
        let seqs: [&[usize]; 2] = [&[1, 4, 5], &[1, 2]];
        let logits = |p: f64, seed: u64| {
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            m.forward_train(&tape, &seqs, &[2, 0], p, &mut rng).unwrap().value()
        };
        let tape = Tape::new();
        assert_eq!(logits(0.0, 1), m.forward_at(&tape, &seqs, &[2, 0]).unwrap().value());
        assert_eq!(logits(0.3, 1), logits(0.3, 1));
        assert_ne!(logits(0.3, 1), logits(0.3, 2));
        assert!(m
            .forward_train(&tape, &seqs, &[0, 0], 1.0, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn expansion_is_mean_initialized() {
        let mut m = tiny(6);
        let before = m.params.get("tok_emb").unwrap().value.clone();
        m.expand_vocab(3).unwrap();
        let emb = m.params.get("tok_emb").unwrap();
        assert_eq!(emb.shape, vec![9, 8]);
        for j in 0..8 {
            let mean = (0..6).map(|r| before[r * 8 + j]).sum::<f64>() / 6.0;
            for r in 6..9 {
                assert_eq!(emb.value[r * 8 + j], mean);
            }
        }
        assert_eq!(m.params.get("head.w").unwrap().shape, vec![8, 9]);
    }

    #[test]
    fn two_row_mean_example() {
        let mut m = tiny(2);
        m.params.get_mut("tok_emb").unwrap().value = [vec![1.0], vec![0.0; 7], vec![0.0, 1.0], vec![0.0; 6]].concat();
        m.expand_vocab(1).unwrap();
        let emb = m.params.get("tok_emb").unwrap();
        assert_eq!(&emb.value[16..18], &[0.5, 0.5]);
    }

    #[test]
    fn causal_perturbation() {
        let m = tiny(10);
        let a = [1usize, 4, 5, 6, 7];
        let mut b = a;
        b[3] = 9;
        let la = m.forward(&Tape::new(), &[&a]).unwrap().value();
        let lb = m.forward(&Tape::new(), &[&b]).unwrap().value();
        assert_eq!(&la.values[..3 * 10], &lb.values[..3 * 10]);
        assert_ne!(&la.values[3 * 10..], &lb.values[3 * 10..]);
    }

    #[test]
    fn batching_matches_single_sequences() {
        let m = tiny(10);
        let a = [1usize, 4, 5];
        let b = [2usize, 3, 8, 8, 1];
        let both = m.forward(&Tape::new(), &[&a, &b]).unwrap().value();
        let la = m.forward(&Tape::new(), &[&a]).unwrap().value();
        let lb = m.forward(&Tape::new(), &[&b]).unwrap().value();
        for (x, y) in both.values.iter().zip(la.values.iter().chain(&lb.values)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn context_overflow_names_lengths() {
        let m = tiny(4);
        let long = vec![1usize; 17];
        let e = m.forward(&Tape::new(), &[&long]).unwrap_err().to_string();
        assert!(e.contains("17") && e.contains("16"), "{e}");
    }
}
