use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{blk, TinyLM, LN_EPS};
use super::vocab::{BOS, EOS, PAD};
use super::{LmError, Result};
use crate::tensor::{gelu, log_softmax_at, softmax_in_place};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub max_new: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 50,
            max_new: 160,
        }
    }
}

impl SampleConfig {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            temperature: 1.0,
            top_k: 1,
            max_new,
        }
    }
}

struct Layer<'m> {
    ln1: (&'m [f64], &'m [f64]),
    q: &'m [f64],
    k: &'m [f64],
    v: &'m [f64],
    o: &'m [f64],
    ln2: (&'m [f64], &'m [f64]),
    w1: &'m [f64],
    b1: &'m [f64],
    w2: &'m [f64],
    b2: &'m [f64],
}

/// Incremental decoder with per-layer key/value caches; no autodiff.
pub struct Session<'m> {
    model: &'m TinyLM,
    tok_emb: &'m [f64],
    pos_emb: &'m [f64],
    layers: Vec<Layer<'m>>,
    ln_f: (&'m [f64], &'m [f64]),
    head_w: &'m [f64],
    head_b: &'m [f64],
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn vec_mat(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| (v - mean) * rstd * g + b).collect()
}

impl<'m> Session<'m> {
    pub fn new(model: &'m TinyLM) -> Result<Self> {
        let v = |name: &str| -> Result<&'m [f64]> { Ok(model.params.get(name)?.value.as_slice()) };
        let mut layers = Vec::with_capacity(model.config.layers);
        for i in 0..model.config.layers {
            layers.push(Layer {
                ln1: (v(&blk(i, "ln1.g"))?, v(&blk(i, "ln1.b"))?),
                q: v(&blk(i, "attn.q"))?,
                k: v(&blk(i, "attn.k"))?,
                v: v(&blk(i, "attn.v"))?,
                o: v(&blk(i, "attn.o"))?,
                ln2: (v(&blk(i, "ln2.g"))?, v(&blk(i, "ln2.b"))?),
                w1: v(&blk(i, "mlp.w1"))?,
                b1: v(&blk(i, "mlp.b1"))?,
                w2: v(&blk(i, "mlp.w2"))?,
                b2: v(&blk(i, "mlp.b2"))?,
            });
        }
        Ok(Self {
            model,
            tok_emb: v("tok_emb")?,
            pos_emb: v("pos_emb")?,
            ln_f: (v("ln_f.g")?, v("ln_f.b")?),
            head_w: v("head.w")?,
            head_b: v("head.b")?,
            keys: vec![Vec::new(); model.config.layers],
            values: vec![Vec::new(); model.config.layers],
            layers,
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = self.model.config;
        let vocab = self.model.vocab_size();
        if self.len >= cfg.context {
            return Err(LmError::Context {
                len: self.len + 1,
                context: cfg.context,
            });
        }
        if token >= vocab {
            return Err(LmError::Invalid(format!("token id {token} outside vocabulary of {vocab}")));
        }
        let d = cfg.d_model;
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = self.len;
        let mut x: Vec<f64> = self.tok_emb[token * d..(token + 1) * d]
            .iter()
            .zip(&self.pos_emb[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut hidden = vec![0.0; cfg.d_ff];
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, layer.ln1.0, layer.ln1.1);
            vec_mat(&h, layer.q, d, &mut q);
            vec_mat(&h, layer.k, d, &mut k);
            vec_mat(&h, layer.v, d, &mut v);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let n = pos + 1;
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hd in 0..cfg.heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                for (t, s) in scores.iter_mut().enumerate() {
                    let kh = &self.keys[li][t * d + hd * dh..t * d + (hd + 1) * dh];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                for (t, p) in scores.iter().enumerate() {
                    let vh = &self.values[li][t * d + hd * dh..t * d + (hd + 1) * dh];
                    for (a, b) in att[hd * dh..(hd + 1) * dh].iter_mut().zip(vh) {
                        *a += p * b;
                    }
                }
            }
            vec_mat(&att, layer.o, d, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            let h = layer_norm(&x, layer.ln2.0, layer.ln2.1);
            vec_mat(&h, layer.w1, cfg.d_ff, &mut hidden);
            hidden.iter_mut().zip(layer.b1).for_each(|(a, b)| *a = gelu(*a + b));
            vec_mat(&hidden, layer.w2, d, &mut proj);
            x.iter_mut().zip(proj.iter().zip(layer.b2)).for_each(|(a, (p, b))| *a += p + b);
        }
        let h = layer_norm(&x, self.ln_f.0, self.ln_f.1);
        let mut logits = vec![0.0; vocab];
        vec_mat(&h, self.head_w, vocab, &mut logits);
        logits.iter_mut().zip(self.head_b).for_each(|(l, b)| *l += b);
        self.len += 1;
        Ok(logits)
    }

    /// Feeds several tokens, returning the logits after the last one.
    pub fn feed(&mut self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut last = Err(LmError::Invalid("nothing to feed".into()));
        for &t in tokens {
            last = Ok(self.step(t)?);
        }
        last
    }
}

/// `log p(ids[t+1] | ids[..=t])` for every position but the last.
pub fn logprobs(model: &TinyLM, ids: &[usize]) -> Result<Vec<f64>> {
    if ids.len() > model.config.context {
        return Err(LmError::Context {
            len: ids.len(),
            context: model.config.context,
        });
    }
    let mut s = Session::new(model)?;
    let mut out = Vec::with_capacity(ids.len().saturating_sub(1));
    for w in ids.windows(2) {
        let logits = s.step(w[0])?;
        out.push(log_softmax_at(&logits, w[1]));
    }
    Ok(out)
}

/// A sampled continuation with the model's full-softmax log-probability of each token.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub ids: Vec<usize>,
    pub logprobs: Vec<f64>,
    /// Stopped by the context limit or `max_new` instead of EOS.
    pub truncated: bool,
}

fn choose<R: Rng>(logits: &[f64], cfg: &SampleConfig, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| i != PAD && i != BOS).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k.max(1));
    if order.len() == 1 {
        return order[0];
    }
    let mut p: Vec<f64> = order.iter().map(|&i| logits[i] / cfg.temperature).collect();
    softmax_in_place(&mut p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return order[i];
        }
    }
    *order.last().expect("non-empty")
}

/// Samples up to `max_new` tokens after `prompt`, stopping at EOS or the context limit.
/// PAD and BOS are never produced; `top_k = 1` is greedy decoding.
pub fn sample(model: &TinyLM, prompt: &[usize], cfg: &SampleConfig, seed: u64) -> Result<Completion> {
    if !(cfg.temperature > 0.0) || cfg.top_k == 0 {
        return Err(LmError::Invalid(format!(
            "temperature must be > 0 and top_k >= 1, got {} and {}",
            cfg.temperature, cfg.top_k
        )));
    }
    if prompt.is_empty() || prompt.len() >= model.config.context {
        return Err(LmError::Context {
            len: prompt.len(),
            context: model.config.context,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut session = Session::new(model)?;
    let mut logits = session.feed(prompt)?;
    let mut out = Completion {
        ids: Vec::new(),
        logprobs: Vec::new(),
        truncated: false,
    };
    loop {
        let next = choose(&logits, cfg, &mut rng);
        out.ids.push(next);
        out.logprobs.push(log_softmax_at(&logits, next));
        if next == EOS {
            break;
        }
        if out.ids.len() >= cfg.max_new || session.len() >= model.config.context {
            out.truncated = true;
            break;
        }
        logits = session.step(next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::model::LmConfig;
    use super::*;
    use crate::tensor::Tape;

    fn tiny() -> TinyLM {
        let cfg = LmConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            context: 24,
        };
        let mut m = TinyLM::new(cfg, 12, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        // sharpen the distribution so sampling paths differ visibly
        m.params.get_mut("head.w").unwrap().value.iter_mut().for_each(|w| *w *= 40.0);
        m
    }

    #[test]
    fn cached_path_matches_tape_forward() {
        let m = tiny();
        let ids = [1usize, 5, 7, 3, 11, 4, 4];
        let tape_logits = m.forward(&Tape::new(), &[&ids]).unwrap().value();
        let mut s = Session::new(&m).unwrap();
        for (t, &id) in ids.iter().enumerate() {
            let l = s.step(id).unwrap();
            for (a, b) in l.iter().zip(&tape_logits.values[t * 12..(t + 1) * 12]) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_model_logprobs() {
        let mut m = tiny();
        m.params.get_mut("head.w").unwrap().value.iter_mut().for_each(|w| *w = 0.0);
        let lp = logprobs(&m, &[1, 4, 6, 2]).unwrap();
        assert_eq!(lp.len(), 3);
        for v in lp {
            assert!((v + (12f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn logprobs_are_causal_and_nonpositive() {
        let m = tiny();
        let a = logprobs(&m, &[1, 4, 6, 9, 2]).unwrap();
        let b = logprobs(&m, &[1, 4, 6, 9, 7]).unwrap();
        assert!(a.iter().all(|v| *v <= 0.0));
        assert_eq!(&a[..3], &b[..3]);
    }

    #[test]
    fn greedy_and_seeded_determinism() {
        let m = tiny();
        let g1 = sample(&m, &[1, 5], &SampleConfig::greedy(10), 1).unwrap();
        let g2 = sample(&m, &[1, 5], &SampleConfig::greedy(10), 99).unwrap();
        assert_eq!(g1, g2);
        let cfg = SampleConfig {
            max_new: 20,
            ..SampleConfig::default()
        };
        let s1 = sample(&m, &[1, 5], &cfg, 7).unwrap();
        let s2 = sample(&m, &[1, 5], &cfg, 7).unwrap();
        assert_eq!(s1, s2);
        let mut seen_pad = false;
        for seed in 0..50 {
            let s = sample(&m, &[1, 5], &cfg, seed).unwrap();
            seen_pad |= s.ids.iter().any(|&i| i == PAD || i == BOS);
            assert!(s.ids.len() <= 20);
        }
        assert!(!seen_pad);
        let lp = logprobs(&m, &[&[1, 5][..], &s1.ids].concat()).unwrap();
        for (a, b) in lp[1..].iter().zip(&s1.logprobs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_is_respected() {
        let m = tiny();
        let prompt = vec![3usize; 20];
        let c = sample(
            &m,
            &prompt,
            &SampleConfig {
                max_new: 100,
                ..SampleConfig::default()
            },
            0,
        )
        .unwrap();
        assert!(prompt.len() + c.ids.len() <= 25);
        assert!(sample(
            &m,
            &[1],
            &SampleConfig {
                temperature: 0.0,
                ..SampleConfig::default()
            },
            0
        )
        .is_err());
        assert!(logprobs(&m, &[1; 25]).is_err());
    }
}
