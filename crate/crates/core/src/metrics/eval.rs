//! Checkpoint evaluation on a dataset split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{bleu, cider, diversity, fid, mm_dist, mmodality, r_precision, rouge_l, MetricError};
use crate::embedder::{DualEncoder, EmbedError};
use crate::synthdata::{derive_seed, Dataset, FRAME_DIM};
use crate::tensor::Tensor;
use crate::tokenizer_vq::{VqError, VqModel};
use crate::vocab_lm::{
    encode_prompt, parse_output, sample, target_ids, LmError, Payload, SampleConfig, Task, TinyLM, TokenClass, Vocabulary,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub trials: usize,
    pub diversity_subset: usize,
    /// Captions used for MModality.
    pub mmodality_captions: usize,
    pub mmodality_per_caption: usize,
    pub repeats: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool_size: 32,
            trials: 1000,
            diversity_subset: 30,
            mmodality_captions: 16,
            mmodality_per_caption: 8,
            repeats: 3,
            temperature: 1.0,
            top_k: 50,
            max_new: 160,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn sampling(&self) -> SampleConfig {
        SampleConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_new: self.max_new,
        }
    }
}

/// Metric values; fields that do not apply to a task are absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub format_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_precision_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_precision_top2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_precision_top3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mm_dist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmodality: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider: Option<f64>,
}

impl Scores {
    fn fields_mut(&mut self) -> [(&'static str, &mut Option<f64>); 11] {
        [
            ("r_precision_top1", &mut self.r_precision_top1),
            ("r_precision_top2", &mut self.r_precision_top2),
            ("r_precision_top3", &mut self.r_precision_top3),
            ("fid", &mut self.fid),
            ("mm_dist", &mut self.mm_dist),
            ("diversity", &mut self.diversity),
            ("mmodality", &mut self.mmodality),
            ("bleu1", &mut self.bleu1),
            ("bleu4", &mut self.bleu4),
            ("rouge_l", &mut self.rouge_l),
            ("cider", &mut self.cider),
        ]
    }

    /// Field-wise mean and population standard deviation.
    fn aggregate(runs: &[Scores]) -> (Scores, Scores) {
        let n = runs.len() as f64;
        let mut mean = Scores::default();
        let mut std = Scores::default();
        let fr: Vec<f64> = runs.iter().map(|r| r.format_rate).collect();
        let (m, s) = mean_std(&fr);
        mean.format_rate = m;
        std.format_rate = s;
        let mut runs = runs.to_vec();
        for k in 0..11 {
            let vals: Option<Vec<f64>> = runs.iter_mut().map(|r| *r.fields_mut()[k].1).collect();
            if let Some(v) = vals.filter(|v| v.len() as f64 == n) {
                let (m, s) = mean_std(&v);
                *mean.fields_mut()[k].1 = Some(m);
                *std.fields_mut()[k].1 = Some(s);
            }
        }
        (mean, std)
    }

    /// Names of fields outside their valid ranges.
    pub fn range_violations(&self) -> Vec<&'static str> {
        let mut copy = self.clone();
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.format_rate) {
            bad.push("format_rate");
        }
        for (name, v) in copy.fields_mut() {
            let Some(v) = *v else { continue };
            let ok = match name {
                "r_precision_top1" | "r_precision_top2" | "r_precision_top3" => (0.0..=1.0).contains(&v),
                "bleu1" | "bleu4" | "rouge_l" | "cider" => (0.0..=100.0).contains(&v),
                _ => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                bad.push(name);
            }
        }
        if let (Some(a), Some(b), Some(c)) = (self.r_precision_top1, self.r_precision_top2, self.r_precision_top3) {
            if !(a <= b && b <= c) {
                bad.push("r_precision order");
            }
        }
        bad
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub split: String,
    pub generator: String,
    pub samples: usize,
    /// Mean over repeats.
    #[serde(flatten)]
    pub scores: Scores,
    /// Standard deviation over repeats.
    pub std: Scores,
    pub config: EvalConfig,
}

/// Source of completions being evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Generator<'a> {
    Model(&'a TinyLM),
    /// Well-formed outputs with uniformly random motion tokens or caption words.
    RandomTokens,
}

impl Generator<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::Model(_) => "model",
            Generator::RandomTokens => "random_tokens",
        }
    }

    /// Completion ids (without the prompt) for one prompt.
    pub fn generate(&self, vocab: &Vocabulary, task: Task, prompt: &[usize], sampling: &SampleConfig, seed: u64) -> Result<Vec<usize>> {
        match self {
            Generator::Model(lm) => Ok(sample(lm, prompt, sampling, seed)?.ids),
            Generator::RandomTokens => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ids = match task {
                    Task::T2M => {
                        let len = rng.gen_range(4..=16);
                        let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab.motion_count())).collect();
                        target_ids(vocab, task, "the person moves .", Payload::Motion(&idx))?.0
                    }
                    Task::M2T => {
                        let words: Vec<&str> = (0..vocab.len())
                            .filter(|&i| vocab.class(i) == TokenClass::Text)
                            .map(|i| vocab.token(i))
                            .filter(|w| w.chars().all(char::is_alphanumeric))
                            .collect();
                        let len = rng.gen_range(3..=8);
                        let caption: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
                        target_ids(vocab, task, "the person moves .", Payload::Caption(&caption.join(" ")))?.0
                    }
                };
                Ok(ids)
            }
        }
    }
}

/// Frozen models and the split under evaluation.
pub struct EvalContext<'a> {
    pub vocab: &'a Vocabulary,
    pub tokenizer: &'a VqModel,
    pub embedder: &'a DualEncoder,
    pub data: &'a Dataset,
    pub split: String,
}

const MMODALITY_STREAM: u64 = 0x6d6d_6f64;

impl EvalContext<'_> {
    fn t2m_prompt(&self, i: usize) -> Result<Vec<usize>> {
        Ok(encode_prompt(self.vocab, Task::T2M, Payload::Caption(&self.data.records[i].caption))?.ids)
    }

    /// Decoded clip for a T2M completion; invalid or undecodable outputs become a zero-motion clip
    /// with the reference clip's length.
    fn generated_clip(&self, ids: &[usize], i: usize) -> Result<(Tensor, bool)> {
        let parsed = parse_output(self.vocab, ids, Task::T2M);
        let zero = || Tensor::zeros(&[self.data.clips[i].num_frames(), FRAME_DIM]);
        match parsed.motion_indices {
            Some(idx) if parsed.format_valid && !idx.is_empty() => match self.tokenizer.decode(&idx) {
                Ok(frames) => Ok((frames, true)),
                Err(VqError::TokenRange { .. }) => Ok((zero(), true)),
                Err(e) => Err(e.into()),
            },
            _ => Ok((zero(), parsed.format_valid)),
        }
    }

    fn t2m_once(&self, generator: Generator<'_>, cfg: &EvalConfig, seed: u64) -> Result<Scores> {
        let n = self.data.len();
        let sampling = cfg.sampling();
        let generated: Vec<(Tensor, bool)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let ids = generator.generate(self.vocab, Task::T2M, &self.t2m_prompt(i)?, &sampling, derive_seed(seed, i as u64))?;
                self.generated_clip(&ids, i)
            })
            .collect::<Result<_>>()?;
        let groups: Vec<Vec<Tensor>> = (0..cfg.mmodality_captions.min(n))
            .into_par_iter()
            .map(|i| {
                let prompt = self.t2m_prompt(i)?;
                (0..cfg.mmodality_per_caption)
                    .map(|j| {
                        let s = derive_seed(seed ^ MMODALITY_STREAM, (i * cfg.mmodality_per_caption + j) as u64);
                        let ids = generator.generate(self.vocab, Task::T2M, &prompt, &sampling, s)?;
                        Ok(self.generated_clip(&ids, i)?.0)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let valid = generated.iter().filter(|g| g.1).count();
        let clips: Vec<Tensor> = generated.into_iter().map(|g| g.0).collect();
        let mut s = self.motion_scores(&clips, &groups, cfg, seed)?;
        s.format_rate = valid as f64 / n as f64;
        Ok(s)
    }

    /// Retrieval, Fréchet distance, multimodal distance, diversity and (when `groups` is
    /// non-empty) multimodality of `clips` against this split's captions and clips.
    pub fn motion_scores(&self, clips: &[Tensor], groups: &[Vec<Tensor>], cfg: &EvalConfig, seed: u64) -> Result<Scores> {
        let refs: Vec<&Tensor> = self.data.clips.iter().map(|c| &c.frames).collect();
        let captions: Vec<&str> = self.data.records.iter().map(|r| r.caption.as_str()).collect();
        let gen = self.embedder.embed_motions(&clips.iter().collect::<Vec<_>>())?;
        let real = self.embedder.embed_motions(&refs)?;
        let text = self.embedder.embed_texts(&captions)?;
        let [t1, t2, t3] = r_precision(&gen, &text, cfg.pool_size, cfg.trials, seed)?;
        let mm = if groups.is_empty() {
            None
        } else {
            let g: Vec<Vec<Vec<f64>>> = groups
                .iter()
                .map(|g| self.embedder.embed_motions(&g.iter().collect::<Vec<_>>()))
                .collect::<std::result::Result<_, _>>()?;
            Some(mmodality(&g)?)
        };
        Ok(Scores {
            format_rate: 1.0,
            r_precision_top1: Some(t1),
            r_precision_top2: Some(t2),
            r_precision_top3: Some(t3),
            fid: Some(fid(&gen, &real)?),
            mm_dist: Some(mm_dist(&gen, &text)?),
            diversity: Some(diversity(&gen, cfg.diversity_subset, seed)?),
            mmodality: mm,
            ..Scores::default()
        })
    }

    fn m2t_once(&self, generator: Generator<'_>, motion_tokens: &[Vec<usize>], cfg: &EvalConfig, seed: u64) -> Result<Scores> {
        let sampling = cfg.sampling();
        let outs: Vec<(String, bool)> = (0..self.data.len())
            .into_par_iter()
            .map(|i| {
                let prompt = encode_prompt(self.vocab, Task::M2T, Payload::Motion(&motion_tokens[i]))?;
                let ids = generator.generate(self.vocab, Task::M2T, &prompt.ids, &sampling, derive_seed(seed, i as u64))?;
                let parsed = parse_output(self.vocab, &ids, Task::M2T);
                Ok(match parsed.answer_text {
                    Some(t) if parsed.format_valid => (t, true),
                    _ => (String::new(), false),
                })
            })
            .collect::<Result<_>>()?;
        let valid = outs.iter().filter(|o| o.1).count();
        let hyps: Vec<String> = outs.into_iter().map(|o| o.0).collect();
        let mut s = self.caption_scores(&hyps)?;
        s.format_rate = valid as f64 / self.data.len() as f64;
        Ok(s)
    }

    /// BLEU@1, BLEU@4, ROUGE-L and CIDEr of `hyps` against this split's captions.
    pub fn caption_scores(&self, hyps: &[String]) -> Result<Scores> {
        let refs: Vec<String> = self.data.records.iter().map(|r| r.caption.clone()).collect();
        Ok(Scores {
            format_rate: 1.0,
            bleu1: Some(bleu(hyps, &refs, 1)?),
            bleu4: Some(bleu(hyps, &refs, 4)?),
            rouge_l: Some(rouge_l(hyps, &refs)?),
            cider: Some(cider(hyps, &refs)?),
            ..Scores::default()
        })
    }

    fn report(&self, task: Task, generator: Generator<'_>, cfg: &EvalConfig, runs: Vec<Scores>) -> EvalReport {
        let (scores, std) = Scores::aggregate(&runs);
        EvalReport {
            task,
            split: self.split.clone(),
            generator: generator.name().to_string(),
            samples: self.data.len(),
            scores,
            std,
            config: cfg.clone(),
        }
    }

    fn check(&self, cfg: &EvalConfig) -> Result<()> {
        if cfg.repeats == 0 || cfg.trials == 0 {
            return Err(EvalError::Config("repeats and trials must be positive".into()));
        }
        if self.data.is_empty() {
            return Err(EvalError::Config(format!("split `{}` is empty", self.split)));
        }
        Ok(())
    }
}

/// Text-to-motion evaluation, averaged over `cfg.repeats` seeded generation rounds.
pub fn eval_t2m(ctx: &EvalContext<'_>, generator: Generator<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    ctx.check(cfg)?;
    let runs = (0..cfg.repeats)
        .map(|r| ctx.t2m_once(generator, cfg, derive_seed(cfg.seed, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ctx.report(Task::T2M, generator, cfg, runs))
}

/// Motion-to-text evaluation, averaged over `cfg.repeats` seeded generation rounds.
pub fn eval_m2t(ctx: &EvalContext<'_>, generator: Generator<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    ctx.check(cfg)?;
    let tokens: Vec<Vec<usize>> = ctx
        .data
        .clips
        .par_iter()
        .map(|c| ctx.tokenizer.tokenize(&c.frames))
        .collect::<std::result::Result<_, _>>()?;
    let runs = (0..cfg.repeats)
        .map(|r| ctx.m2t_once(generator, &tokens, cfg, derive_seed(cfg.seed, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ctx.report(Task::M2T, generator, cfg, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EmbedderConfig;
    use crate::metrics::euclidean;
    use crate::synthdata::{DatasetConfig, Split};
    use crate::tokenizer_vq::VqConfig;

    struct Fixture {
        vocab: Vocabulary,
        vq: VqModel,
        emb: DualEncoder,
        data: Dataset,
    }

    fn fixture() -> Fixture {
        let all = Dataset::generate(&DatasetConfig {
            train: 4,
            val: 0,
            test: 96,
            seed: 5,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vq = VqModel::untrained(
            &VqConfig {
                codebook_size: 16,
                latent_dim: 8,
                hidden: 8,
                ..VqConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let emb = DualEncoder::new(EmbedderConfig::default(), &mut rng).unwrap();
        let vocab = Vocabulary::build(all.records.iter().flat_map(|r| [r.caption.as_str(), r.cot.as_str()]), 16).unwrap();
        Fixture {
            vocab,
            vq,
            emb,
            data: all.split(Split::Test),
        }
    }

    fn ctx(f: &Fixture) -> EvalContext<'_> {
        EvalContext {
            vocab: &f.vocab,
            tokenizer: &f.vq,
            embedder: &f.emb,
            data: &f.data,
            split: "test".into(),
        }
    }

    #[test]
    fn ground_truth_against_itself() {
        let f = fixture();
        let c = ctx(&f);
        let clips: Vec<Tensor> = f.data.clips.iter().map(|c| c.frames.clone()).collect();
        let s = c.motion_scores(&clips, &[], &EvalConfig::default(), 0).unwrap();
        assert!(s.fid.unwrap() <= 1e-6);
        let m = f.emb.embed_motions(&clips.iter().collect::<Vec<_>>()).unwrap();
        let t = f
            .emb
            .embed_texts(&f.data.records.iter().map(|r| r.caption.as_str()).collect::<Vec<_>>())
            .unwrap();
        let matched = m.iter().zip(&t).map(|(a, b)| euclidean(a, b)).sum::<f64>() / m.len() as f64;
        assert!((s.mm_dist.unwrap() - matched).abs() < 1e-12);
        assert!(s.range_violations().is_empty());
        let refs: Vec<String> = f.data.records.iter().map(|r| r.caption.clone()).collect();
        let s = c.caption_scores(&refs).unwrap();
        assert!((s.bleu1.unwrap() - 100.0).abs() < 1e-9 && (s.cider.unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn random_tokens_retrieve_at_chance() {
        let f = fixture();
        let cfg = EvalConfig {
            repeats: 1,
            trials: 4000,
            mmodality_captions: 4,
            ..EvalConfig::default()
        };
        let r = eval_t2m(&ctx(&f), Generator::RandomTokens, &cfg).unwrap();
        assert!((r.scores.r_precision_top1.unwrap() - 1.0 / 32.0).abs() <= 0.03, "{r:?}");
        assert_eq!(r.scores.format_rate, 1.0);
        assert!(r.scores.range_violations().is_empty());
        let m = eval_m2t(&ctx(&f), Generator::RandomTokens, &cfg).unwrap();
        assert!(m.scores.range_violations().is_empty());
        assert!(m.scores.bleu1.unwrap() < 50.0);
    }

    #[test]
    fn seeded_reports_repeat_exactly() {
        let f = fixture();
        let lm = TinyLM::new(
            crate::vocab_lm::LmConfig::default(),
            f.vocab.len(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let cfg = EvalConfig {
            repeats: 2,
            trials: 200,
            mmodality_captions: 2,
            mmodality_per_caption: 2,
            max_new: 24,
            ..EvalConfig::default()
        };
        let a = eval_m2t(&ctx(&f), Generator::Model(&lm), &cfg).unwrap();
        let b = eval_m2t(&ctx(&f), Generator::Model(&lm), &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.scores.range_violations().is_empty());
        let t = eval_t2m(&ctx(&f), Generator::Model(&lm), &cfg).unwrap();
        assert_eq!(t.scores.format_rate, 0.0);
        assert_eq!(t, eval_t2m(&ctx(&f), Generator::Model(&lm), &cfg).unwrap());
    }
}
