//! Stage orchestration, artifact persistence and single-prompt inference helpers.
//!
//! A run directory holds one sub-directory per stage. Each carries a `stage.json`
//! with the SHA-256 of the stage's config section and its upstream hashes; a stage is
//! skipped when that hash and all its outputs are already present.

mod render;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedder::{train_embedder, DualEncoder, EmbedderConfig};
use crate::metrics::{eval_m2t, eval_t2m, EvalConfig, EvalContext, EvalReport, Generator};
use crate::rewards::RewardModels;
use crate::synthdata::{gen_dataset, Dataset, DatasetConfig, MotionClip, PrimitiveTrace, Split, FPS};
use crate::tokenizer_vq::{train_tokenizer, VqConfig, VqModel};
use crate::train_grpo::{run_grpo, GrpoConfig, GrpoPrompt, GrpoReport};
use crate::train_sft::{build_examples, run_sft, SftConfig};
use crate::vocab_lm::{encode_prompt, parse_output, sample, LmConfig, Payload, SampleConfig, StructuredOutput, Task, TinyLM, Vocabulary};

pub use render::render_svg;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` failed (log: {}): {source:#}", log.display())]
    Stage {
        stage: &'static str,
        log: PathBuf,
        source: anyhow::Error,
    },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// When set, replaces the seed of every stage section.
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub tokenizer: VqConfig,
    pub embedder: EmbedderConfig,
    pub lm: LmConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/desk"),
            seed: None,
            dataset: DatasetConfig::default(),
            tokenizer: VqConfig::default(),
            embedder: EmbedderConfig::default(),
            lm: LmConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Copy with the global seed pushed into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.dataset.seed = s;
            c.tokenizer.seed = s;
            c.embedder.seed = s;
            c.sft.seed = s;
            c.grpo.seed = s;
            c.eval.seed = s;
        }
        c
    }
}

/// A persisted result tagged with the config hash of the stage that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub stage: String,
    pub config_hash: String,
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageStamp {
    stage: String,
    config_hash: String,
    config: Value,
    upstream: Vec<String>,
}

/// Where each stage keeps its outputs inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }
    pub fn dataset(&self) -> PathBuf {
        self.stage_dir("dataset")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.stage_dir("tokenizer").join("vq.ckpt")
    }
    pub fn embedder(&self) -> PathBuf {
        self.stage_dir("embedder").join("embedder.ckpt")
    }
    pub fn vocab(&self) -> PathBuf {
        self.stage_dir("sft").join("vocab.json")
    }
    pub fn sft_model(&self) -> PathBuf {
        self.stage_dir("sft").join("lm.ckpt")
    }
    pub fn rl_model(&self) -> PathBuf {
        self.stage_dir("grpo").join("lm.ckpt")
    }
    pub fn eval_report(&self, name: &str) -> PathBuf {
        self.stage_dir("eval").join(format!("{name}.json"))
    }
}

/// Names of the evaluation reports the pipeline writes.
pub const EVAL_REPORTS: [&str; 6] = ["sft_t2m", "sft_m2t", "rl_t2m", "rl_m2t", "random_t2m", "random_m2t"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn section_hash(section: &Value, upstream: &[String]) -> String {
    let canonical = json!({ "config": section, "upstream": upstream });
    sha256_hex(canonical.to_string().as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_ndjson<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

/// Outcome of one stage: its hash and whether it was executed or skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageStatus {
    pub stage: &'static str,
    pub config_hash: String,
    pub ran: bool,
}

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dataset,
    Tokenizer,
    Embedder,
    Sft,
    Grpo,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Dataset,
        Stage::Tokenizer,
        Stage::Embedder,
        Stage::Sft,
        Stage::Grpo,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Tokenizer => "tokenizer",
            Stage::Embedder => "embedder",
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
            Stage::Eval => "eval",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Dataset => &[],
            Stage::Tokenizer | Stage::Embedder => &[Stage::Dataset],
            Stage::Sft => &[Stage::Dataset, Stage::Tokenizer],
            Stage::Grpo => &[Stage::Sft, Stage::Embedder],
            Stage::Eval => &[Stage::Sft, Stage::Grpo, Stage::Embedder, Stage::Tokenizer],
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl PipelineConfig {
    /// The config section a stage's outputs depend on (besides upstream stages).
    pub fn section(&self, stage: Stage) -> Value {
        match stage {
            Stage::Dataset => json!(self.dataset),
            Stage::Tokenizer => json!(self.tokenizer),
            Stage::Embedder => json!(self.embedder),
            Stage::Sft => json!({ "lm": self.lm, "sft": self.sft }),
            Stage::Grpo => json!(self.grpo),
            Stage::Eval => json!(self.eval),
        }
    }

    /// Hash of every stage, chained through upstream hashes.
    pub fn stage_hashes(&self) -> [String; 6] {
        let mut out: [String; 6] = Default::default();
        for stage in Stage::ALL {
            let up: Vec<String> = stage.upstream().iter().map(|u| out[u.index()].clone()).collect();
            out[stage.index()] = section_hash(&self.section(stage), &up);
        }
        out
    }
}

impl RunLayout {
    /// Files whose presence marks a stage as complete.
    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Dataset => vec![self.dataset().join("manifest.jsonl")],
            Stage::Tokenizer => vec![self.tokenizer()],
            Stage::Embedder => vec![self.embedder()],
            Stage::Sft => vec![self.sft_model(), self.vocab()],
            Stage::Grpo => vec![self.rl_model()],
            Stage::Eval => EVAL_REPORTS.iter().map(|n| self.eval_report(n)).collect(),
        }
    }
}

/// Runs `stages` (in dependency order) under the resolved `config`. A stage already
/// stamped with its current hash and holding all its outputs is skipped unless `force`.
pub fn run_stages(config: &PipelineConfig, stages: &[Stage], force: bool) -> Result<Vec<StageStatus>> {
    let cfg = config.resolved();
    let layout = RunLayout::new(&cfg.out_dir);
    fs::create_dir_all(&layout.root).with_context(|| format!("creating {}", layout.root.display()))?;
    write_json(&layout.root.join("config.json"), &cfg)?;
    let hashes = cfg.stage_hashes();
    let mut statuses = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| stages.contains(s)) {
        let name = stage.name();
        let dir = layout.stage_dir(name);
        let hash = &hashes[stage.index()];
        let stamp_path = dir.join("stage.json");
        let fresh = !force
            && read_json::<StageStamp>(&stamp_path).is_ok_and(|s| &s.config_hash == hash)
            && layout.outputs(stage).iter().all(|p| p.exists());
        if fresh {
            log::info!("stage {name}: up to date ({})", &hash[..12]);
        } else {
            log::info!("stage {name}: running");
            let fail = |source: anyhow::Error| PipelineError::Stage {
                stage: name,
                log: dir.join("log.ndjson"),
                source,
            };
            let _ = fs::remove_file(&stamp_path);
            fs::create_dir_all(&dir).map_err(|e| fail(e.into()))?;
            run_stage(&cfg, &layout, stage, hash).map_err(fail)?;
            let stamp = StageStamp {
                stage: name.to_string(),
                config_hash: hash.clone(),
                config: cfg.section(stage),
                upstream: stage.upstream().iter().map(|u| hashes[u.index()].clone()).collect(),
            };
            write_json(&stamp_path, &stamp).map_err(fail)?;
        }
        statuses.push(StageStatus {
            stage: name,
            config_hash: hash.clone(),
            ran: !fresh,
        });
    }
    Ok(statuses)
}

/// Runs every stage.
pub fn run_pipeline(config: &PipelineConfig, force: bool) -> Result<Vec<StageStatus>> {
    run_stages(config, &Stage::ALL, force)
}

fn artifact<T: Serialize>(stage: &str, hash: &str, body: T) -> Artifact<T> {
    Artifact {
        stage: stage.to_string(),
        config_hash: hash.to_string(),
        body,
    }
}

/// Vocabulary over training captions and reasoning text plus one token per code.
pub fn build_vocabulary(train: &Dataset, codebook_size: usize) -> anyhow::Result<Vocabulary> {
    Ok(Vocabulary::build(
        train.records.iter().flat_map(|r| [r.caption.as_str(), r.cot.as_str()]),
        codebook_size,
    )?)
}

/// Motion codes of every clip in `data`.
pub fn tokenize_all(tokenizer: &VqModel, data: &Dataset) -> anyhow::Result<Vec<Vec<usize>>> {
    Ok(data
        .clips
        .par_iter()
        .map(|c| tokenizer.tokenize(&c.frames))
        .collect::<std::result::Result<_, _>>()?)
}

/// Untrained model sized for the base vocabulary, then expanded by the motion tokens.
pub fn fresh_model(cfg: &LmConfig, vocab: &Vocabulary, seed: u64) -> anyhow::Result<TinyLM> {
    let mut model = TinyLM::new(*cfg, vocab.base_size(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    model.expand_vocab(vocab.len() - vocab.base_size())?;
    Ok(model)
}

/// GRPO prompts and reward targets for every record of `data`.
pub fn grpo_prompts(
    vocab: &Vocabulary,
    data: &Dataset,
    tokens: &[Vec<usize>],
    rewards: &RewardModels<'_>,
) -> anyhow::Result<Vec<GrpoPrompt>> {
    data.records
        .par_iter()
        .zip(&data.clips)
        .zip(tokens)
        .map(|((r, c), t)| {
            Ok(GrpoPrompt {
                t2m: encode_prompt(vocab, Task::T2M, Payload::Caption(&r.caption))?.ids,
                m2t: encode_prompt(vocab, Task::M2T, Payload::Motion(t))?.ids,
                target: rewards.target(&c.frames, &r.caption)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoSummary {
    pub steps: usize,
    pub window: usize,
    pub first_window_reward: f64,
    pub last_window_reward: f64,
    pub max_clipped_norm: f64,
    pub kl_finite: bool,
    pub final_kl: f64,
}

impl GrpoSummary {
    pub fn from_report(r: &GrpoReport) -> Self {
        let n = r.log.len();
        let window = (n / 4).clamp(1, 500);
        Self {
            steps: r.steps,
            window,
            first_window_reward: r.mean_reward(0..window),
            last_window_reward: r.mean_reward(n - window..n),
            max_clipped_norm: r.log.iter().map(|e| e.clipped_norm).fold(0.0, f64::max),
            kl_finite: r.log.iter().all(|e| e.kl.is_finite()),
            final_kl: r.log.last().map_or(0.0, |e| e.kl),
        }
    }
}

fn run_stage(cfg: &PipelineConfig, layout: &RunLayout, stage: Stage, hash: &str) -> anyhow::Result<()> {
    let dir = layout.stage_dir(stage.name());
    let dir = dir.as_path();
    let load_data = || -> anyhow::Result<Dataset> { Ok(Dataset::load(&layout.dataset())?) };
    match stage {
        Stage::Dataset => {
            gen_dataset(&cfg.dataset, dir)?;
            Ok(())
        }
        Stage::Tokenizer => {
            let data = load_data()?;
            let (model, report) = train_tokenizer(&data.split(Split::Train), &data.split(Split::Val), &cfg.tokenizer)?;
            write_ndjson(&dir.join("log.ndjson"), &report.log)?;
            model.save(&layout.tokenizer())?;
            let mut summary = report.clone();
            summary.log.clear();
            write_json(&dir.join("report.json"), &artifact("tokenizer", hash, summary))
        }
        Stage::Embedder => {
            let data = load_data()?;
            let (model, report) = train_embedder(&data.split(Split::Train), &data.split(Split::Val), &cfg.embedder)?;
            write_ndjson(&dir.join("log.ndjson"), &report.log)?;
            model.save(&layout.embedder())?;
            let mut summary = report.clone();
            summary.log.clear();
            write_json(&dir.join("report.json"), &artifact("embedder", hash, summary))
        }
        Stage::Sft => {
            let data = load_data()?;
            let tokenizer = VqModel::load(&layout.tokenizer())?;
            let train = data.split(Split::Train);
            let vocab = build_vocabulary(&train, tokenizer.codebook_size())?;
            let tokens = tokenize_all(&tokenizer, &train)?;
            let examples = build_examples(&vocab, &train.records, &tokens)?;
            let mut model = fresh_model(&cfg.lm, &vocab, cfg.sft.seed)?;
            let report = run_sft(&mut model, &examples, &cfg.sft)?;
            write_ndjson(&dir.join("log.ndjson"), &report.log)?;
            write_json(&layout.vocab(), &vocab)?;
            model.save(&layout.sft_model())?;
            let mut summary = report.clone();
            summary.log.clear();
            write_json(&dir.join("report.json"), &artifact("sft", hash, summary))
        }
        Stage::Grpo => {
            let data = load_data()?;
            let train = data.split(Split::Train);
            let tokenizer = VqModel::load(&layout.tokenizer())?;
            let embedder = DualEncoder::load(&layout.embedder())?;
            let vocab: Vocabulary = read_json(&layout.vocab())?;
            let reference = {
                let mut m = TinyLM::load(&layout.sft_model())?;
                m.params.freeze();
                m
            };
            let mut policy = TinyLM::load(&layout.sft_model())?;
            let rewards = RewardModels {
                embedder: &embedder,
                tokenizer: &tokenizer,
            };
            let prompts = grpo_prompts(&vocab, &train, &tokenize_all(&tokenizer, &train)?, &rewards)?;
            let log_path = dir.join("log.ndjson");
            let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
            let mut write_err = None;
            let report = run_grpo(&mut policy, &reference, &vocab, &rewards, &prompts, &cfg.grpo, |e| {
                if let Err(err) = serde_json::to_writer(&mut log, e)
                    .map_err(anyhow::Error::from)
                    .and_then(|_| Ok(log.write_all(b"\n")?))
                {
                    write_err.get_or_insert(err);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e);
            }
            log.flush()?;
            policy.save(&layout.rl_model())?;
            write_json(&dir.join("report.json"), &artifact("grpo", hash, GrpoSummary::from_report(&report)))
        }
        Stage::Eval => {
            let data = load_data()?;
            let test = data.split(Split::Test);
            let tokenizer = VqModel::load(&layout.tokenizer())?;
            let embedder = DualEncoder::load(&layout.embedder())?;
            let vocab: Vocabulary = read_json(&layout.vocab())?;
            let sft = TinyLM::load(&layout.sft_model())?;
            let rl = TinyLM::load(&layout.rl_model())?;
            let ctx = EvalContext {
                vocab: &vocab,
                tokenizer: &tokenizer,
                embedder: &embedder,
                data: &test,
                split: Split::Test.name().to_string(),
            };
            for (name, generator) in [
                ("sft", Generator::Model(&sft)),
                ("rl", Generator::Model(&rl)),
                ("random", Generator::RandomTokens),
            ] {
                let t2m = eval_t2m(&ctx, generator, &cfg.eval)?;
                write_json(&layout.eval_report(&format!("{name}_t2m")), &artifact("eval", hash, t2m))?;
                let m2t = eval_m2t(&ctx, generator, &cfg.eval)?;
                write_json(&layout.eval_report(&format!("{name}_m2t")), &artifact("eval", hash, m2t))?;
            }
            Ok(())
        }
    }
}

/// Reads one evaluation report from a run directory.
pub fn load_eval_report(layout: &RunLayout, name: &str) -> anyhow::Result<EvalReport> {
    Ok(read_json::<Artifact<EvalReport>>(&layout.eval_report(name))?.body)
}

/// Models needed to run inference from a checkpoint.
pub struct InferenceBundle {
    pub vocab: Vocabulary,
    pub tokenizer: VqModel,
    pub model: TinyLM,
}

impl InferenceBundle {
    pub fn load(vocab: &Path, tokenizer: &Path, model: &Path) -> anyhow::Result<Self> {
        Ok(Self {
            vocab: read_json(vocab)?,
            tokenizer: VqModel::load(tokenizer)?,
            model: TinyLM::load(model)?,
        })
    }

    /// Loads the SFT (`rl = false`) or GRPO checkpoint of a pipeline run.
    pub fn from_run(layout: &RunLayout, rl: bool) -> anyhow::Result<Self> {
        let model = if rl { layout.rl_model() } else { layout.sft_model() };
        Self::load(&layout.vocab(), &layout.tokenizer(), &model)
    }

    fn complete(&self, task: Task, payload: Payload<'_>, sampling: &SampleConfig, seed: u64) -> anyhow::Result<Inference> {
        let prompt = encode_prompt(&self.vocab, task, payload)?;
        if prompt.unknown_words > 0 {
            log::warn!(
                "{} prompt word(s) are outside the vocabulary and were mapped to <unk>",
                prompt.unknown_words
            );
        }
        let out = sample(&self.model, &prompt.ids, sampling, seed)?;
        let parsed = parse_output(&self.vocab, &out.ids, task);
        Ok(Inference {
            raw: self.vocab.decode(&out.ids),
            truncated: out.truncated,
            parsed,
            motion: None,
        })
    }

    /// Text-to-motion for one caption; the motion is decoded when the output is well formed.
    pub fn generate(&self, caption: &str, sampling: &SampleConfig, seed: u64) -> anyhow::Result<Inference> {
        let mut inf = self.complete(Task::T2M, Payload::Caption(caption), sampling, seed)?;
        if let Some(idx) = inf
            .parsed
            .motion_indices
            .as_deref()
            .filter(|i| inf.parsed.format_valid && !i.is_empty())
        {
            let frames = self.tokenizer.decode(idx)?;
            inf.motion = Some(MotionClip {
                frames,
                fps: FPS,
                trace: PrimitiveTrace::new(Vec::new()),
            });
        }
        Ok(inf)
    }

    /// Motion-to-text for one clip.
    pub fn caption(&self, clip: &MotionClip, sampling: &SampleConfig, seed: u64) -> anyhow::Result<Inference> {
        let tokens = self.tokenizer.tokenize(&clip.frames)?;
        self.complete(Task::M2T, Payload::Motion(&tokens), sampling, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub raw: String,
    pub truncated: bool,
    pub parsed: StructuredOutput,
    pub motion: Option<MotionClip>,
}

impl Inference {
    pub fn require_valid(&self) -> anyhow::Result<()> {
        if self.parsed.format_valid {
            Ok(())
        } else {
            Err(anyhow!("generation does not follow the output format; raw output: {}", self.raw))
        }
    }
}
