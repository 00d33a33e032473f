use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use unified_motion::embedder::DualEncoder;
use unified_motion::metrics::{eval_m2t, eval_t2m, EvalContext, Generator};
use unified_motion::pipeline::{
    read_json, render_svg, run_pipeline, run_stages, write_json, InferenceBundle, PipelineConfig, RunLayout, Stage,
};
use unified_motion::rewards::RewardModels;
use unified_motion::synthdata::{gen_dataset, read_clip, write_clip, Dataset, MotionClip, PrimitiveTrace, Split, FPS};
use unified_motion::tokenizer_vq::VqModel;
use unified_motion::vocab_lm::{parse_output_text, Task, TinyLM, Vocabulary};

/// Unified text-to-motion and motion-to-text toolkit.
#[derive(Parser)]
#[command(name = "umo", version)]
struct Cli {
    /// Pipeline config (JSON); missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Config override `path.to.field=json`, e.g. `--set grpo.steps=500`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic motion-language dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// VQ motion tokenizer.
    Tokenizer {
        #[command(subcommand)]
        action: TokenizerCmd,
    },
    /// Contrastive motion-text embedder.
    Embedder {
        #[command(subcommand)]
        action: EmbedderCmd,
    },
    /// Supervised fine-tuning.
    Sft {
        #[command(subcommand)]
        action: TrainCmd,
    },
    /// Group-relative policy optimization.
    Grpo {
        #[command(subcommand)]
        action: TrainCmd,
    },
    /// Score model outputs with the task rewards.
    Rewards {
        #[command(subcommand)]
        action: RewardsCmd,
    },
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Text-to-motion for one caption.
    Generate(GenerateArgs),
    /// Motion-to-text for one clip.
    Caption(CaptionArgs),
    /// Draw a motion as an SVG skeleton strip.
    Render {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        stride: usize,
    },
    /// Run all pipeline stages.
    Pipeline {
        #[command(subcommand)]
        action: PipelineCmd,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate the dataset into a directory (default: the run's dataset stage).
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TokenizerCmd {
    /// Train the tokenizer stage of the run.
    Train,
    /// Print the code indices of a motion blob.
    Encode {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode comma-separated code indices to a motion blob.
    Decode {
        #[arg(long)]
        tokens: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EmbedderCmd {
    /// Train the embedder stage of the run.
    Train,
    /// Print the embedding of a caption or a motion blob.
    Embed {
        #[arg(long, conflicts_with = "motion")]
        text: Option<String>,
        #[arg(long)]
        motion: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Run this stage of the pipeline (always re-executed).
    Train,
}

#[derive(Subcommand)]
enum RewardsCmd {
    /// Score NDJSON lines `{"id": record id, "output": raw text}` and print one breakdown per line.
    Eval {
        #[arg(long)]
        task: TaskArg,
        #[arg(long)]
        output_file: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Execute every stage, skipping those whose config hash is unchanged.
    Run {
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    T2m,
    M2t,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::T2m => Task::T2M,
            TaskArg::M2t => Task::M2T,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Language-model checkpoint (default: the run's GRPO checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the SFT checkpoint of the run instead of the GRPO one.
    #[arg(long)]
    sft: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value_t = 160)]
    max_new: usize,
}

#[derive(Args)]
struct EvalArgs {
    task: TaskArg,
    #[command(flatten)]
    model: ModelArgs,
    /// Evaluate the random-token baseline instead of a checkpoint.
    #[arg(long)]
    random: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    caption: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    motion: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("`{key}`: `{part}` is not inside an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    bail!("empty override key")
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut value = match &cli.config {
        Some(p) => read_json::<Value>(p)?,
        None => json!({}),
    };
    let schema = serde_json::to_value(PipelineConfig::default())?;
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        if k.split('.').try_fold(&schema, |node, part| node.get(part)).is_none() {
            bail!("override `{k}` names no config field");
        }
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut value, k, v)?;
    }
    let mut cfg: PipelineConfig = serde_json::from_value(value).context("invalid pipeline config")?;
    if let Some(d) = &cli.run_dir {
        cfg.out_dir = d.clone();
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    Ok(cfg.resolved())
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn report_stages(statuses: &[unified_motion::pipeline::StageStatus]) {
    for s in statuses {
        eprintln!(
            "{:<10} {} {}",
            s.stage,
            if s.ran { "ran    " } else { "skipped" },
            &s.config_hash[..16]
        );
    }
}

fn bundle(layout: &RunLayout, m: &ModelArgs) -> Result<InferenceBundle> {
    match &m.checkpoint {
        Some(ckpt) => InferenceBundle::load(&layout.vocab(), &layout.tokenizer(), ckpt),
        None => InferenceBundle::from_run(layout, !m.sft),
    }
}

fn sampling(m: &ModelArgs) -> unified_motion::vocab_lm::SampleConfig {
    unified_motion::vocab_lm::SampleConfig {
        temperature: m.temperature,
        top_k: m.top_k,
        max_new: m.max_new,
    }
}

fn print_inference(inf: &unified_motion::pipeline::Inference) {
    println!("think: {}", inf.parsed.think_text);
    if let Some(a) = &inf.parsed.answer_text {
        println!("answer: {a}");
    }
    if let Some(m) = &inf.parsed.motion_indices {
        println!("motion tokens: {m:?}");
    }
    println!("format valid: {}", inf.parsed.format_valid);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let layout = RunLayout::new(&cfg.out_dir);
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Dataset {
            action: DatasetCmd::Gen { out },
        } => match out {
            Some(dir) => {
                let records = gen_dataset(&cfg.dataset, &dir)?;
                eprintln!("wrote {} records to {}", records.len(), dir.display());
            }
            None => report_stages(&run_stages(&cfg, &[Stage::Dataset], true)?),
        },
        Command::Tokenizer { action } => match action {
            TokenizerCmd::Train => report_stages(&run_stages(&cfg, &[Stage::Tokenizer], true)?),
            TokenizerCmd::Encode { motion, checkpoint } => {
                let vq = VqModel::load(checkpoint.as_deref().unwrap_or(&layout.tokenizer()))?;
                let clip = read_clip(&motion)?;
                print_json(&vq.tokenize(&clip.frames)?)?;
            }
            TokenizerCmd::Decode { tokens, out, checkpoint } => {
                let vq = VqModel::load(checkpoint.as_deref().unwrap_or(&layout.tokenizer()))?;
                let idx: Vec<usize> = tokens
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().with_context(|| format!("bad token index `{s}`")))
                    .collect::<Result<_>>()?;
                let clip = MotionClip {
                    frames: vq.decode(&idx)?,
                    fps: FPS,
                    trace: PrimitiveTrace::new(Vec::new()),
                };
                write_clip(&out, &clip)?;
                eprintln!("wrote {} frames to {}", clip.num_frames(), out.display());
            }
        },
        Command::Embedder { action } => match action {
            EmbedderCmd::Train => report_stages(&run_stages(&cfg, &[Stage::Embedder], true)?),
            EmbedderCmd::Embed { text, motion, checkpoint } => {
                let emb = DualEncoder::load(checkpoint.as_deref().unwrap_or(&layout.embedder()))?;
                let v = match (text, motion) {
                    (Some(t), _) => emb.embed_text(&t)?,
                    (None, Some(m)) => emb.embed_motion(&read_clip(&m)?.frames)?,
                    (None, None) => bail!("pass --text or --motion"),
                };
                print_json(&v)?;
            }
        },
        Command::Sft { action: TrainCmd::Train } => report_stages(&run_stages(&cfg, &[Stage::Sft], true)?),
        Command::Grpo { action: TrainCmd::Train } => report_stages(&run_stages(&cfg, &[Stage::Grpo], true)?),
        Command::Rewards {
            action: RewardsCmd::Eval { task, output_file },
        } => {
            let task = Task::from(task);
            let data = Dataset::load(&layout.dataset())?;
            let tokenizer = VqModel::load(&layout.tokenizer())?;
            let embedder = DualEncoder::load(&layout.embedder())?;
            let models = RewardModels {
                embedder: &embedder,
                tokenizer: &tokenizer,
            };
            let file = fs::File::open(&output_file).with_context(|| format!("opening {}", output_file.display()))?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: Value = serde_json::from_str(&line).with_context(|| format!("line {}", n + 1))?;
                let id = row["id"].as_str().with_context(|| format!("line {}: missing `id`", n + 1))?;
                let raw = row["output"]
                    .as_str()
                    .with_context(|| format!("line {}: missing `output`", n + 1))?;
                let i = data
                    .records
                    .iter()
                    .position(|r| r.id == id)
                    .with_context(|| format!("line {}: unknown record `{id}`", n + 1))?;
                let target = models.target(&data.clips[i].frames, &data.records[i].caption)?;
                let breakdown = models.total_reward(task, &parse_output_text(raw, task), &target)?;
                serde_json::to_writer(&mut out, &json!({ "id": id, "reward": breakdown }))?;
                out.write_all(b"\n")?;
            }
        }
        Command::Eval(args) => {
            let data = Dataset::load(&layout.dataset())?.split(args.split.into());
            let tokenizer = VqModel::load(&layout.tokenizer())?;
            let embedder = DualEncoder::load(&layout.embedder())?;
            let vocab: Vocabulary = read_json(&layout.vocab())?;
            let mut eval_cfg = cfg.eval.clone();
            if let Some(r) = args.repeats {
                eval_cfg.repeats = r;
            }
            eval_cfg.temperature = args.model.temperature;
            eval_cfg.top_k = args.model.top_k;
            eval_cfg.max_new = args.model.max_new;
            let ckpt = args
                .model
                .checkpoint
                .clone()
                .unwrap_or_else(|| if args.model.sft { layout.sft_model() } else { layout.rl_model() });
            let model = if args.random { None } else { Some(TinyLM::load(&ckpt)?) };
            let generator = model.as_ref().map_or(Generator::RandomTokens, Generator::Model);
            let ctx = EvalContext {
                vocab: &vocab,
                tokenizer: &tokenizer,
                embedder: &embedder,
                data: &data,
                split: Split::from(args.split).name().to_string(),
            };
            let report = match Task::from(args.task) {
                Task::T2M => eval_t2m(&ctx, generator, &eval_cfg)?,
                Task::M2T => eval_m2t(&ctx, generator, &eval_cfg)?,
            };
            write_json(&args.report, &report)?;
            print_json(&report.scores)?;
        }
        Command::Generate(args) => {
            let b = bundle(&layout, &args.model)?;
            let inf = b.generate(&args.caption, &sampling(&args.model), seed)?;
            print_inference(&inf);
            if let Err(e) = inf.require_valid() {
                bail!(e);
            }
            let out = args.out.unwrap_or_else(|| PathBuf::from("motion.bin"));
            if let Some(clip) = &inf.motion {
                write_clip(&out, clip)?;
                println!("motion: {} frames -> {}", clip.num_frames(), out.display());
            }
        }
        Command::Caption(args) => {
            let b = bundle(&layout, &args.model)?;
            let clip = read_clip(&args.motion)?;
            let inf = b.caption(&clip, &sampling(&args.model), seed)?;
            print_inference(&inf);
            inf.require_valid()?;
        }
        Command::Render { motion, out, stride } => {
            let clip = read_clip(&motion)?;
            write_svg(&out, &render_svg(&clip, stride))?;
        }
        Command::Pipeline {
            action: PipelineCmd::Run { force },
        } => {
            let statuses = run_pipeline(&cfg, force)?;
            report_stages(&statuses);
        }
    }
    Ok(())
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
