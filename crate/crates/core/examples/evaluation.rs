//! Evaluates the SFT checkpoint of a run directory against the random-token baseline
//! on the test split, for both tasks. Missing upstream stages are run first.
//!
//! `cargo run --release --example evaluation -- [run_dir]`

use std::path::PathBuf;

use unified_motion::embedder::DualEncoder;
use unified_motion::metrics::{eval_m2t, eval_t2m, EvalConfig, EvalContext, Generator};
use unified_motion::pipeline::{read_json, run_stages, PipelineConfig, RunLayout, Stage};
use unified_motion::synthdata::{Dataset, Split};
use unified_motion::tokenizer_vq::VqModel;
use unified_motion::vocab_lm::{TinyLM, Vocabulary};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let config = PipelineConfig {
        out_dir: std::env::args().nth(1).map_or_else(|| PathBuf::from("runs/desk"), PathBuf::from),
        ..PipelineConfig::default()
    };
    run_stages(&config, &[Stage::Dataset, Stage::Tokenizer, Stage::Embedder, Stage::Sft], false)?;

    let layout = RunLayout::new(&config.out_dir);
    let test = Dataset::load(&layout.dataset())?.split(Split::Test);
    let tokenizer = VqModel::load(&layout.tokenizer())?;
    let embedder = DualEncoder::load(&layout.embedder())?;
    let vocab: Vocabulary = read_json(&layout.vocab())?;
    let sft = TinyLM::load(&layout.sft_model())?;
    let ctx = EvalContext {
        vocab: &vocab,
        tokenizer: &tokenizer,
        embedder: &embedder,
        data: &test,
        split: Split::Test.name().to_string(),
    };
    let cfg = EvalConfig {
        repeats: 1,
        ..EvalConfig::default()
    };
    for generator in [Generator::RandomTokens, Generator::Model(&sft)] {
        let t2m = eval_t2m(&ctx, generator, &cfg)?;
        let m2t = eval_m2t(&ctx, generator, &cfg)?;
        println!(
            "{}\n  T2M {}\n  M2T {}",
            generator.name(),
            serde_json::to_string(&t2m.scores)?,
            serde_json::to_string(&m2t.scores)?
        );
    }
    Ok(())
}
