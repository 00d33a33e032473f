//! Runs every pipeline stage (dataset, tokenizer, embedder, SFT, GRPO, evaluation) and
//! prints the evaluation summary. Stages whose config is unchanged are skipped on rerun.
//!
//! `cargo run --release --example desk_pipeline -- [config.json] [run_dir]`
//!
//! The default configuration takes roughly half an hour on one CPU core.

use std::path::PathBuf;

use unified_motion::pipeline::{load_eval_report, run_pipeline, PipelineConfig, RunLayout};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut config = match args.next() {
        Some(p) if p != "-" => PipelineConfig::load(&PathBuf::from(p))?,
        _ => PipelineConfig::default(),
    };
    if let Some(dir) = args.next() {
        config.out_dir = PathBuf::from(dir);
    }
    for status in run_pipeline(&config, false)? {
        println!(
            "{:<10} {} {}",
            status.stage,
            &status.config_hash[..12],
            if status.ran { "ran" } else { "up to date" }
        );
    }

    let layout = RunLayout::new(&config.out_dir);
    println!(
        "\n{:<8} {:>7} {:>7} {:>7} {:>8} {:>7}",
        "T2M", "format", "top1", "top3", "FID", "MMDist"
    );
    for name in ["random", "sft", "rl"] {
        let s = load_eval_report(&layout, &format!("{name}_t2m"))?.scores;
        println!(
            "{name:<8} {:>7.3} {:>7.3} {:>7.3} {:>8.3} {:>7.3}",
            s.format_rate,
            s.r_precision_top1.unwrap_or(f64::NAN),
            s.r_precision_top3.unwrap_or(f64::NAN),
            s.fid.unwrap_or(f64::NAN),
            s.mm_dist.unwrap_or(f64::NAN)
        );
    }
    println!(
        "\n{:<8} {:>7} {:>7} {:>7} {:>8} {:>7}",
        "M2T", "format", "BLEU1", "BLEU4", "ROUGE-L", "CIDEr"
    );
    for name in ["random", "sft", "rl"] {
        let s = load_eval_report(&layout, &format!("{name}_m2t"))?.scores;
        println!(
            "{name:<8} {:>7.3} {:>7.2} {:>7.2} {:>8.2} {:>7.2}",
            s.format_rate,
            s.bleu1.unwrap_or(f64::NAN),
            s.bleu4.unwrap_or(f64::NAN),
            s.rouge_l.unwrap_or(f64::NAN),
            s.cider.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
