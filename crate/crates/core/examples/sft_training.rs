//! Supervised fine-tuning of the tiny LM on both tasks, then sampled format compliance
//! on validation prompts. Dataset and tokenizer come from (or are written to) a run directory.
//!
//! `cargo run --release --example sft_training -- [run_dir] [epochs_phase1] [epochs_phase2]`

use std::path::PathBuf;

use unified_motion::pipeline::{build_vocabulary, fresh_model, run_stages, tokenize_all, PipelineConfig, RunLayout, Stage};
use unified_motion::synthdata::{Dataset, Split};
use unified_motion::tokenizer_vq::VqModel;
use unified_motion::train_sft::{build_examples, run_sft, SftConfig};
use unified_motion::vocab_lm::{parse_output, sample, SampleConfig, Task};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let config = PipelineConfig {
        out_dir: args.next().map_or_else(|| PathBuf::from("runs/desk"), PathBuf::from),
        ..PipelineConfig::default()
    };
    let defaults = SftConfig::default();
    let sft = SftConfig {
        epochs_phase1: args.next().map(|s| s.parse()).transpose()?.unwrap_or(defaults.epochs_phase1),
        epochs_phase2: args.next().map(|s| s.parse()).transpose()?.unwrap_or(defaults.epochs_phase2),
        ..defaults
    };
    run_stages(&config, &[Stage::Dataset, Stage::Tokenizer], false)?;
    let layout = RunLayout::new(&config.out_dir);
    let data = Dataset::load(&layout.dataset())?;
    let tokenizer = VqModel::load(&layout.tokenizer())?;

    let train = data.split(Split::Train);
    let vocab = build_vocabulary(&train, tokenizer.codebook_size())?;
    println!(
        "vocabulary: {} tokens ({} text, {} motion)",
        vocab.len(),
        vocab.base_size(),
        vocab.motion_count()
    );
    let examples = build_examples(&vocab, &train.records, &tokenize_all(&tokenizer, &train)?)?;
    let mut model = fresh_model(&config.lm, &vocab, sft.seed)?;
    let started = std::time::Instant::now();
    let report = run_sft(&mut model, &examples, &sft)?;
    println!(
        "{} steps in {:.1?}, final loss {:.4}",
        report.steps,
        started.elapsed(),
        report.final_loss
    );

    let val = data.split(Split::Val);
    let val_examples = build_examples(&vocab, &val.records, &tokenize_all(&tokenizer, &val)?)?;
    for task in [Task::T2M, Task::M2T] {
        let mut valid = 0;
        for (i, pair) in val_examples.iter().enumerate() {
            let s = pair.get(task);
            let out = sample(&model, &s.ids[..s.prompt_len()], &SampleConfig::default(), i as u64)?;
            let parsed = parse_output(&vocab, &out.ids, task);
            valid += usize::from(parsed.format_valid);
            if i == 0 {
                println!("\n{} sample: {}", task.name(), vocab.decode(&out.ids));
            }
        }
        println!(
            "{} sampled format rate {:.3} over {} prompts",
            task.name(),
            valid as f64 / val_examples.len() as f64,
            val_examples.len()
        );
    }
    Ok(())
}
