//! Trains the motion/text dual encoder and reports cross-modal alignment.
//!
//! `cargo run --release --example contrastive_embedder -- [steps]`

use unified_motion::embedder::{cosine, train_embedder, EmbedderConfig};
use unified_motion::synthdata::{Dataset, DatasetConfig, Split};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let data = Dataset::generate(&DatasetConfig::default())?;
    let cfg = EmbedderConfig {
        steps,
        ..EmbedderConfig::default()
    };
    let started = std::time::Instant::now();
    let (model, report) = train_embedder(&data.split(Split::Train), &data.split(Split::Val), &cfg)?;
    println!("trained {steps} steps in {:.1?}", started.elapsed());
    println!(
        "loss {:.3} -> {:.3} (ln B = {:.3})",
        report.initial_loss,
        report.final_loss,
        (cfg.batch_size as f64).ln()
    );
    println!(
        "val cosine matched {:.3} mismatched {:.3} gap {:.3}",
        report.val_matched_cosine,
        report.val_mismatched_cosine,
        report.val_matched_cosine - report.val_mismatched_cosine
    );
    println!("val top-1 retrieval (pool 32): {:.3}", report.val_top1);
    let test = data.split(Split::Test);
    let m = model.embed_motion(&test.clips[0].frames)?;
    for r in test.records.iter().take(3) {
        println!(
            "cos(clip0, {:?}) = {:.3}",
            r.caption,
            cosine(&m, &model.embed_text(&r.caption)?).unwrap_or(0.0)
        );
    }
    Ok(())
}
