//! Trains the motion tokenizer on a synthetic dataset and reports reconstruction quality.
//!
//! `cargo run --release --example motion_tokenizer -- [steps]`

use unified_motion::synthdata::{Dataset, DatasetConfig, Split};
use unified_motion::tokenizer_vq::{train_tokenizer, VqConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let data = Dataset::generate(&DatasetConfig::default())?;
    let cfg = VqConfig {
        steps,
        ..VqConfig::default()
    };
    let started = std::time::Instant::now();
    let (model, report) = train_tokenizer(&data.split(Split::Train), &data.split(Split::Val), &cfg)?;
    println!("trained {} steps in {:.1?}", report.steps, started.elapsed());
    println!(
        "val mse {:.5}  mean-pose mse {:.5}  ratio {:.1}x",
        report.val_mse,
        report.mean_pose_mse,
        report.mean_pose_mse / report.val_mse
    );
    println!("perplexity {:.1} with {} codes in use", report.perplexity, report.codes_used);
    let clip = &data.split(Split::Test).clips[0];
    let tokens = model.tokenize(&clip.frames)?;
    println!("first test clip ({} frames) -> {:?}", clip.num_frames(), tokens);
    Ok(())
}
