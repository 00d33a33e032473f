//! GRPO post-training from the SFT checkpoint of a run directory, printing reward,
//! KL and clipped gradient norm as training proceeds. Missing upstream stages are run first.
//!
//! `cargo run --release --example grpo_training -- [run_dir] [steps]`

use std::path::PathBuf;

use unified_motion::embedder::DualEncoder;
use unified_motion::pipeline::{grpo_prompts, read_json, run_stages, tokenize_all, GrpoSummary, PipelineConfig, RunLayout, Stage};
use unified_motion::rewards::RewardModels;
use unified_motion::synthdata::{Dataset, Split};
use unified_motion::tokenizer_vq::VqModel;
use unified_motion::train_grpo::{run_grpo, GrpoConfig};
use unified_motion::vocab_lm::{TinyLM, Vocabulary};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let config = PipelineConfig {
        out_dir: args.next().map_or_else(|| PathBuf::from("runs/desk"), PathBuf::from),
        ..PipelineConfig::default()
    };
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    run_stages(&config, &[Stage::Dataset, Stage::Tokenizer, Stage::Embedder, Stage::Sft], false)?;

    let layout = RunLayout::new(&config.out_dir);
    let train = Dataset::load(&layout.dataset())?.split(Split::Train);
    let tokenizer = VqModel::load(&layout.tokenizer())?;
    let embedder = DualEncoder::load(&layout.embedder())?;
    let vocab: Vocabulary = read_json(&layout.vocab())?;
    let mut reference = TinyLM::load(&layout.sft_model())?;
    reference.params.freeze();
    let mut policy = TinyLM::load(&layout.sft_model())?;
    let rewards = RewardModels {
        embedder: &embedder,
        tokenizer: &tokenizer,
    };
    let prompts = grpo_prompts(&vocab, &train, &tokenize_all(&tokenizer, &train)?, &rewards)?;

    let cfg = GrpoConfig {
        steps,
        ..GrpoConfig::default()
    };
    let every = (steps / 10).max(1);
    let (mut window_reward, mut window_len) = (0.0, 0);
    let report = run_grpo(&mut policy, &reference, &vocab, &rewards, &prompts, &cfg, |e| {
        window_reward += e.mean_reward;
        window_len += 1;
        if (e.step + 1) % every == 0 {
            println!(
                "step {:>5}  mean reward {:.3}  kl {:.4}  grad norm {:.3} -> {:.3}",
                e.step + 1,
                window_reward / window_len as f64,
                e.kl,
                e.grad_norm,
                e.clipped_norm
            );
            (window_reward, window_len) = (0.0, 0);
        }
    })?;
    let s = GrpoSummary::from_report(&report);
    println!(
        "\nfirst {} steps {:.3}, last {} steps {:.3}, max clipped norm {:.4}",
        s.window, s.first_window_reward, s.window, s.last_window_reward, s.max_clipped_norm
    );
    Ok(())
}
