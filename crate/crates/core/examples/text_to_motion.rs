//! Generates a motion from a caption with a trained run, renders it to SVG, and captions
//! a held-out clip. Uses the GRPO checkpoint when present, else the SFT one.
//!
//! `cargo run --release --example text_to_motion -- [run_dir] ["caption"]`

use std::path::PathBuf;

use unified_motion::pipeline::{render_svg, run_stages, InferenceBundle, PipelineConfig, RunLayout, Stage};
use unified_motion::synthdata::{Dataset, Split};
use unified_motion::vocab_lm::SampleConfig;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let config = PipelineConfig {
        out_dir: args.next().map_or_else(|| PathBuf::from("runs/desk"), PathBuf::from),
        ..PipelineConfig::default()
    };
    let caption = args
        .next()
        .unwrap_or_else(|| "a person walks forward and then waves the right hand".into());
    run_stages(&config, &[Stage::Dataset, Stage::Tokenizer, Stage::Sft], false)?;

    let layout = RunLayout::new(&config.out_dir);
    let rl = layout.rl_model().exists();
    let bundle = InferenceBundle::from_run(&layout, rl)?;
    println!("checkpoint: {}", if rl { "sft+rl" } else { "sft" });
    let sampling = SampleConfig::default();

    let out = bundle.generate(&caption, &sampling, 0)?;
    println!("caption: {caption}\noutput: {}", out.raw);
    match &out.motion {
        Some(clip) => {
            let path = std::env::temp_dir().join("umo_generated.svg");
            std::fs::write(&path, render_svg(clip, 4))?;
            println!("{} frames rendered to {}", clip.num_frames(), path.display());
        }
        None => println!("output did not follow the motion grammar"),
    }

    let test = Dataset::load(&layout.dataset())?.split(Split::Test);
    let described = bundle.caption(&test.clips[0], &sampling, 0)?;
    println!(
        "\nreference: {}\ngenerated: {}",
        test.records[0].caption,
        described.parsed.answer_text.as_deref().unwrap_or("<invalid>")
    );
    Ok(())
}
