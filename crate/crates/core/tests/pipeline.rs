//! Stage caching, failure reporting and the command-line front end on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::Command;

use unified_motion::pipeline::{run_pipeline, run_stages, PipelineConfig, PipelineError, RunLayout, Stage, StageStatus};
use unified_motion::synthdata::DatasetConfig;

fn tiny_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        out_dir: out.to_path_buf(),
        seed: Some(3),
        ..PipelineConfig::default()
    };
    cfg.dataset = DatasetConfig {
        train: 16,
        val: 4,
        test: 8,
        seed: 0,
    };
    cfg.tokenizer.codebook_size = 16;
    cfg.tokenizer.latent_dim = 16;
    cfg.tokenizer.hidden = 16;
    cfg.tokenizer.steps = 10;
    cfg.tokenizer.batch_size = 4;
    cfg.embedder.embed_dim = 4;
    cfg.embedder.steps = 10;
    cfg.embedder.batch_size = 4;
    cfg.lm.d_model = 16;
    cfg.lm.d_ff = 32;
    cfg.sft.epochs_phase1 = 1;
    cfg.sft.epochs_phase2 = 1;
    cfg.grpo.steps = 2;
    cfg.grpo.group_size = 2;
    cfg.grpo.max_new = 40;
    cfg.eval.pool_size = 4;
    cfg.eval.trials = 10;
    cfg.eval.repeats = 1;
    cfg.eval.mmodality_captions = 2;
    cfg.eval.mmodality_per_caption = 2;
    cfg.eval.diversity_subset = 3;
    cfg.eval.max_new = 40;
    cfg
}

fn ran(statuses: &[StageStatus]) -> Vec<&'static str> {
    statuses.iter().filter(|s| s.ran).map(|s| s.stage).collect()
}

#[test]
fn unchanged_stages_are_skipped_and_changes_rerun_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let first = run_pipeline(&cfg, false).unwrap();
    assert_eq!(ran(&first).len(), 6);
    let layout = RunLayout::new(dir.path());
    for name in unified_motion::pipeline::EVAL_REPORTS {
        assert!(layout.eval_report(name).exists(), "{name}");
    }

    let again = run_pipeline(&cfg, false).unwrap();
    assert!(ran(&again).is_empty());
    assert_eq!(
        first.iter().map(|s| &s.config_hash).collect::<Vec<_>>(),
        again.iter().map(|s| &s.config_hash).collect::<Vec<_>>()
    );

    cfg.grpo.steps = 3;
    assert_eq!(ran(&run_pipeline(&cfg, false).unwrap()), ["grpo", "eval"]);

    fs::remove_file(layout.embedder()).unwrap();
    assert_eq!(ran(&run_pipeline(&cfg, false).unwrap()), ["embedder"]);

    assert_eq!(ran(&run_stages(&cfg, &[Stage::Dataset], true).unwrap()), ["dataset"]);
}

#[test]
fn corrupted_checkpoint_is_reported_with_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run_stages(&cfg, &[Stage::Dataset, Stage::Tokenizer], false).unwrap();
    let layout = RunLayout::new(dir.path());
    fs::write(layout.tokenizer(), b"not a checkpoint").unwrap();
    let err = run_stages(&cfg, &[Stage::Sft], false).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: "sft", .. }), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("MCKP") && msg.contains("vq.ckpt"), "{msg}");
    assert!(!dir.path().join("sft").join("stage.json").exists());
}

#[test]
fn stage_hashes_follow_upstream_changes() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_config(dir.path());
    let mut b = a.clone();
    b.tokenizer.steps += 1;
    let (ha, hb) = (a.resolved().stage_hashes(), b.resolved().stage_hashes());
    let same: Vec<bool> = ha.iter().zip(&hb).map(|(x, y)| x == y).collect();
    // dataset and embedder do not depend on the tokenizer
    assert_eq!(same, [true, false, true, false, false, false]);
}

fn umo(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_umo")).args(args).output().expect("running umo")
}

#[test]
fn cli_generates_data_and_renders_a_clip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().to_str().unwrap();
    let out = umo(&[
        "--run-dir",
        run,
        "--set",
        "dataset.train=4",
        "--set",
        "dataset.val=2",
        "--set",
        "dataset.test=2",
        "dataset",
        "gen",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(dir.path().join("dataset").join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 8);

    let clip = dir.path().join("dataset").join("clips").join("train_00000.mofr");
    let svg = dir.path().join("clip.svg");
    let out = umo(&[
        "render",
        "--motion",
        clip.to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
        "--stride",
        "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn cli_rejects_unknown_override_keys() {
    let out = umo(&["--set", "grpo.stepz=5", "dataset", "gen", "--out", "/nonexistent/never-written"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("grpo.stepz"));
}
