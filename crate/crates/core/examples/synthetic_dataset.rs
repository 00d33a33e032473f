//! Generates the synthetic motion-text corpus and prints a few records.
//!
//! `cargo run --release --example synthetic_dataset -- [out_dir]`

use std::path::PathBuf;

use unified_motion::synthdata::{bone_lengths, gen_dataset, template_pose, Dataset, DatasetConfig, Split};

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("umo_dataset"), PathBuf::from);
    let cfg = DatasetConfig::default();
    let records = gen_dataset(&cfg, &out)?;
    println!("wrote {} records to {}", records.len(), out.display());

    let data = Dataset::load(&out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{:>5}: {} records", split.name(), data.split_indices(split).len());
    }
    for (record, clip) in data.records.iter().zip(&data.clips).take(3) {
        println!("\n{} ({} frames at {} fps)", record.id, clip.num_frames(), clip.fps);
        println!("  caption: {}", record.caption);
        println!("  reasoning: {}", record.cot);
    }

    // every frame keeps the template skeleton's bone lengths
    let reference = bone_lengths(&template_pose());
    let worst = data
        .clips
        .iter()
        .flat_map(|c| (0..c.num_frames()).map(move |t| bone_lengths(c.frame(t))))
        .flat_map(|b| b.into_iter().zip(reference).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    println!("\nlargest bone-length deviation over the corpus: {worst:.2e}");
    Ok(())
}
