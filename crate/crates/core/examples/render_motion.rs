//! Renders a synthetic clip as a strip of skeleton frames in SVG.
//!
//! `cargo run --release --example render_motion -- [record_index] [out.svg] [stride]`

use std::path::PathBuf;

use unified_motion::pipeline::render_svg;
use unified_motion::synthdata::{gen_record, Split};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let index: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("umo_motion.svg"), PathBuf::from);
    let stride: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(4);

    let (record, clip) = gen_record(index, Split::Train, 7)?;
    let svg = render_svg(&clip, stride);
    std::fs::write(&out, &svg)?;
    println!("{}: {}", record.id, record.caption);
    println!("{} frames, every {stride}th drawn, written to {}", clip.num_frames(), out.display());
    Ok(())
}
