use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, gen_clip, render_caption, render_cot, MotionClip, Primitive, PrimitiveKind, PrimitiveTrace, Result, SynthError, FRAME_DIM,
    MAX_PRIMITIVES,
};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"MOFR";
const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 512,
            val: 64,
            test: 128,
            seed: 7,
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub caption: String,
    pub cot: String,
    pub split: Split,
    pub trace: PrimitiveTrace,
}

/// Samples a random valid trace: 1-4 primitives, 16-64 frames in total.
pub fn sample_trace<R: Rng>(rng: &mut R) -> PrimitiveTrace {
    let n = rng.gen_range(1..=MAX_PRIMITIVES);
    let durations: &[usize] = if n == 1 { &[16, 24, 32] } else { &[8, 12, 16] };
    let primitives = (0..n)
        .map(|_| {
            let kind = PrimitiveKind::ALL[rng.gen_range(0..PrimitiveKind::ALL.len())];
            let params = kind
                .param_specs()
                .iter()
                .map(|&(key, lo, hi, integer)| {
                    let v = if key == "direction" {
                        if rng.gen_bool(0.5) {
                            1.0
                        } else {
                            -1.0
                        }
                    } else if integer {
                        rng.gen_range(lo as i64..=hi as i64) as f64
                    } else {
                        rng.gen_range(lo..=hi)
                    };
                    (key.to_string(), v)
                })
                .collect();
            Primitive {
                name: kind.name().to_string(),
                params,
                duration_frames: durations[rng.gen_range(0..durations.len())],
            }
        })
        .collect();
    PrimitiveTrace::new(primitives)
}

/// Generates record `index` (global across splits) from the dataset seed.
pub fn gen_record(index: usize, split: Split, seed: u64) -> Result<(DatasetRecord, MotionClip)> {
    let record_seed = derive_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed);
    let trace = sample_trace(&mut rng);
    let clip = gen_clip(&trace, derive_seed(record_seed, 1))?;
    let caption = render_caption(&trace, derive_seed(record_seed, 2))?;
    let cot = render_cot(&trace, derive_seed(record_seed, 3))?;
    let record = DatasetRecord {
        id: format!("{}_{index:05}", split.name()),
        caption,
        cot,
        split,
        trace,
    };
    Ok((record, clip))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Serializes a clip blob: magic, u32 T, u32 D, u32 fps, then f32 LE values.
pub fn write_clip(path: &Path, clip: &MotionClip) -> Result<()> {
    let (t, d) = (clip.frames.shape[0], clip.frames.shape[1]);
    let mut buf = Vec::with_capacity(16 + 4 * t * d);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&clip.fps.to_le_bytes());
    for v in &clip.frames.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Reads a clip blob; the returned trace is empty (traces live in the manifest).
pub fn read_clip(path: &Path) -> Result<MotionClip> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let fmt_err = |msg: String| SynthError::Format {
        path: path.display().to_string(),
        msg,
    };
    if bytes.len() < 16 || &bytes[..4] != CLIP_MAGIC {
        return Err(fmt_err(format!("expected magic bytes {:?} (\"MOFR\")", CLIP_MAGIC)));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (t, d, fps) = (u(4) as usize, u(8) as usize, u(12));
    if bytes.len() != 16 + 4 * t * d {
        return Err(fmt_err(format!("payload length {} does not match {t}x{d}", bytes.len() - 16)));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(MotionClip {
        frames: Tensor { shape: vec![t, d], values },
        fps,
        trace: PrimitiveTrace::new(vec![]),
    })
}

fn clip_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("clips").join(format!("{id}.mofr"))
}

/// Writes `manifest.jsonl` and one blob per record under `out`.
/// Records are generated in parallel; output bytes equal sequential generation.
pub fn gen_dataset(config: &DatasetConfig, out: &Path) -> Result<Vec<DatasetRecord>> {
    if config.train == 0 || config.val == 0 || config.test == 0 {
        return Err(SynthError::InvalidTrace {
            field: "config".into(),
            msg: "every split needs at least one record".into(),
        });
    }
    let plan: Vec<(usize, Split)> = (0..config.train)
        .map(|_| Split::Train)
        .chain((0..config.val).map(|_| Split::Val))
        .chain((0..config.test).map(|_| Split::Test))
        .enumerate()
        .collect();
    let generated: Vec<(DatasetRecord, MotionClip)> = plan
        .par_iter()
        .map(|&(i, split)| gen_record(i, split, config.seed))
        .collect::<Result<_>>()?;

    fs::create_dir_all(out.join("clips")).map_err(|e| io_err(out, e))?;
    let manifest_path = out.join(MANIFEST);
    let mut manifest = Vec::new();
    for (record, clip) in &generated {
        serde_json::to_writer(&mut manifest, record).map_err(|e| io_err(&manifest_path, e))?;
        manifest.push(b'\n');
        write_clip(&clip_path(out, &record.id), clip)?;
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| io_err(&manifest_path, e))?;
    Ok(generated.into_iter().map(|(r, _)| r).collect())
}

/// A loaded dataset: manifest records with their clips (trace attached).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub clips: Vec<MotionClip>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let mut records = Vec::new();
        let mut clips = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: DatasetRecord = serde_json::from_str(line).map_err(|e| SynthError::Format {
                path: manifest_path.display().to_string(),
                msg: format!("line {}: {e}", line_no + 1),
            })?;
            let mut clip = read_clip(&clip_path(dir, &record.id))?;
            if clip.frames.shape[1] != FRAME_DIM {
                return Err(SynthError::Format {
                    path: clip_path(dir, &record.id).display().to_string(),
                    msg: format!("frame dimension {} != {FRAME_DIM}", clip.frames.shape[1]),
                });
            }
            clip.trace = record.trace.clone();
            records.push(record);
            clips.push(clip);
        }
        Ok(Self { records, clips })
    }

    /// In-memory dataset generated without touching disk. Clip values are
    /// rounded through f32 exactly as a write/load round trip would.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        let plan: Vec<(usize, Split)> = (0..config.train)
            .map(|_| Split::Train)
            .chain((0..config.val).map(|_| Split::Val))
            .chain((0..config.test).map(|_| Split::Test))
            .enumerate()
            .collect();
        let mut records = Vec::with_capacity(plan.len());
        let mut clips = Vec::with_capacity(plan.len());
        for (i, split) in plan {
            let (r, mut c) = gen_record(i, split, config.seed)?;
            c.frames.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
            records.push(r);
            clips.push(c);
        }
        Ok(Self { records, clips })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
        }
    }

    pub fn split(&self, split: Split) -> Self {
        self.subset(&self.split_indices(split))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn counts_unique_ids_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            train: 40,
            val: 8,
            test: 16,
            seed: 7,
        };
        let recs = gen_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(recs.len(), 64);
        let ids: HashSet<_> = recs.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 64);

        let dir2 = tempfile::tempdir().unwrap();
        gen_dataset(&cfg, dir2.path()).unwrap();
        let a = fs::read(dir.path().join(MANIFEST)).unwrap();
        let b = fs::read(dir2.path().join(MANIFEST)).unwrap();
        assert_eq!(a, b);
        let id = &recs[5].id;
        assert_eq!(
            fs::read(clip_path(dir.path(), id)).unwrap(),
            fs::read(clip_path(dir2.path(), id)).unwrap()
        );

        let loaded = Dataset::load(dir.path()).unwrap();
        let mem = Dataset::generate(&cfg).unwrap();
        assert_eq!(loaded.records, mem.records);
        assert_eq!(loaded.clips, mem.clips);
    }

    #[test]
    fn bad_clip_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mofr");
        fs::write(&p, b"JUNKJUNKJUNKJUNK").unwrap();
        let e = read_clip(&p).unwrap_err().to_string();
        assert!(e.contains("x.mofr") && e.contains("MOFR"), "{e}");
    }

    #[test]
    fn unwritable_path_fails_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let e = gen_dataset(
            &DatasetConfig {
                train: 1,
                val: 1,
                test: 1,
                seed: 0,
            },
            &blocker.join("sub"),
        )
        .unwrap_err()
        .to_string();
        assert!(e.contains("file"), "{e}");
    }
}
