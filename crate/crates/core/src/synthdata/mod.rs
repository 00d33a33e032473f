//! Procedural motion-language data: primitive traces, planar skeleton clips,
//! captions and step-by-step reasoning traces, plus the on-disk dataset format.

mod dataset;
mod motion;
mod text;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{gen_dataset, gen_record, read_clip, sample_trace, write_clip, Dataset, DatasetConfig, DatasetRecord, Split, CLIP_MAGIC};
pub use motion::{bone_lengths, gen_clip, template_pose, BONES, JITTER_SIGMA};
pub use text::{primitives_in_caption, primitives_in_cot, render_caption, render_cot, text_tokens, CONNECTORS};

use crate::tensor::Tensor;

/// Planar joints: root, chest, neck, head, left hand, right hand, left foot, right foot.
pub const NUM_JOINTS: usize = 8;
pub const FRAME_DIM: usize = 2 * NUM_JOINTS;
pub const FPS: u32 = 16;
/// Temporal downsampling of the motion tokenizer; every duration is a multiple of it.
pub const DOWNSAMPLE: usize = 4;
pub const MAX_PRIMITIVES: usize = 4;
pub const MAX_COORD: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid trace field `{field}`: {msg}")]
    InvalidTrace { field: String, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> SynthError {
    SynthError::InvalidTrace {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Walk,
    Turn,
    Wave,
    Squat,
    Jump,
    RaiseArm,
    StepSide,
    Stand,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 8] = [
        PrimitiveKind::Walk,
        PrimitiveKind::Turn,
        PrimitiveKind::Wave,
        PrimitiveKind::Squat,
        PrimitiveKind::Jump,
        PrimitiveKind::RaiseArm,
        PrimitiveKind::StepSide,
        PrimitiveKind::Stand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Walk => "walk",
            PrimitiveKind::Turn => "turn",
            PrimitiveKind::Wave => "wave",
            PrimitiveKind::Squat => "squat",
            PrimitiveKind::Jump => "jump",
            PrimitiveKind::RaiseArm => "raise_arm",
            PrimitiveKind::StepSide => "step_side",
            PrimitiveKind::Stand => "stand",
        }
    }

    /// Documented parameter ranges: `(name, min, max, integer_valued)`.
    pub fn param_specs(self) -> &'static [(&'static str, f64, f64, bool)] {
        match self {
            PrimitiveKind::Walk => &[("steps", 1.0, 4.0, true), ("stride", 0.15, 0.35, false)],
            PrimitiveKind::Turn => &[("degrees", 45.0, 180.0, false)],
            PrimitiveKind::Wave => &[("arm", 0.0, 1.0, true), ("repetitions", 1.0, 3.0, true)],
            PrimitiveKind::Squat => &[("depth", 0.1, 0.25, false)],
            PrimitiveKind::Jump => &[("height", 0.1, 0.35, false)],
            PrimitiveKind::RaiseArm => &[("arm", 0.0, 1.0, true), ("height", 0.5, 1.0, false)],
            PrimitiveKind::StepSide => &[("direction", -1.0, 1.0, true), ("distance", 0.1, 0.4, false)],
            PrimitiveKind::Stand => &[],
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        PrimitiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid("name", format!("unknown primitive `{s}`")))
    }
}

/// One atomic motion segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub duration_frames: usize,
}

impl Primitive {
    pub fn new(kind: PrimitiveKind, params: &[(&str, f64)], duration_frames: usize) -> Self {
        Self {
            name: kind.name().to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            duration_frames,
        }
    }

    pub fn kind(&self) -> Result<PrimitiveKind> {
        self.name.parse()
    }

    /// Parameter value; callers only ask after validation.
    pub fn param(&self, key: &str) -> f64 {
        self.params.get(key).copied().unwrap_or(0.0)
    }
}

/// Ordered list of primitives a clip, caption and reasoning trace derive from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrimitiveTrace {
    pub primitives: Vec<Primitive>,
}

impl PrimitiveTrace {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    pub fn total_frames(&self) -> usize {
        self.primitives.iter().map(|p| p.duration_frames).sum()
    }

    pub fn kinds(&self) -> Result<Vec<PrimitiveKind>> {
        self.primitives.iter().map(Primitive::kind).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.primitives.len();
        if n == 0 || n > MAX_PRIMITIVES {
            return Err(invalid("primitives", format!("length {n} outside 1..={MAX_PRIMITIVES}")));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let kind = p
                .name
                .parse::<PrimitiveKind>()
                .map_err(|_| invalid(format!("primitives[{i}].name"), format!("unknown primitive `{}`", p.name)))?;
            if p.duration_frames == 0 || p.duration_frames % DOWNSAMPLE != 0 {
                return Err(invalid(
                    format!("primitives[{i}].duration_frames"),
                    format!("{} is not a positive multiple of {DOWNSAMPLE}", p.duration_frames),
                ));
            }
            let specs = kind.param_specs();
            for key in p.params.keys() {
                if !specs.iter().any(|(name, ..)| name == key) {
                    return Err(invalid(
                        format!("primitives[{i}].params.{key}"),
                        format!("not a parameter of `{kind}`"),
                    ));
                }
            }
            for &(key, lo, hi, integer) in specs {
                let field = format!("primitives[{i}].params.{key}");
                let v = *p.params.get(key).ok_or_else(|| invalid(field.clone(), "missing"))?;
                if !v.is_finite() || v < lo || v > hi {
                    return Err(invalid(field, format!("{v} outside [{lo}, {hi}]")));
                }
                if integer && v.fract() != 0.0 {
                    return Err(invalid(field, format!("{v} must be integer-valued")));
                }
                if key == "direction" && v == 0.0 {
                    return Err(invalid(field, "must be -1 or 1"));
                }
            }
        }
        Ok(())
    }
}

/// A generated (or loaded) clip: `[T, FRAME_DIM]` joint coordinates in body-lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub frames: Tensor,
    pub fps: u32,
    pub trace: PrimitiveTrace,
}

impl MotionClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn joint(&self, t: usize, j: usize) -> (f64, f64) {
        let f = self.frame(t);
        (f[2 * j], f[2 * j + 1])
    }
}

/// Deterministic 64-bit mix of a seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_offending_field() {
        let t = PrimitiveTrace::new(vec![Primitive::new(PrimitiveKind::Walk, &[("steps", 9.0), ("stride", 0.2)], 16)]);
        let e = t.validate().unwrap_err().to_string();
        assert!(e.contains("primitives[0].params.steps"), "{e}");

        let mut bad = Primitive::new(PrimitiveKind::Stand, &[], 16);
        bad.name = "moonwalk".into();
        let e = PrimitiveTrace::new(vec![bad]).validate().unwrap_err().to_string();
        assert!(e.contains("primitives[0].name"), "{e}");

        let t = PrimitiveTrace::new(vec![Primitive::new(PrimitiveKind::Stand, &[], 18)]);
        assert!(t.validate().unwrap_err().to_string().contains("duration_frames"));

        assert!(PrimitiveTrace::new(vec![]).validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
