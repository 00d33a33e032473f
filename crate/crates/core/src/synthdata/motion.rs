use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{MotionClip, PrimitiveKind, PrimitiveTrace, Result, FPS, FRAME_DIM, MAX_COORD, NUM_JOINTS};
use crate::tensor::Tensor;

/// Joint-angle jitter in radians; with bones no longer than one body-length the
/// per-bone positional jitter stays below this many body-lengths.
pub const JITTER_SIGMA: f64 = 0.01;

/// `(parent, child, length)`; bones are listed parent-first.
pub const BONES: [(usize, usize, f64); 7] = [
    (0, 1, 0.25), // root -> chest
    (1, 2, 0.15), // chest -> neck
    (2, 3, 0.12), // neck -> head
    (2, 4, 0.45), // neck -> left hand
    (2, 5, 0.45), // neck -> right hand
    (0, 6, 0.50), // root -> left foot
    (0, 7, 0.50), // root -> right foot
];

const HEAD: usize = 2;
const LARM: usize = 3;
const RARM: usize = 4;
const LLEG: usize = 5;
const RLEG: usize = 6;

fn deg(d: f64) -> f64 {
    d * PI / 180.0
}

/// Absolute bone angles (radians from +x, y up) of the neutral pose.
fn neutral_angles() -> [f64; 7] {
    [deg(90.0), deg(90.0), deg(90.0), deg(250.0), deg(290.0), deg(260.0), deg(280.0)]
}

fn neutral_root_height() -> f64 {
    -BONES[LLEG].2 * neutral_angles()[LLEG].sin()
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    root: (f64, f64),
    angles: [f64; 7],
}

impl Pose {
    fn neutral(x: f64) -> Self {
        Self {
            root: (x, neutral_root_height()),
            angles: neutral_angles(),
        }
    }

    fn joints(&self, jitter: &[f64; 7]) -> [f64; FRAME_DIM] {
        let mut pos = [(0.0, 0.0); NUM_JOINTS];
        pos[0] = self.root;
        for (b, &(parent, child, len)) in BONES.iter().enumerate() {
            let a = self.angles[b] + jitter[b];
            let (px, py) = pos[parent];
            pos[child] = (px + len * a.cos(), py + len * a.sin());
        }
        let mut out = [0.0; FRAME_DIM];
        for (j, (x, y)) in pos.iter().enumerate() {
            out[2 * j] = x.clamp(-MAX_COORD, MAX_COORD);
            out[2 * j + 1] = y.clamp(-MAX_COORD, MAX_COORD);
        }
        out
    }
}

/// Joint coordinates of the neutral pose with the root at the origin of x.
pub fn template_pose() -> [f64; FRAME_DIM] {
    Pose::neutral(0.0).joints(&[0.0; 7])
}

/// Distance between connected joints of one frame, in `BONES` order.
pub fn bone_lengths(frame: &[f64]) -> [f64; 7] {
    let mut out = [0.0; 7];
    for (b, &(p, c, _)) in BONES.iter().enumerate() {
        let dx = frame[2 * c] - frame[2 * p];
        let dy = frame[2 * c + 1] - frame[2 * p + 1];
        out[b] = (dx * dx + dy * dy).sqrt();
    }
    out
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Rise over the first `edge` of progress, hold, and fall over the last `edge`.
fn envelope(p: f64, edge: f64) -> f64 {
    smoothstep(p / edge).min(smoothstep((1.0 - p) / edge))
}

fn mirror(a: f64) -> f64 {
    PI - a
}

/// Pose of one primitive at progress `p` in `[0, 1)`, starting from root x `x0`.
/// Every primitive starts and ends in the neutral pose.
fn primitive_pose(kind: PrimitiveKind, prim: &super::Primitive, p: f64, x0: f64) -> Pose {
    let mut pose = Pose::neutral(x0);
    let n = neutral_angles();
    match kind {
        PrimitiveKind::Stand => {}
        PrimitiveKind::Walk => {
            let steps = prim.param("steps");
            let stride = prim.param("stride");
            pose.root.0 = x0 + steps * stride * p;
            let s = (2.0 * PI * steps * p).sin();
            pose.angles[LLEG] = n[LLEG] + deg(20.0) * s;
            pose.angles[RLEG] = n[RLEG] - deg(20.0) * s;
            pose.angles[LARM] = n[LARM] - deg(15.0) * s;
            pose.angles[RARM] = n[RARM] + deg(15.0) * s;
            pose.root.1 += 0.02 * (2.0 * PI * steps * p).sin().abs();
        }
        PrimitiveKind::Turn => {
            let frac = prim.param("degrees") / 180.0 * (PI * p).sin();
            for b in [LARM, RARM, LLEG, RLEG] {
                pose.angles[b] = n[b] + frac * (mirror(n[b]) - n[b]);
            }
            pose.angles[HEAD] = n[HEAD] + deg(15.0) * frac;
        }
        PrimitiveKind::Wave => {
            let reps = prim.param("repetitions");
            let right = prim.param("arm") >= 0.5;
            let e = envelope(p, 0.25);
            let osc = deg(25.0) * (2.0 * PI * reps * p).sin() * e;
            if right {
                pose.angles[RARM] = n[RARM] + e * (deg(420.0) - n[RARM]) + osc;
            } else {
                pose.angles[LARM] = n[LARM] + e * (deg(120.0) - n[LARM]) - osc;
            }
        }
        PrimitiveKind::Squat => {
            let drop = prim.param("depth") * (PI * p).sin();
            let leg = BONES[LLEG].2;
            let y = neutral_root_height() - drop;
            pose.root.1 = y;
            let dx = (leg * leg - y * y).max(0.0).sqrt();
            pose.angles[LLEG] = (-y).atan2(-dx) + 2.0 * PI;
            pose.angles[RLEG] = (-y).atan2(dx) + 2.0 * PI;
            let lift = deg(40.0) * (PI * p).sin();
            pose.angles[LARM] = n[LARM] + lift;
            pose.angles[RARM] = n[RARM] - lift;
        }
        PrimitiveKind::Jump => {
            let s = (PI * p).sin();
            pose.root.1 += prim.param("height") * s * s;
            pose.angles[LLEG] = n[LLEG] - deg(10.0) * s;
            pose.angles[RLEG] = n[RLEG] + deg(10.0) * s;
            pose.angles[LARM] = n[LARM] - deg(50.0) * s;
            pose.angles[RARM] = n[RARM] + deg(50.0) * s;
        }
        PrimitiveKind::RaiseArm => {
            let right = prim.param("arm") >= 0.5;
            let e = envelope(p, 0.35) * prim.param("height");
            if right {
                pose.angles[RARM] = n[RARM] + e * deg(160.0);
            } else {
                pose.angles[LARM] = n[LARM] - e * deg(160.0);
            }
        }
        PrimitiveKind::StepSide => {
            let dir = prim.param("direction");
            pose.root.0 = x0 + dir * prim.param("distance") * smoothstep(p);
            let spread = deg(15.0) * (PI * p).sin();
            if dir > 0.0 {
                pose.angles[RLEG] = n[RLEG] + spread;
            } else {
                pose.angles[LLEG] = n[LLEG] - spread;
            }
        }
    }
    pose
}

fn root_advance(kind: PrimitiveKind, prim: &super::Primitive) -> f64 {
    match kind {
        PrimitiveKind::Walk => prim.param("steps") * prim.param("stride"),
        PrimitiveKind::StepSide => prim.param("direction") * prim.param("distance"),
        _ => 0.0,
    }
}

/// Renders a validated trace into a `[T, 16]` clip with seeded joint-angle jitter
/// (normal, clamped to three standard deviations).
pub fn gen_clip(trace: &PrimitiveTrace, seed: u64) -> Result<MotionClip> {
    trace.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, JITTER_SIGMA).expect("valid sigma");
    let total = trace.total_frames();
    let mut values = Vec::with_capacity(total * FRAME_DIM);
    let mut x0 = 0.0;
    for prim in &trace.primitives {
        let kind = prim.kind()?;
        let n = prim.duration_frames;
        for f in 0..n {
            let p = f as f64 / n as f64;
            let pose = primitive_pose(kind, prim, p, x0);
            let mut jitter = [0.0; 7];
            for j in jitter.iter_mut() {
                *j = noise.sample(&mut rng).clamp(-3.0 * JITTER_SIGMA, 3.0 * JITTER_SIGMA);
            }
            values.extend_from_slice(&pose.joints(&jitter));
        }
        x0 += root_advance(kind, prim);
    }
    Ok(MotionClip {
        frames: Tensor {
            shape: vec![total, FRAME_DIM],
            values,
        },
        fps: FPS,
        trace: trace.clone(),
    })
}
