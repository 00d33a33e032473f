//! Skeleton-strip SVG rendering.

use std::fmt::Write as _;

use crate::synthdata::{MotionClip, BONES, NUM_JOINTS};

/// Pixels per body-length.
const SCALE: f64 = 100.0;
/// Horizontal shift between consecutive drawn frames, in body-lengths.
const FRAME_STEP: f64 = 0.6;
const MARGIN: f64 = 20.0;

/// Draws every `stride`-th frame of `clip`, each shifted right by a fixed step.
/// Output bytes depend only on the clip values and `stride`.
pub fn render_svg(clip: &MotionClip, stride: usize) -> String {
    let stride = stride.max(1);
    let frames: Vec<(usize, Vec<(f64, f64)>)> = (0..clip.num_frames())
        .step_by(stride)
        .enumerate()
        .map(|(k, t)| {
            let shift = k as f64 * FRAME_STEP;
            (
                t,
                (0..NUM_JOINTS)
                    .map(|j| {
                        let (x, y) = clip.joint(t, j);
                        (x + shift, y)
                    })
                    .collect(),
            )
        })
        .collect();
    let pts = frames.iter().flat_map(|f| f.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if frames.is_empty() {
        (x0, x1, y0, y1) = (0.0, 0.0, 0.0, 0.0);
    }
    let width = (x1 - x0) * SCALE + 2.0 * MARGIN;
    let height = (y1 - y0) * SCALE + 2.0 * MARGIN;
    let px = |x: f64| (x - x0) * SCALE + MARGIN;
    let py = |y: f64| (y1 - y) * SCALE + MARGIN;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (t, joints) in &frames {
        let _ = writeln!(
            s,
            r##"<g class="frame" data-frame="{t}" stroke="#334" stroke-width="3" fill="#c33">"##
        );
        for &(a, b, _) in BONES.iter() {
            let _ = writeln!(
                s,
                r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
                px(joints[a].0),
                py(joints[a].1),
                px(joints[b].0),
                py(joints[b].1)
            );
        }
        for &(x, y) in joints {
            let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="3"/>"#, px(x), py(y));
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
