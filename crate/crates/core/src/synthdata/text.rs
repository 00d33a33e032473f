use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, Primitive, PrimitiveKind, PrimitiveTrace, Result};

const SUBJECTS: [&str; 3] = ["a person", "someone", "a man"];
const CAPTION_JOINERS: [&str; 3] = ["then", "and then", "and"];

/// Sentence openers of reasoning traces, in chronological order of use.
pub const CONNECTORS: [&str; 4] = ["First", "Next", "Then", "Finally"];

fn caption_phrases(kind: PrimitiveKind, prim: &Primitive) -> Vec<String> {
    let arm = arm_word(prim);
    let side = side_word(prim);
    let v: Vec<String> = match kind {
        PrimitiveKind::Walk => vec!["walks forward".into(), "walks ahead".into(), "walks straight ahead".into()],
        PrimitiveKind::Turn => vec!["turns around".into(), "turns in place".into(), "turns to the side".into()],
        PrimitiveKind::Wave => vec!["waves".into(), "waves a hand".into(), format!("waves the {arm} hand")],
        PrimitiveKind::Squat => vec!["squats down".into(), "squats".into(), "squats low".into()],
        PrimitiveKind::Jump => vec!["jumps".into(), "jumps up".into(), "jumps in place".into()],
        PrimitiveKind::RaiseArm => vec![
            format!("raises the {arm} arm"),
            "raises an arm".into(),
            format!("raises the {arm} hand"),
        ],
        PrimitiveKind::StepSide => vec![format!("steps to the {side}"), "steps sideways".into(), "steps aside".into()],
        PrimitiveKind::Stand => vec!["stands still".into(), "stands in place".into(), "stands quietly".into()],
    };
    v
}

fn arm_word(prim: &Primitive) -> &'static str {
    if prim.param("arm") >= 0.5 {
        "right"
    } else {
        "left"
    }
}

fn side_word(prim: &Primitive) -> &'static str {
    if prim.param("direction") > 0.0 {
        "right"
    } else {
        "left"
    }
}

fn count_word(n: f64) -> &'static str {
    match n as usize {
        1 => "one",
        2 => "two",
        3 => "three",
        _ => "four",
    }
}

fn times_word(n: f64) -> &'static str {
    match n as usize {
        1 => "once",
        2 => "twice",
        _ => "three times",
    }
}

fn degrees_words(d: f64) -> &'static str {
    match ((d / 45.0).round() as usize).clamp(1, 4) {
        1 => "forty five",
        2 => "ninety",
        3 => "one hundred thirty five",
        _ => "one hundred eighty",
    }
}

fn cot_clauses(kind: PrimitiveKind, prim: &Primitive) -> Vec<String> {
    let arm = arm_word(prim);
    match kind {
        PrimitiveKind::Walk => {
            let steps = prim.param("steps");
            let n = count_word(steps);
            let unit = if steps == 1.0 { "step" } else { "steps" };
            let size = if prim.param("stride") < 0.25 { "short" } else { "long" };
            vec![
                format!("the person walks forward {n} {unit} with {size} strides"),
                format!("the person walks ahead for {n} {unit}"),
            ]
        }
        PrimitiveKind::Turn => {
            let d = degrees_words(prim.param("degrees"));
            vec![
                format!("the person turns around by {d} degrees"),
                format!("the person slowly turns {d} degrees and comes back"),
            ]
        }
        PrimitiveKind::Wave => {
            let t = times_word(prim.param("repetitions"));
            vec![
                format!("the person raises the {arm} arm and waves"),
                format!("the person waves the {arm} hand {t}"),
                format!("the person lifts the {arm} hand and waves {t}"),
            ]
        }
        PrimitiveKind::Squat => {
            let how = if prim.param("depth") < 0.17 { "slightly" } else { "deeply" };
            vec![
                format!("the person bends the knees and squats {how}"),
                format!("the person squats down {how} and stands back up"),
            ]
        }
        PrimitiveKind::Jump => {
            let how = if prim.param("height") < 0.22 { "a little" } else { "high" };
            vec![
                format!("the person jumps {how} into the air"),
                format!("the person bends and jumps {how}"),
            ]
        }
        PrimitiveKind::RaiseArm => {
            let how = if prim.param("height") < 0.75 { "halfway" } else { "overhead" };
            vec![
                format!("the person raises the {arm} arm {how}"),
                format!("the person slowly raises the {arm} arm {how} and lowers it"),
            ]
        }
        PrimitiveKind::StepSide => {
            let side = side_word(prim);
            let how = if prim.param("distance") < 0.25 { "a little" } else { "far" };
            vec![
                format!("the person steps to the {side} {how}"),
                format!("the person sidesteps {how} to the {side}"),
            ]
        }
        PrimitiveKind::Stand => vec![
            "the person stands still".into(),
            "the person stays in place and stands quietly".into(),
        ],
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [String]) -> &'a str {
    &items[rng.gen_range(0..items.len())]
}

/// One-sentence caption naming the subject and every primitive in order.
pub fn render_caption(trace: &PrimitiveTrace, seed: u64) -> Result<String> {
    trace.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xCA9));
    let mut out = SUBJECTS[rng.gen_range(0..SUBJECTS.len())].to_string();
    for (i, prim) in trace.primitives.iter().enumerate() {
        if i > 0 {
            out.push(' ');
            out.push_str(CAPTION_JOINERS[rng.gen_range(0..CAPTION_JOINERS.len())]);
        }
        let phrases = caption_phrases(prim.kind()?, prim);
        out.push(' ');
        out.push_str(pick(&mut rng, &phrases));
    }
    Ok(out)
}

fn connectors_for(n: usize) -> &'static [&'static str] {
    match n {
        1 => &["First"],
        2 => &["First", "Finally"],
        3 => &["First", "Next", "Finally"],
        _ => &["First", "Next", "Then", "Finally"],
    }
}

/// Step-by-step description: one connector-led sentence per primitive.
pub fn render_cot(trace: &PrimitiveTrace, seed: u64) -> Result<String> {
    trace.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC07));
    let conns = connectors_for(trace.primitives.len());
    let mut sentences = Vec::with_capacity(conns.len());
    for (prim, conn) in trace.primitives.iter().zip(conns) {
        let clauses = cot_clauses(prim.kind()?, prim);
        sentences.push(format!("{conn}, {}.", pick(&mut rng, &clauses)));
    }
    Ok(sentences.join(" "))
}

/// Word-level tokens: alphabetic words and standalone `,` / `.`.
pub fn text_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = None;
        for (i, ch) in chunk.char_indices() {
            if ch == ',' || ch == '.' {
                if let Some(s) = start.take() {
                    out.push(&chunk[s..i]);
                }
                out.push(&chunk[i..i + 1]);
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            out.push(&chunk[s..]);
        }
    }
    out
}

fn kind_of_caption_word(w: &str) -> Option<PrimitiveKind> {
    Some(match w {
        "walks" => PrimitiveKind::Walk,
        "turns" => PrimitiveKind::Turn,
        "waves" => PrimitiveKind::Wave,
        "squats" => PrimitiveKind::Squat,
        "jumps" => PrimitiveKind::Jump,
        "raises" => PrimitiveKind::RaiseArm,
        "steps" | "sidesteps" => PrimitiveKind::StepSide,
        "stands" => PrimitiveKind::Stand,
        _ => return None,
    })
}

/// Primitive names recoverable from a caption, in order of mention.
pub fn primitives_in_caption(caption: &str) -> Vec<PrimitiveKind> {
    text_tokens(caption).into_iter().filter_map(kind_of_caption_word).collect()
}

/// Primitive of each connector sentence of a reasoning trace, in order.
/// Waving clauses also mention raising; walking clauses mention steps.
pub fn primitives_in_cot(cot: &str) -> Vec<PrimitiveKind> {
    cot.split('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .filter_map(|sentence| {
            let words = text_tokens(sentence);
            let has = |w: &str| words.contains(&w);
            if has("waves") {
                Some(PrimitiveKind::Wave)
            } else if has("walks") {
                Some(PrimitiveKind::Walk)
            } else if has("stands") && !has("squats") {
                Some(PrimitiveKind::Stand)
            } else {
                words.iter().find_map(|w| kind_of_caption_word(w))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk2() -> PrimitiveTrace {
        PrimitiveTrace::new(vec![Primitive::new(PrimitiveKind::Walk, &[("steps", 2.0), ("stride", 0.2)], 32)])
    }

    #[test]
    fn single_walk_caption_template() {
        let captions: Vec<String> = (0..64).map(|s| render_caption(&walk2(), s).unwrap()).collect();
        assert!(captions.iter().any(|c| c == "a person walks forward"));
        for c in &captions {
            assert_eq!(primitives_in_caption(c), vec![PrimitiveKind::Walk]);
        }
        assert_eq!(render_caption(&walk2(), 9).unwrap(), render_caption(&walk2(), 9).unwrap());
    }

    #[test]
    fn caption_preserves_order() {
        let tr = PrimitiveTrace::new(vec![
            Primitive::new(PrimitiveKind::Wave, &[("arm", 1.0), ("repetitions", 1.0)], 16),
            Primitive::new(PrimitiveKind::Squat, &[("depth", 0.2)], 16),
        ]);
        for seed in 0..20 {
            let c = render_caption(&tr, seed).unwrap();
            let w = c.find("wave").unwrap();
            let s = c.find("squat").unwrap();
            assert!(w < s, "{c}");
        }
    }

    #[test]
    fn single_wave_cot_template() {
        let tr = PrimitiveTrace::new(vec![Primitive::new(PrimitiveKind::Wave, &[("arm", 1.0), ("repetitions", 2.0)], 16)]);
        let all: Vec<String> = (0..64).map(|s| render_cot(&tr, s).unwrap()).collect();
        assert!(all.iter().any(|c| c == "First, the person raises the right arm and waves."));
    }

    #[test]
    fn cot_connectors_in_order_and_longer_than_caption() {
        let tr = PrimitiveTrace::new(vec![
            Primitive::new(PrimitiveKind::Walk, &[("steps", 1.0), ("stride", 0.3)], 16),
            Primitive::new(PrimitiveKind::Turn, &[("degrees", 90.0)], 16),
            Primitive::new(PrimitiveKind::Squat, &[("depth", 0.2)], 16),
        ]);
        for seed in 0..20 {
            let cot = render_cot(&tr, seed).unwrap();
            let a = cot.find("First").unwrap();
            let b = cot.find("Next").unwrap();
            let c = cot.find("Finally").unwrap();
            assert!(a < b && b < c);
            let cap = render_caption(&tr, seed).unwrap();
            assert!(text_tokens(&cot).len() > text_tokens(&cap).len());
            assert_eq!(
                primitives_in_cot(&cot),
                vec![PrimitiveKind::Walk, PrimitiveKind::Turn, PrimitiveKind::Squat]
            );
        }
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            text_tokens("First, the person waves."),
            vec!["First", ",", "the", "person", "waves", "."]
        );
    }
}
