use serde::{Deserialize, Serialize};

use super::vocab::*;
use super::{LmError, Result};
use crate::synthdata::text_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    T2M,
    M2T,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::T2M => "t2m",
            Task::M2T => "m2t",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = LmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2m" => Ok(Task::T2M),
            "m2t" => Ok(Task::M2T),
            other => Err(LmError::Invalid(format!("unknown task `{other}` (expected t2m or m2t)"))),
        }
    }
}

/// The task input or output that is not reasoning: a caption or motion token indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload<'a> {
    Caption(&'a str),
    Motion(&'a [usize]),
}

/// Token ids with a per-position training mask; prompt positions are unmasked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSequence {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub task: Task,
    /// Words that were replaced by UNK while encoding.
    #[serde(default)]
    pub unknown_words: usize,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions before the first supervised token.
    pub fn prompt_len(&self) -> usize {
        self.loss_mask.iter().position(|&m| m).unwrap_or(self.ids.len())
    }
}

const T2M_LEAD: &str = "Generate the motion for :";
const M2T_TAIL: &str = "Describe the motion .";

/// Literal words of the prompt templates, which the vocabulary must contain.
pub fn template_text() -> Vec<String> {
    vec![T2M_LEAD.to_string(), M2T_TAIL.to_string()]
}

fn push_tag(vocab: &Vocabulary, ids: &mut Vec<usize>, tag: &str) -> Result<()> {
    ids.push(vocab.id(tag).ok_or_else(|| LmError::Vocab(format!("vocabulary lacks `{tag}`")))?);
    Ok(())
}

fn push_words(vocab: &Vocabulary, ids: &mut Vec<usize>, text: &str) -> usize {
    let (w, unk) = vocab.encode_text(text);
    ids.extend(w);
    unk
}

fn push_motion(vocab: &Vocabulary, ids: &mut Vec<usize>, tokens: &[usize]) -> Result<()> {
    for &t in tokens {
        ids.push(vocab.motion_id(t)?);
    }
    Ok(())
}

/// `BOS Generate the motion for : {caption} .` or
/// `BOS <Motion> {tokens} </Motion> Describe the motion .`
pub fn encode_prompt(vocab: &Vocabulary, task: Task, input: Payload<'_>) -> Result<MixedSequence> {
    let mut ids = vec![BOS];
    let mut unknown = 0;
    match (task, input) {
        (Task::T2M, Payload::Caption(caption)) => {
            if text_tokens(caption).is_empty() {
                return Err(LmError::Invalid("empty caption".into()));
            }
            unknown += push_words(vocab, &mut ids, T2M_LEAD);
            unknown += push_words(vocab, &mut ids, caption);
            unknown += push_words(vocab, &mut ids, ".");
        }
        (Task::M2T, Payload::Motion(tokens)) => {
            if tokens.is_empty() {
                return Err(LmError::Invalid("empty motion token sequence".into()));
            }
            push_tag(vocab, &mut ids, MOTION_OPEN)?;
            push_motion(vocab, &mut ids, tokens)?;
            push_tag(vocab, &mut ids, MOTION_CLOSE)?;
            unknown += push_words(vocab, &mut ids, M2T_TAIL);
        }
        (task, _) => return Err(LmError::Invalid(format!("{} prompt needs the other payload kind", task.name()))),
    }
    Ok(MixedSequence {
        loss_mask: vec![false; ids.len()],
        ids,
        task,
        unknown_words: unknown,
    })
}

/// Target ids: `<think> cot </think>` then the tagged payload, then EOS.
pub fn target_ids(vocab: &Vocabulary, task: Task, cot: &str, payload: Payload<'_>) -> Result<(Vec<usize>, usize)> {
    let mut ids = Vec::new();
    push_tag(vocab, &mut ids, THINK_OPEN)?;
    let mut unknown = push_words(vocab, &mut ids, cot);
    push_tag(vocab, &mut ids, THINK_CLOSE)?;
    match (task, payload) {
        (Task::T2M, Payload::Motion(tokens)) => {
            push_tag(vocab, &mut ids, MOTION_OPEN)?;
            push_motion(vocab, &mut ids, tokens)?;
            push_tag(vocab, &mut ids, MOTION_CLOSE)?;
        }
        (Task::M2T, Payload::Caption(caption)) => {
            push_tag(vocab, &mut ids, ANSWER_OPEN)?;
            unknown += push_words(vocab, &mut ids, caption);
            push_tag(vocab, &mut ids, ANSWER_CLOSE)?;
        }
        (task, _) => return Err(LmError::Invalid(format!("{} target needs the other payload kind", task.name()))),
    }
    ids.push(EOS);
    Ok((ids, unknown))
}

/// Prompt followed by the supervised target; the mask is set exactly on target positions.
pub fn encode_target(vocab: &Vocabulary, prompt: &MixedSequence, cot: &str, payload: Payload<'_>) -> Result<MixedSequence> {
    let (target, unknown) = target_ids(vocab, prompt.task, cot, payload)?;
    let mut seq = prompt.clone();
    seq.loss_mask.extend(std::iter::repeat_n(true, target.len()));
    seq.ids.extend(target);
    seq.unknown_words += unknown;
    Ok(seq)
}

/// Parsed model output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub think_text: String,
    pub motion_indices: Option<Vec<usize>>,
    pub answer_text: Option<String>,
    pub format_valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Lexeme {
    Word(String),
    Tag(&'static str),
    Motion(usize),
    Eos,
    Other,
}

fn lex_ids(vocab: &Vocabulary, ids: &[usize]) -> Vec<Lexeme> {
    ids.iter()
        .map(|&id| match vocab.class(id) {
            TokenClass::Text => Lexeme::Word(vocab.token(id).to_string()),
            TokenClass::Special if id == UNK => Lexeme::Word(vocab.token(id).to_string()),
            TokenClass::Special if id == EOS => Lexeme::Eos,
            TokenClass::Special => Lexeme::Other,
            TokenClass::Motion(i) => Lexeme::Motion(i),
            TokenClass::Format => match FORMAT_TOKENS.iter().find(|t| **t == vocab.token(id)) {
                Some(t) => Lexeme::Tag(t),
                None => Lexeme::Other,
            },
        })
        .collect()
}

fn lex_text(text: &str) -> Vec<Lexeme> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        match rest.find('<') {
            Some(0) => {
                let end = rest.find('>').map(|e| e + 1).unwrap_or(rest.len());
                let tag = &rest[..end];
                out.push(if let Some(t) = FORMAT_TOKENS.iter().find(|t| **t == tag) {
                    Lexeme::Tag(t)
                } else if let Some(i) = parse_motion_token(tag) {
                    Lexeme::Motion(i)
                } else if tag == SPECIALS[EOS] {
                    Lexeme::Eos
                } else if tag == SPECIALS[UNK] {
                    Lexeme::Word(tag.to_string())
                } else {
                    Lexeme::Other
                });
                rest = &rest[end..];
            }
            found => {
                let end = found.unwrap_or(rest.len());
                out.extend(text_tokens(&rest[..end]).into_iter().map(|w| Lexeme::Word(w.to_string())));
                rest = &rest[end..];
            }
        }
    }
    out
}

fn parse_lexemes(mut lx: Vec<Lexeme>, task: Task) -> StructuredOutput {
    let invalid = StructuredOutput::default();
    if lx.last() == Some(&Lexeme::Eos) {
        lx.pop();
    }
    let mut it = lx.into_iter().peekable();
    if it.next() != Some(Lexeme::Tag(THINK_OPEN)) {
        return invalid;
    }
    let mut think = Vec::new();
    while let Some(Lexeme::Word(w)) = it.peek() {
        think.push(w.clone());
        it.next();
    }
    if it.next() != Some(Lexeme::Tag(THINK_CLOSE)) {
        return invalid;
    }
    let mut out = StructuredOutput {
        think_text: detokenize(&think),
        ..StructuredOutput::default()
    };
    match task {
        Task::T2M => {
            if it.next() != Some(Lexeme::Tag(MOTION_OPEN)) {
                return invalid;
            }
            let mut motion = Vec::new();
            while let Some(Lexeme::Motion(i)) = it.peek() {
                motion.push(*i);
                it.next();
            }
            if it.next() != Some(Lexeme::Tag(MOTION_CLOSE)) {
                return invalid;
            }
            out.motion_indices = Some(motion);
        }
        Task::M2T => {
            if it.next() != Some(Lexeme::Tag(ANSWER_OPEN)) {
                return invalid;
            }
            let mut words = Vec::new();
            while let Some(Lexeme::Word(w)) = it.peek() {
                words.push(w.clone());
                it.next();
            }
            if it.next() != Some(Lexeme::Tag(ANSWER_CLOSE)) {
                return invalid;
            }
            out.answer_text = Some(detokenize(&words));
        }
    }
    if it.next().is_some() {
        return invalid;
    }
    out.format_valid = true;
    out
}

/// Parses generated ids (a trailing EOS is allowed) against the task grammar.
pub fn parse_output(vocab: &Vocabulary, ids: &[usize], task: Task) -> StructuredOutput {
    parse_lexemes(lex_ids(vocab, ids), task)
}

/// Parses a tag string such as `<think>a</think><Motion><Motion_3></Motion>`.
pub fn parse_output_text(text: &str, task: Task) -> StructuredOutput {
    parse_lexemes(lex_text(text), task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            ["a person walks forward", "First, the person waves. Finally, the person jumps."],
            16,
        )
        .unwrap()
    }

    #[test]
    fn t2m_sequence_layout() {
        let v = vocab();
        let p = encode_prompt(&v, Task::T2M, Payload::Caption("a person walks forward")).unwrap();
        assert_eq!(v.decode(&p.ids), "<bos> Generate the motion for : a person walks forward .");
        let s = encode_target(&v, &p, "First, the person waves.", Payload::Motion(&[3, 7])).unwrap();
        let text = v.decode(&s.ids);
        assert!(text.ends_with("</think> <Motion> <Motion_3> <Motion_7> </Motion> <eos>"), "{text}");
        let think_pos = s.ids.iter().position(|&i| v.token(i) == "<think>").unwrap();
        assert_eq!(s.prompt_len(), think_pos);
        assert!(s.loss_mask[think_pos..].iter().all(|&m| m));
        assert!(s.loss_mask[..think_pos].iter().all(|&m| !m));
    }

    #[test]
    fn m2t_prompt_wraps_motion() {
        let v = vocab();
        let p = encode_prompt(&v, Task::M2T, Payload::Motion(&[1, 2])).unwrap();
        assert_eq!(
            v.decode(&p.ids),
            "<bos> <Motion> <Motion_1> <Motion_2> </Motion> Describe the motion ."
        );
        assert!(encode_prompt(&v, Task::M2T, Payload::Caption("a person")).is_err());
        assert!(encode_prompt(&v, Task::M2T, Payload::Motion(&[16])).is_err());
    }

    #[test]
    fn grammar_examples() {
        let ok = parse_output_text("<think>a</think><Motion><Motion_3><Motion_7></Motion>", Task::T2M);
        assert!(ok.format_valid);
        assert_eq!(ok.motion_indices, Some(vec![3, 7]));
        assert!(!parse_output_text("<think>a<Motion><Motion_3></Motion>", Task::T2M).format_valid);
        let m = parse_output_text("<think>x</think><Answer>a person walks</Answer>", Task::M2T);
        assert!(m.format_valid);
        assert_eq!(m.answer_text.as_deref(), Some("a person walks"));
        assert_eq!(m.think_text, "x");
        let dup = "<think>a</think><Motion><Motion_1></Motion><Motion><Motion_1></Motion>";
        assert!(!parse_output_text(dup, Task::T2M).format_valid);
        assert!(!parse_output_text("", Task::T2M).format_valid);
        assert!(!parse_output_text("<think>a</think><Answer>b</Answer>", Task::T2M).format_valid);
        assert!(parse_output_text("<think>a</think><Answer>b</Answer> <eos>", Task::M2T).format_valid);
        assert!(!parse_output_text("x <think>a</think><Answer>b</Answer>", Task::M2T).format_valid);
    }

    #[test]
    fn encoded_targets_parse_back() {
        let v = vocab();
        let p = encode_prompt(&v, Task::M2T, Payload::Motion(&[5])).unwrap();
        let s = encode_target(&v, &p, "First, the person waves.", Payload::Caption("a person walks forward")).unwrap();
        let out = parse_output(&v, &s.ids[s.prompt_len()..], Task::M2T);
        assert!(out.format_valid);
        assert_eq!(out.answer_text.as_deref(), Some("a person walks forward"));
        assert_eq!(out.think_text, "First, the person waves.");
        let reparsed = parse_output_text(&v.decode(&s.ids[s.prompt_len()..]), Task::M2T);
        assert_eq!(reparsed, out);
    }
}
