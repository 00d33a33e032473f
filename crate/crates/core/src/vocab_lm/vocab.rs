use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{LmError, Result};
use crate::synthdata::text_tokens;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const MOTION_OPEN: &str = "<Motion>";
pub const MOTION_CLOSE: &str = "</Motion>";
pub const ANSWER_OPEN: &str = "<Answer>";
pub const ANSWER_CLOSE: &str = "</Answer>";
pub const FORMAT_TOKENS: [&str; 6] = [THINK_OPEN, THINK_CLOSE, MOTION_OPEN, MOTION_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

pub fn motion_token(i: usize) -> String {
    format!("<Motion_{i}>")
}

/// Index of a `<Motion_i>` tag string.
pub fn parse_motion_token(s: &str) -> Option<usize> {
    let digits = s.strip_prefix("<Motion_")?.strip_suffix('>')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || (digits.len() > 1 && digits.starts_with('0')) {
        return None;
    }
    digits.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Text,
    Format,
    Motion(usize),
}

/// Dense token table: specials, text words, then tokens added by expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Number of specials plus text words.
    base_size: usize,
    motion_start: Option<usize>,
    motion_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    base_size: usize,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let mut v = Vocabulary {
            index: f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            tokens: f.tokens,
            base_size: f.base_size,
            motion_start: None,
            motion_count: 0,
        };
        v.refresh_motion_range();
        v
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.tokens,
            base_size: v.base_size,
        }
    }
}

impl Vocabulary {
    /// Specials followed by the sorted distinct words of `texts`.
    pub fn base<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in text_tokens(text.as_ref()) {
                words.insert(w.to_string());
            }
        }
        if words.is_empty() {
            return Err(LmError::Vocab("no text to build a vocabulary from".into()));
        }
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            base_size: tokens.len(),
            tokens,
            index,
            motion_start: None,
            motion_count: 0,
        })
    }

    /// Base vocabulary over captions, reasoning traces and prompt templates,
    /// expanded with the format tags and `k` motion tokens.
    pub fn build<S: AsRef<str>>(texts: impl IntoIterator<Item = S>, k: usize) -> Result<Self> {
        let texts = texts.into_iter().map(|t| t.as_ref().to_string());
        let mut v = Self::base(texts.chain(super::prompt::template_text()))?;
        v.add_tokens(&FORMAT_TOKENS.map(String::from))?;
        v.add_tokens(&(0..k).map(motion_token).collect::<Vec<_>>())?;
        Ok(v)
    }

    /// Appends new tokens; any name already present is rejected.
    pub fn add_tokens(&mut self, names: &[String]) -> Result<Range<usize>> {
        let mut seen = std::collections::HashSet::new();
        for n in names {
            if self.index.contains_key(n) || !seen.insert(n) {
                return Err(LmError::Vocab(format!("duplicate token `{n}`")));
            }
        }
        let start = self.tokens.len();
        for n in names {
            self.index.insert(n.clone(), self.tokens.len());
            self.tokens.push(n.clone());
        }
        self.refresh_motion_range();
        Ok(start..self.tokens.len())
    }

    fn refresh_motion_range(&mut self) {
        self.motion_start = self.index.get("<Motion_0>").copied();
        self.motion_count = match self.motion_start {
            Some(s) => (s..self.tokens.len())
                .take_while(|&i| parse_motion_token(&self.tokens[i]) == Some(i - s))
                .count(),
            None => 0,
        };
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn motion_count(&self) -> usize {
        self.motion_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn motion_id(&self, index: usize) -> Result<usize> {
        match self.motion_start {
            Some(s) if index < self.motion_count => Ok(s + index),
            _ => Err(LmError::Vocab(format!(
                "motion index {index} outside vocabulary of {} motion tokens",
                self.motion_count
            ))),
        }
    }

    pub fn class(&self, id: usize) -> TokenClass {
        if id < SPECIALS.len() {
            return TokenClass::Special;
        }
        if id < self.base_size {
            return TokenClass::Text;
        }
        if let Some(s) = self.motion_start {
            if id >= s && id < s + self.motion_count {
                return TokenClass::Motion(id - s);
            }
        }
        TokenClass::Format
    }

    /// Word ids of a text; unknown words become UNK and are counted.
    pub fn encode_text(&self, text: &str) -> (Vec<usize>, usize) {
        let mut unknown = 0;
        let ids = text_tokens(text)
            .into_iter()
            .map(|w| match self.index.get(w) {
                Some(&i) if i >= SPECIALS.len() && i < self.base_size => i,
                _ => {
                    unknown += 1;
                    UNK
                }
            })
            .collect();
        (ids, unknown)
    }

    /// Whitespace-joined token strings.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Joins word tokens, attaching `,` and `.` to the preceding word.
pub fn detokenize<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    for w in words {
        let w = w.as_ref();
        if !out.is_empty() && w != "," && w != "." {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_motion_tokens() {
        let v = Vocabulary::build(["a person walks forward", "First, the person waves."], 512).unwrap();
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.motion_count(), 512);
        assert_eq!(v.token(v.motion_id(511).unwrap()), "<Motion_511>");
        assert!(v.motion_id(512).is_err());
        assert_eq!(v.class(v.id("walks").unwrap()), TokenClass::Text);
        assert_eq!(v.class(v.id("<think>").unwrap()), TokenClass::Format);
        assert_eq!(v.class(v.id("<Motion_7>").unwrap()), TokenClass::Motion(7));
        let n_motion = v.tokens().iter().filter(|t| parse_motion_token(t).is_some()).count();
        assert_eq!(n_motion, 512);
    }

    #[test]
    fn duplicates_are_rejected() {
        let mut v = Vocabulary::build(["a person"], 4).unwrap();
        assert!(v.add_tokens(&["<Motion_2>".to_string()]).is_err());
        assert!(v.add_tokens(&["person".to_string()]).is_err());
        assert!(v.add_tokens(&["x".to_string(), "x".to_string()]).is_err());
    }

    #[test]
    fn unknown_words_and_serde() {
        let v = Vocabulary::build(["a person walks"], 2).unwrap();
        let (ids, unk) = v.encode_text("a robot walks");
        assert_eq!(unk, 1);
        assert_eq!(ids[1], UNK);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(
            detokenize(&["First", ",", "the", "person", "waves", "."]),
            "First, the person waves."
        );
    }

    #[test]
    fn motion_tag_parsing() {
        assert_eq!(parse_motion_token("<Motion_12>"), Some(12));
        assert_eq!(parse_motion_token("<Motion_>"), None);
        assert_eq!(parse_motion_token("<Motion_01>"), None);
        assert_eq!(parse_motion_token("<Motion>"), None);
    }
}
