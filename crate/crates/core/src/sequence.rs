// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token and segment bookkeeping.
//!
//! A prompt is laid out as four contiguous segments: the system prompt `S`,
//! the image tokens `V`, the user instruction `U`, and the text generated so
//! far `T_p`. Only `T_p` grows during decoding.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    /// The id as a `usize` index.
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Half-open index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct Span {
    /// First index in the span.
    pub start: usize,
    /// One past the last index.
    pub end: usize,
}

impl Span {
    /// Builds `[start, end)`. Panics if `end < start`.
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span end {end} before start {start}");
        Span { start, end }
    }

    /// Number of indices covered.
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    /// True when the span covers nothing.
    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Whether `i` lies inside the span.
    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    /// The span as a `Range`, for slicing.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Errors unless the span fits in a sequence of length `len`.
    pub fn check_within(&self, len: usize) -> Result<()> {
        if self.end > len {
            return Err(Error::SpanOutOfBounds {
                start: self.start,
                end: self.end,
                len,
            });
        }
        Ok(())
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span {
            start,
            end: end.max(start),
        }
    }
}

/// Which of the four prompt segments a span refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    /// System prompt `S`.
    System,
    /// Image tokens `V`.
    Image,
    /// User instruction `U`.
    Instruction,
    /// Previously generated text `T_p`.
    Generated,
}

/// Boundaries of the four segments at one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpans {
    /// `S = [0, a)`.
    pub system: Span,
    /// `V = [a, a+m)`.
    pub image: Span,
    /// `U = [a+m, a+m+b)`.
    pub instruction: Span,
    /// `T_p = [a+m+b, len)`.
    pub generated: Span,
}

impl SegmentSpans {
    /// Span of the requested segment.
    pub fn get(&self, segment: Segment) -> Span {
        match segment {
            Segment::System => self.system,
            Segment::Image => self.image,
            Segment::Instruction => self.instruction,
            Segment::Generated => self.generated,
        }
    }

    /// Total length covered by the four spans.
    pub fn len(&self) -> usize {
        self.generated.end
    }

    /// True when all four spans are empty.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A prompt plus generated tokens, partitioned into `S`, `V`, `U`, `T_p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SequenceRepr", into = "SequenceRepr")]
pub struct SegmentedSequence {
    tokens: Vec<TokenId>,
    system_len: usize,
    image_len: usize,
    instruction_len: usize,
}

#[derive(Serialize, Deserialize)]
struct SequenceRepr {
    tokens: Vec<TokenId>,
    system_len: usize,
    image_len: usize,
    instruction_len: usize,
}

impl TryFrom<SequenceRepr> for SegmentedSequence {
    type Error = Error;

    fn try_from(r: SequenceRepr) -> Result<Self> {
        let prompt = r.system_len + r.image_len + r.instruction_len;
        if prompt == 0 {
            return Err(Error::EmptyPrompt);
        }
        if prompt > r.tokens.len() {
            return Err(Error::ShapeMismatch(format!(
                "segment lengths sum to {prompt} but sequence has {} tokens",
                r.tokens.len()
            )));
        }
        Ok(SegmentedSequence {
            tokens: r.tokens,
            system_len: r.system_len,
            image_len: r.image_len,
            instruction_len: r.instruction_len,
        })
    }
}

impl From<SegmentedSequence> for SequenceRepr {
    fn from(s: SegmentedSequence) -> Self {
        SequenceRepr {
            tokens: s.tokens,
            system_len: s.system_len,
            image_len: s.image_len,
            instruction_len: s.instruction_len,
        }
    }
}

/// Lays out `system ++ image ++ instruction` with an empty `T_p`.
pub fn build_segmented_sequence(
    system: &[TokenId],
    image: &[TokenId],
    instruction: &[TokenId],
) -> Result<SegmentedSequence> {
    if system.is_empty() && image.is_empty() && instruction.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut tokens = Vec::with_capacity(system.len() + image.len() + instruction.len());
    tokens.extend_from_slice(system);
    tokens.extend_from_slice(image);
    tokens.extend_from_slice(instruction);
    Ok(SegmentedSequence {
        tokens,
        system_len: system.len(),
        image_len: image.len(),
        instruction_len: instruction.len(),
    })
}

/// Returns `seq` with `token` appended to `T_p`.
pub fn append_generated(seq: &SegmentedSequence, token: TokenId) -> SegmentedSequence {
    let mut next = seq.clone();
    next.tokens.push(token);
    next
}

impl SegmentedSequence {
    /// All tokens in order.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// `len = a + m + b + n`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: construction rejects empty prompts.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Length of the fixed prompt, `a + m + b`.
    pub fn prompt_len(&self) -> usize {
        self.system_len + self.image_len + self.instruction_len
    }

    /// Number of generated tokens `n`.
    pub fn generated_len(&self) -> usize {
        self.tokens.len() - self.prompt_len()
    }

    /// The generated tokens `T_p`.
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len()..]
    }

    /// Segment boundaries for the current length.
    pub fn spans(&self) -> SegmentSpans {
        let a = self.system_len;
        let m = self.image_len;
        let b = self.instruction_len;
        SegmentSpans {
            system: Span::new(0, a),
            image: Span::new(a, a + m),
            instruction: Span::new(a + m, a + m + b),
            generated: Span::new(a + m + b, self.tokens.len()),
        }
    }

    /// The same prompt with `T_p` cleared.
    pub fn prompt_only(&self) -> SegmentedSequence {
        let mut p = self.clone();
        p.tokens.truncate(self.prompt_len());
        p
    }
}

/// Bidirectional map between surface strings and [`TokenId`]s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary; surface forms must be unique.
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let id = TokenId(u32::try_from(i).map_err(|_| {
                Error::InvalidConfig("vocabulary larger than u32::MAX".into())
            })?);
            if index.insert(w.clone(), id).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary entry '{w}'")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// True for a vocabulary without entries.
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Looks up a surface form.
    pub fn encode(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    /// Looks up a token's surface form.
    pub fn decode(&self, id: TokenId) -> Option<&str> {
        self.words.get(id.index()).map(String::as_str)
    }

    /// Encodes every word, failing on the first unknown one.
    pub fn encode_all<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words
            .iter()
            .map(|w| {
                self.encode(w.as_ref())
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown token '{}'", w.as_ref())))
            })
            .collect()
    }

    /// Joins the surface forms of `ids` with single spaces.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.decode(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Surface forms in id order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Reads a vocabulary file: a JSON array of strings, index = id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = serde_json::from_str(&text)?;
        Vocabulary::new(words)
    }

    /// Writes the vocabulary as a JSON array of strings.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.words)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

const EDGE_PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?', '"', '\'', '(', ')'];

/// Word-level tokenizer used by the caption metrics.
///
/// Lowercases, splits on Unicode whitespace and strips leading/trailing
/// `. , ; : ! ? " ' ( )` from each word. Interior punctuation survives, so
/// "don't" and "well-lit" stay single words.
pub fn tokenize_text(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .filter_map(|raw| {
            let word = raw.trim_matches(EDGE_PUNCTUATION).to_lowercase();
            (!word.is_empty()).then_some(word)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().copied().map(TokenId).collect()
    }

    #[test]
    fn spans_follow_segment_lengths() {
        let seq = build_segmented_sequence(&ids(&[1]), &ids(&[2, 3]), &ids(&[4])).unwrap();
        let s = seq.spans();
        assert_eq!(s.system, Span::new(0, 1));
        assert_eq!(s.image, Span::new(1, 3));
        assert_eq!(s.instruction, Span::new(3, 4));
        assert_eq!(s.generated, Span::new(4, 4));
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.generated_len(), 0);
    }

    #[test]
    fn empty_segments_are_allowed() {
        let seq = build_segmented_sequence(&[], &ids(&[7]), &[]).unwrap();
        let s = seq.spans();
        assert_eq!(s.system, Span::new(0, 0));
        assert_eq!(s.image, Span::new(0, 1));
        assert_eq!(s.instruction, Span::new(1, 1));
        assert_eq!(s.generated, Span::new(1, 1));
    }

    #[test]
    fn all_empty_is_rejected() {
        let err = build_segmented_sequence(&[], &[], &[]).unwrap_err();
        assert_eq!(err.to_string(), "empty prompt");
    }

    #[test]
    fn append_extends_generated_only() {
        let seq = build_segmented_sequence(&ids(&[1]), &ids(&[2, 3]), &ids(&[4])).unwrap();
        let one = append_generated(&seq, TokenId(9));
        assert_eq!(one.len(), 5);
        assert_eq!(one.spans().generated, Span::new(4, 5));
        let two = append_generated(&one, TokenId(9));
        assert_eq!(two.generated_len(), 2);
        assert_eq!(two.spans().generated.len(), 2);
        let (before, after) = (seq.spans(), two.spans());
        assert_eq!(before.system, after.system);
        assert_eq!(before.image, after.image);
        assert_eq!(before.instruction, after.instruction);
        // The input value is untouched.
        assert_eq!(seq.len(), 4);
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize_text("A cat, a hat."), vec!["a", "cat", "a", "hat"]);
        assert!(tokenize_text("").is_empty());
        assert_eq!(tokenize_text("Don't stop"), vec!["don't", "stop"]);
        assert_eq!(tokenize_text("(\"well-lit\")  room!"), vec!["well-lit", "room"]);
        assert!(tokenize_text(" ... !! ").is_empty());
    }

    #[test]
    fn vocabulary_round_trip_and_duplicates() {
        let v = Vocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        for i in 0..2 {
            let id = TokenId(i);
            assert_eq!(v.encode(v.decode(id).unwrap()), Some(id));
        }
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn sequence_serde_rejects_empty_prompt() {
        let bad = r#"{"tokens":[],"system_len":0,"image_len":0,"instruction_len":0}"#;
        assert!(serde_json::from_str::<SegmentedSequence>(bad).is_err());
    }

    proptest! {
        #[test]
        fn spans_tile_the_sequence(a in 0usize..5, m in 0usize..5, b in 0usize..5, n in 0usize..6) {
            prop_assume!(a + m + b > 0);
            let mk = |k: usize| vec![TokenId(0); k];
            let mut seq = build_segmented_sequence(&mk(a), &mk(m), &mk(b)).unwrap();
            for _ in 0..n {
                seq = append_generated(&seq, TokenId(1));
            }
            let s = seq.spans();
            let parts = [s.system, s.image, s.instruction, s.generated];
            let mut cursor = 0;
            for p in parts {
                prop_assert_eq!(p.start, cursor);
                cursor = p.end;
            }
            prop_assert_eq!(cursor, seq.len());
            prop_assert_eq!(seq.len(), a + m + b + n);
        }

        #[test]
        fn tokenizer_is_idempotent(text in "[ a-zA-Z.,;:!?\"'()-]{0,40}") {
            let once = tokenize_text(&text);
            let twice = tokenize_text(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn many_appends_keep_prompt_segments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(7);
        let mut seq = build_segmented_sequence(&ids(&[1, 2]), &ids(&[3, 4, 5]), &ids(&[6])).unwrap();
        let spans0 = seq.spans();
        for k in 1..=1000 {
            seq = append_generated(&seq, TokenId(rng.random_range(0..50)));
            let s = seq.spans();
            assert_eq!(s.system, spans0.system);
            assert_eq!(s.image, spans0.image);
            assert_eq!(s.instruction, spans0.instruction);
            assert_eq!(seq.generated_len(), k);
        }
    }
}
