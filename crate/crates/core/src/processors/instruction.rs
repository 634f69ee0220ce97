use serde::{Deserialize, Serialize};

use crate::backbone::{Tokenizer, BOS, EOS};
use crate::error::{Error, Result};

pub const DEFAULT_EXTRACTIVE_PATTERN: &str = "Find all {type} entities in the text: {text}";
pub const DEFAULT_INFERENCE_PATTERN: &str = "this text is about {label} .";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionStyle {
    Extractive,
    Inference,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSchema {
    pub style: InstructionStyle,
    pub pattern: String,
    #[serde(default)]
    pub label_words: Vec<Vec<String>>,
}

impl Default for InstructionSchema {
    fn default() -> Self {
        Self::extractive(DEFAULT_EXTRACTIVE_PATTERN).expect("default pattern is valid")
    }
}

fn count(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

impl InstructionSchema {
    pub fn extractive(pattern: &str) -> Result<Self> {
        if count(pattern, "{text}") != 1 || count(pattern, "{type}") != 1 {
            return Err(Error::InvalidArgument(format!(
                "extractive pattern needs exactly one {{type}} and one {{text}} slot: {pattern:?}"
            )));
        }
        Ok(Self { style: InstructionStyle::Extractive, pattern: pattern.to_string(), label_words: Vec::new() })
    }

    pub fn inference(pattern: &str) -> Result<Self> {
        if count(pattern, "{label}") != 1 {
            return Err(Error::InvalidArgument(format!("inference pattern needs one {{label}} slot: {pattern:?}")));
        }
        Ok(Self { style: InstructionStyle::Inference, pattern: pattern.to_string(), label_words: Vec::new() })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&raw)?;
        match s.style {
            InstructionStyle::Extractive => Self::extractive(&s.pattern),
            InstructionStyle::Inference => Self::inference(&s.pattern),
        }
        .map(|v| Self { label_words: s.label_words, ..v })
    }
}

/// An instantiated extractive instruction. The source text sits verbatim at
/// characters `[text_start, text_start + text_len)` of `text`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub text: String,
    pub prefix: String,
    pub source: String,
    pub suffix: String,
    pub text_start: usize,
}

pub fn build_extractive_instruction(text: &str, entity_type: &str, schema: &InstructionSchema) -> Result<Instruction> {
    if schema.style != InstructionStyle::Extractive {
        return Err(Error::InvalidArgument("schema is not extractive".into()));
    }
    let filled = schema.pattern.replace("{type}", entity_type);
    let (prefix, suffix) = filled.split_once("{text}").expect("validated pattern");
    Ok(Instruction {
        text: format!("{prefix}{text}{suffix}"),
        prefix: prefix.to_string(),
        source: text.to_string(),
        suffix: suffix.to_string(),
        text_start: prefix.chars().count(),
    })
}

/// Token ids of an instruction together with, for every token, its
/// character span in the *source* text (`None` outside the text region).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstruction {
    pub ids: Vec<u32>,
    pub offsets: OffsetMap,
    /// Number of source tokens dropped to fit `max_len`.
    pub truncated: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OffsetMap {
    spans: Vec<Option<(usize, usize)>>,
}

impl OffsetMap {
    pub(crate) fn from_spans(spans: Vec<Option<(usize, usize)>>) -> Self {
        Self { spans }
    }

    pub fn spans(&self) -> &[Option<(usize, usize)>] {
        &self.spans
    }

    /// First and last token index of the text region.
    pub fn region(&self) -> Option<(usize, usize)> {
        let first = self.spans.iter().position(Option::is_some)?;
        let last = self.spans.iter().rposition(Option::is_some)?;
        Some((first, last))
    }

    /// Source characters `[start, end)` covered by tokens `start..=end`, or
    /// `None` when either end lies outside the text region.
    pub fn to_chars(&self, tok_start: usize, tok_end: usize) -> Option<(usize, usize)> {
        let (s, _) = (*self.spans.get(tok_start)?)?;
        let (_, e) = (*self.spans.get(tok_end)?)?;
        (tok_start <= tok_end).then_some((s, e))
    }

    /// Token span whose characters are exactly `[start, end)`.
    pub fn to_tokens(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let ts = self.spans.iter().position(|s| matches!(s, Some((a, _)) if *a == start))?;
        let te = self.spans.iter().position(|s| matches!(s, Some((_, b)) if *b == end))?;
        (ts <= te).then_some((ts, te))
    }
}

/// Token span `(first, last)` of a word-aligned character span.
pub(crate) fn char_span_to_tokens(offsets: &[(usize, usize)], start: usize, end: usize) -> Option<(usize, usize)> {
    let ts = offsets.iter().position(|&(a, _)| a == start)?;
    let te = offsets.iter().position(|&(_, b)| b == end)?;
    (ts <= te).then_some((ts, te))
}

/// `[BOS] prefix text suffix [EOS]`, dropping trailing text tokens to fit
/// `max_len`. Errors when no text token survives.
pub fn encode_instruction(instr: &Instruction, tokenizer: &Tokenizer, max_len: usize) -> Result<EncodedInstruction> {
    let prefix = tokenizer.encode_words(&instr.prefix);
    let suffix = tokenizer.encode_words(&instr.suffix);
    let (mut text, mut offs) = tokenizer.encode_with_offsets(&instr.source);
    let fixed = prefix.len() + suffix.len() + 2;
    let room = max_len.saturating_sub(fixed);
    if room == 0 || text.is_empty() {
        return Err(Error::TextTooLong);
    }
    let truncated = text.len().saturating_sub(room);
    text.truncate(room);
    offs.truncate(room);

    let mut ids = Vec::with_capacity(fixed + text.len());
    let mut spans = Vec::with_capacity(ids.capacity());
    ids.push(BOS);
    spans.push(None);
    ids.extend(&prefix);
    spans.extend(std::iter::repeat(None).take(prefix.len()));
    ids.extend(&text);
    spans.extend(offs.into_iter().map(Some));
    ids.extend(&suffix);
    spans.extend(std::iter::repeat(None).take(suffix.len()));
    ids.push(EOS);
    spans.push(None);
    Ok(EncodedInstruction { ids, offsets: OffsetMap { spans }, truncated })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferencePair {
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

/// One (premise, hypothesis) pair per candidate label.
pub fn build_inference_instruction(premise: &str, hypothesis_pattern: &str, labels: &[String]) -> Result<Vec<InferencePair>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label set".into()));
    }
    if count(hypothesis_pattern, "{label}") != 1 {
        return Err(Error::InvalidArgument(format!("hypothesis pattern needs one {{label}} slot: {hypothesis_pattern:?}")));
    }
    let pairs: Vec<InferencePair> = labels
        .iter()
        .map(|l| InferencePair {
            premise: premise.to_string(),
            hypothesis: hypothesis_pattern.replace("{label}", l),
            label: l.clone(),
        })
        .collect();
    for (i, a) in pairs.iter().enumerate() {
        if let Some(b) = pairs[..i].iter().find(|b| b.hypothesis == a.hypothesis) {
            log::warn!("labels {:?} and {:?} produce identical inputs", b.label, a.label);
        }
    }
    Ok(pairs)
}
