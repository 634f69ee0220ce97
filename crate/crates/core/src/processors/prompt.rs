use super::dataset::{Example, LabelSet};
use crate::backbone::{TokenBatch, Tokenizer, BOS, EOS, MASK};
use crate::error::{Error, Result};
use crate::heads::Verbalizer;

#[derive(Clone, Debug, PartialEq, Eq)]
enum Part {
    Literal(String),
    Text,
    Mask,
}

/// A cloze pattern such as `"{text} It was {mask}."` plus the verbalizer
/// that reads the mask position.
#[derive(Clone, Debug)]
pub struct PromptTemplate {
    pattern: String,
    parts: Vec<Part>,
    pub verbalizer: Verbalizer,
}

impl PromptTemplate {
    pub fn new(pattern: &str, verbalizer: Verbalizer) -> Result<Self> {
        let (t, m) = (pattern.matches("{text}").count(), pattern.matches("{mask}").count());
        if t != 1 || m != 1 {
            return Err(Error::InvalidArgument(format!(
                "template needs exactly one {{text}} and one {{mask}} slot, found {t} and {m}: {pattern:?}"
            )));
        }
        let mut parts = Vec::new();
        let mut rest = pattern;
        while !rest.is_empty() {
            let next = [("{text}", Part::Text), ("{mask}", Part::Mask)]
                .into_iter()
                .filter_map(|(slot, part)| rest.find(slot).map(|i| (i, slot.len(), part)))
                .min_by_key(|(i, _, _)| *i);
            match next {
                Some((i, len, part)) => {
                    if i > 0 {
                        parts.push(Part::Literal(rest[..i].to_string()));
                    }
                    parts.push(part);
                    rest = &rest[i + len..];
                }
                None => {
                    parts.push(Part::Literal(rest.to_string()));
                    rest = "";
                }
            }
        }
        Ok(Self { pattern: pattern.to_string(), parts, verbalizer })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Words of the literal parts, for building vocabularies.
    pub fn literal_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Literal(s) => Some(s.as_str()),
                _ => None,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Token ids with the text trimmed from its end to fit `max_len`, and the
    /// index of the MASK token.
    pub fn encode(&self, text: &str, tokenizer: &Tokenizer, max_len: usize) -> Result<(Vec<u32>, usize)> {
        let mut text_ids = tokenizer.encode_words(text);
        let fixed: usize = 2 + self
            .parts
            .iter()
            .map(|p| match p {
                Part::Literal(s) => tokenizer.encode_words(s).len(),
                Part::Mask => 1,
                Part::Text => 0,
            })
            .sum::<usize>();
        if fixed > max_len {
            return Err(Error::InvalidArgument(format!(
                "template needs {fixed} tokens without any text, max_len is {max_len}; the mask would be cut"
            )));
        }
        text_ids.truncate(max_len - fixed);
        let mut ids = vec![BOS];
        let mut mask_at = 0;
        for p in &self.parts {
            match p {
                Part::Literal(s) => ids.extend(tokenizer.encode_words(s)),
                Part::Text => ids.extend(&text_ids),
                Part::Mask => {
                    mask_at = ids.len();
                    ids.push(MASK);
                }
            }
        }
        ids.push(EOS);
        Ok((ids, mask_at))
    }
}

/// Instantiates the template for every example; records one mask position
/// per row and label ids when the examples carry labels.
pub fn apply_template(
    examples: &[Example],
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    labels: &LabelSet,
    max_len: usize,
) -> Result<TokenBatch> {
    let mut seqs = Vec::with_capacity(examples.len());
    let mut positions = Vec::with_capacity(examples.len());
    for e in examples {
        let (ids, at) = template.encode(&e.text_a, tokenizer, max_len)?;
        seqs.push(ids);
        positions.push(at);
    }
    let mut batch = TokenBatch::from_sequences(&seqs);
    batch.mask_positions = Some(positions);
    if examples.iter().any(|e| e.label.is_some()) {
        batch.labels = Some(
            examples
                .iter()
                .map(|e| labels.id(e.label.as_deref().unwrap_or("")))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(batch)
}
