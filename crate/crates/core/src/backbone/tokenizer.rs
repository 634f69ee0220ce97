//! Whitespace tokenizer with a frequency-truncated vocabulary.
//!
//! Text is lower-cased and split on whitespace; ASCII punctuation characters
//! become tokens of their own, and the bracketed special-token spellings
//! (`[MASK]`, `[PAD]`, ...) are kept atomic. Every piece remembers the
//! character span it came from so that token spans can be mapped back to the
//! source text.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]"];

/// One pre-token with its character span `[start, end)` in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits text into lower-cased pieces with character offsets.
pub fn pretokenize(text: &str) -> Vec<Piece> {
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    let mut word_start: Option<usize> = None;

    let flush = |pieces: &mut Vec<Piece>, start: Option<usize>, end: usize| {
        if let Some(s) = start {
            let text: String = chars[s..end].iter().collect::<String>().to_lowercase();
            pieces.push(Piece { text, start: s, end });
        }
    };

    while i < chars.len() {
        let c = chars[i];
        if c == '[' {
            if let Some(sp) = SPECIAL_TOKENS.iter().find(|sp| starts_with_at(&chars, i, sp)) {
                flush(&mut pieces, word_start.take(), i);
                let n = sp.chars().count();
                pieces.push(Piece { text: sp.to_string(), start: i, end: i + n });
                i += n;
                continue;
            }
        }
        if c.is_whitespace() {
            flush(&mut pieces, word_start.take(), i);
        } else if c.is_ascii_punctuation() {
            flush(&mut pieces, word_start.take(), i);
            pieces.push(Piece { text: c.to_string(), start: i, end: i + 1 });
        } else if word_start.is_none() {
            word_start = Some(i);
        }
        i += 1;
    }
    flush(&mut pieces, word_start, chars.len());
    pieces
}

fn starts_with_at(chars: &[char], at: usize, pat: &str) -> bool {
    let mut k = at;
    for p in pat.chars() {
        if chars.get(k) != Some(&p) {
            return false;
        }
        k += 1;
    }
    true
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Keeps the `max_vocab` most frequent pieces; ties are broken
    /// lexicographically so the result depends only on the corpus contents.
    pub fn build<T: AsRef<str>>(corpus: &[T], max_vocab: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for p in pretokenize(text.as_ref()) {
                if !SPECIAL_TOKENS.contains(&p.text.as_str()) {
                    *counts.entry(p.text).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(max_vocab);
        let mut tok = Self::specials_only();
        tok.extend(words.into_iter().map(|(w, _)| w));
        Ok(tok)
    }

    fn specials_only() -> Self {
        let vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { vocab, index }
    }

    /// Reads a vocabulary where line number equals id.
    pub fn from_vocab<T: AsRef<str>>(lines: &[T]) -> Result<Self> {
        if lines.len() < SPECIAL_TOKENS.len()
            || lines.iter().zip(SPECIAL_TOKENS).any(|(l, s)| l.as_ref() != s)
        {
            return Err(Error::Checkpoint("vocabulary must start with the five special tokens".into()));
        }
        let mut tok = Self::specials_only();
        let before = lines.len();
        tok.extend(lines[SPECIAL_TOKENS.len()..].iter().map(|l| l.as_ref().to_string()));
        if tok.len() != before {
            return Err(Error::Checkpoint("duplicate vocabulary entries".into()));
        }
        Ok(tok)
    }

    /// Appends words not yet present, in the given order.
    pub fn extend(&mut self, words: impl IntoIterator<Item = String>) {
        for w in words {
            if !self.index.contains_key(&w) {
                self.index.insert(w.clone(), self.vocab.len() as u32);
                self.vocab.push(w);
            }
        }
    }

    /// Adds every piece of `text` to the vocabulary.
    pub fn extend_from_text(&mut self, text: &str) {
        self.extend(pretokenize(text).into_iter().map(|p| p.text));
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    fn piece_id(&self, piece: &str) -> u32 {
        self.id(piece).unwrap_or(UNK)
    }

    /// Token ids without BOS/EOS.
    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        pretokenize(text).iter().map(|p| self.piece_id(&p.text)).collect()
    }

    /// Token ids and their source character spans, without BOS/EOS.
    pub fn encode_with_offsets(&self, text: &str) -> (Vec<u32>, Vec<(usize, usize)>) {
        pretokenize(text).into_iter().map(|p| (self.piece_id(&p.text), (p.start, p.end))).unzip()
    }

    /// `[BOS] words... [EOS]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() / 3 + 2);
        ids.push(BOS);
        ids.extend(self.encode_words(text));
        ids.push(EOS);
        ids
    }

    /// Joins tokens with single spaces, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_order_with_lexicographic_ties() {
        let tok = Tokenizer::build(&["a b", "a"], 10).unwrap();
        assert_eq!(&tok.vocab()[5..], &["a", "b"]);
        let tok = Tokenizer::build(&["z y x", "y"], 2).unwrap();
        assert_eq!(&tok.vocab()[5..], &["y", "x"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = Tokenizer::build::<&str>(&[], 10).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let tok = Tokenizer::build(&["x"], 10).unwrap();
        assert_eq!(tok.encode("y"), vec![BOS, UNK, EOS]);
    }

    #[test]
    fn specials_distinct_and_atomic() {
        let ids = [PAD, UNK, BOS, EOS, MASK];
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let tok = Tokenizer::build(&["it was great"], 10).unwrap();
        assert_eq!(tok.encode_words("It was [MASK]."), vec![tok.id("it").unwrap(), tok.id("was").unwrap(), MASK, UNK]);
    }

    #[test]
    fn offsets_point_into_source() {
        let text = "Alice met Bob, today.";
        let pieces = pretokenize(text);
        let chars: Vec<char> = text.chars().collect();
        let words: Vec<&str> = pieces.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(words, ["alice", "met", "bob", ",", "today", "."]);
        for p in &pieces {
            let s: String = chars[p.start..p.end].iter().collect();
            assert_eq!(s.to_lowercase(), p.text);
        }
    }

    #[test]
    fn round_trip_in_vocabulary() {
        let tok = Tokenizer::build(&["it was great"], 10).unwrap();
        assert_eq!(tok.decode(&tok.encode("it was great")), "it was great");
    }

    #[test]
    fn vocab_file_round_trip() {
        let tok = Tokenizer::build(&["b a c a"], 10).unwrap();
        let again = Tokenizer::from_vocab(tok.vocab()).unwrap();
        assert_eq!(tok, again);
        assert!(Tokenizer::from_vocab(&["a"]).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in proptest::collection::vec("[a-z]{1,6}", 1..12)) {
            let text = words.join(" ");
            let tok = Tokenizer::build(&[text.clone()], 1000).unwrap();
            prop_assert_eq!(tok.decode(&tok.encode(&text)), text);
        }
    }
}
