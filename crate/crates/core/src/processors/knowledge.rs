use std::collections::HashSet;
use std::path::Path;

use crate::backbone::pretokenize;
use crate::error::{Error, Result};

pub const KNOWLEDGE_SEPARATOR: &str = " | ";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Triples in insertion order, no duplicates.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeBase {
    triples: Vec<Triple>,
    /// Entity names as lower-cased word sequences, longest first.
    entities: Vec<(Vec<String>, String)>,
}

fn words(s: &str) -> Vec<String> {
    pretokenize(s).into_iter().map(|p| p.text).collect()
}

impl KnowledgeBase {
    pub fn new(triples: Vec<Triple>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &triples {
            if t.head.trim().is_empty() || t.tail.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("empty entity in triple {t:?}")));
            }
            if !seen.insert(t) {
                return Err(Error::InvalidArgument(format!("duplicate triple {t:?}")));
            }
        }
        let mut names: Vec<&String> = triples.iter().flat_map(|t| [&t.head, &t.tail]).collect();
        names.sort();
        names.dedup();
        let mut entities: Vec<(Vec<String>, String)> = names.into_iter().map(|n| (words(n), n.clone())).collect();
        entities.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        Ok(Self { triples, entities })
    }

    /// `head<TAB>relation<TAB>tail` per line.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut triples = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [h, r, t] = f[..] else {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 3 fields, found {}", f.len()),
                });
            };
            triples.push(Triple { head: h.into(), relation: r.into(), tail: t.into() });
        }
        Self::new(triples)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Entity names found in `text` by longest word-sequence match, in order
    /// of first appearance.
    pub fn match_entities(&self, text: &str) -> Vec<&str> {
        let toks = words(text);
        let mut found: Vec<&str> = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let hit = self.entities.iter().find(|(w, _)| !w.is_empty() && toks[i..].starts_with(w));
            match hit {
                Some((w, name)) => {
                    if !found.contains(&name.as_str()) {
                        found.push(name);
                    }
                    i += w.len();
                }
                None => i += 1,
            }
        }
        found
    }
}

/// Appends up to `max_paths` one-hop relation sentences per matched entity.
/// Text without matches, an empty base, or `max_paths == 0` come back as is.
pub fn build_knowledge_prompt(text: &str, kb: &KnowledgeBase, max_paths: usize) -> String {
    if max_paths == 0 {
        return text.to_string();
    }
    let mut sentences = Vec::new();
    for entity in kb.match_entities(text) {
        sentences.extend(
            kb.triples
                .iter()
                .filter(|t| t.head == entity)
                .take(max_paths)
                .map(|t| format!("{} {} {}.", t.head, t.relation, t.tail)),
        );
    }
    if sentences.is_empty() {
        return text.to_string();
    }
    format!("{text}{KNOWLEDGE_SEPARATOR}{}", sentences.join(" "))
}
