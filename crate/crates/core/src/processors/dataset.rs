use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synthetic;
use crate::error::{Error, Result};

/// A typed character span `[start, end)` inside `text_a`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanLabel {
    #[serde(rename = "type")]
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text_a: String,
    #[serde(default)]
    pub text_b: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub spans: Option<Vec<SpanLabel>>,
}

impl Example {
    pub fn new(id: impl Into<String>, text_a: impl Into<String>) -> Self {
        Self { id: id.into(), text_a: text_a.into(), ..Default::default() }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_text_b(mut self, text_b: impl Into<String>) -> Self {
        self.text_b = Some(text_b.into());
        self
    }

    pub fn with_spans(mut self, spans: Vec<SpanLabel>) -> Self {
        self.spans = Some(spans);
        self
    }

    /// Checks every span against the character length of `text_a`.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.text_a.chars().count();
        for s in self.spans.iter().flatten() {
            if s.start >= s.end || s.end > n {
                return Err(format!("span {:?} [{}, {}) outside text of {} chars", s.kind, s.start, s.end, n));
            }
        }
        Ok(())
    }

    /// The characters `[start, end)` of `text_a`.
    pub fn fragment(&self, start: usize, end: usize) -> String {
        char_slice(&self.text_a, start, end)
    }
}

pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

/// Names accepted by [`load_dataset`] besides file paths.
pub fn registered_datasets() -> Vec<&'static str> {
    vec![
        "toy_sentiment/train",
        "toy_sentiment/test",
        "toy_sentiment/pretrain",
        "toy_entities/train",
        "toy_entities/test",
        "toy_events/train",
        "toy_events/test",
    ]
}

/// Loads a JSONL or TSV file, or generates a registered synthetic dataset.
pub fn load_dataset(source: &str) -> Result<Vec<Example>> {
    let path = Path::new(source);
    if path.is_file() {
        return match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => load_tsv(path),
            Some("jsonl" | "json") => load_jsonl(path),
            other => Err(Error::Unsupported(format!("dataset extension {other:?}; use .jsonl or .tsv"))),
        };
    }
    let out = match source {
        "toy_sentiment/train" => synthetic::sentiment_dataset(500, 11),
        "toy_sentiment/test" => synthetic::sentiment_dataset(200, 12),
        "toy_sentiment/pretrain" => synthetic::sentiment_pretraining_corpus(2000, 13),
        "toy_entities/train" => synthetic::entity_dataset(400, 21),
        "toy_entities/test" => synthetic::entity_dataset(100, 22),
        "toy_events/train" => synthetic::event_dataset(200, 31),
        "toy_events/test" => synthetic::event_dataset(60, 32),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "dataset {source:?} is neither a file nor registered ({})",
                registered_datasets().join(", ")
            )))
        }
    };
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed { path: path.to_path_buf(), line: i + 1, message };
        let ex: Example = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        ex.validate().map_err(malformed)?;
        out.push(ex);
    }
    Ok(out)
}

/// TSV with a header row naming columns among `id`, `text`/`text_a`,
/// `text_b`, `label`. Missing ids become the data line number.
pub fn load_tsv(path: &Path) -> Result<Vec<Example>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw.lines().enumerate();
    let Some((_, header)) = lines.next() else { return Ok(Vec::new()) };
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |names: &[&str]| cols.iter().position(|c| names.contains(c));
    let text_col = find(&["text", "text_a"]).ok_or_else(|| Error::Malformed {
        path: path.to_path_buf(),
        line: 1,
        message: "header has no text column".into(),
    })?;
    let (id_col, b_col, label_col) = (find(&["id"]), find(&["text_b"]), find(&["label"]));

    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let get = |c: Option<usize>| c.map(|c| fields[c].to_string());
        out.push(Example {
            id: get(id_col).unwrap_or_else(|| i.to_string()),
            text_a: fields[text_col].to_string(),
            text_b: get(b_col),
            label: get(label_col),
            spans: None,
        });
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn save_dataset(examples: &[Example], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Label strings in lexicographic order; the position is the class id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new<T: Into<String>>(labels: impl IntoIterator<Item = T>) -> Self {
        let mut labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        labels.sort();
        labels.dedup();
        Self { labels }
    }

    pub fn from_examples(examples: &[Example]) -> Self {
        Self::new(examples.iter().filter_map(|e| e.label.clone()))
    }

    /// Span types found in the examples.
    pub fn from_span_types(examples: &[Example]) -> Self {
        Self::new(examples.iter().flat_map(|e| e.spans.iter().flatten().map(|s| s.kind.clone())))
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).map_err(|_| Error::UnknownLabel(label.to_string()))
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
