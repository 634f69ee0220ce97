use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardCtx, TokenBatch, Tokenizer};
use crate::error::{Error, Result};
use crate::heads::decode_spans;
use crate::processors::{build_extractive_instruction, char_slice, encode_instruction, InstructionSchema};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{Encoded, TaskModel, TaskType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRequest {
    pub text: String,
    pub schema_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl ExtractionRequest {
    pub fn new(text: impl Into<String>, schema_types: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { text: text.into(), schema_types: schema_types.into_iter().map(Into::into).collect(), threshold: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::InvalidArgument("text must not be empty".into()));
        }
        if self.schema_types.is_empty() {
            return Err(Error::InvalidArgument("schema_types must not be empty".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.schema_types {
            if t.trim().is_empty() || !seen.insert(t) {
                return Err(Error::InvalidArgument(format!("schema type {t:?} is blank or repeated")));
            }
        }
        if self.threshold.is_some_and(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Spans per requested type, each list sorted by `(start, end)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExtractionResult(pub BTreeMap<String, Vec<ExtractedSpan>>);

impl ExtractionResult {
    pub fn spans(&self, kind: &str) -> &[ExtractedSpan] {
        self.0.get(kind).map_or(&[], Vec::as_slice)
    }
}

/// Scores every token span of one encoded instruction.
pub trait SpanScorer: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;
    fn schema(&self) -> &InstructionSchema;
    fn max_len(&self) -> usize;
    fn threshold(&self) -> f64;
    /// Row-major `[L, L]` scores for `ids` of length `L`.
    fn score(&self, ids: &[u32]) -> Result<Vec<f64>>;
}

impl<S: Scalar> SpanScorer for TaskModel<S> {
    fn tokenizer(&self) -> &Tokenizer {
        self.backbone.tokenizer()
    }

    fn schema(&self) -> &InstructionSchema {
        self.spec().instruction.as_ref().expect("checked by ensure_instruction_model")
    }

    fn max_len(&self) -> usize {
        self.spec().max_len
    }

    fn threshold(&self) -> f64 {
        self.spec().threshold
    }

    fn score(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let enc = Encoded { batch: TokenBatch::from_sequences(&[ids.to_vec()]), ..Default::default() };
        let s = self.span_scores(&enc, &mut ForwardCtx::eval())?;
        Ok(s.data().iter().map(|x| x.as_f64()).collect())
    }
}

/// Errors unless `model` is a global-pointer model trained on instructions.
pub fn ensure_instruction_model<S: Scalar>(model: &TaskModel<S>) -> Result<()> {
    if model.task_type() != TaskType::GlobalPointer || model.spec().instruction.is_none() {
        return Err(Error::Unsupported(format!("{} model without an instruction schema cannot extract", model.task_type())));
    }
    Ok(())
}

/// Errors with [`Error::TextTooLong`] if any requested type would have its
/// text cut to fit the instruction window.
pub fn check_window(scorer: &dyn SpanScorer, req: &ExtractionRequest) -> Result<()> {
    req.validate()?;
    for kind in &req.schema_types {
        let instr = build_extractive_instruction(&req.text, kind, scorer.schema())?;
        if encode_instruction(&instr, scorer.tokenizer(), scorer.max_len())?.truncated > 0 {
            return Err(Error::TextTooLong);
        }
    }
    Ok(())
}

/// One instruction per requested type; cells above the threshold become
/// spans of the source text. Cells touching the instruction wrapper are
/// dropped.
pub fn extract(scorer: &dyn SpanScorer, req: &ExtractionRequest) -> Result<ExtractionResult> {
    req.validate()?;
    let threshold = req.threshold.unwrap_or_else(|| scorer.threshold());
    let mut out = BTreeMap::new();
    for kind in &req.schema_types {
        let instr = build_extractive_instruction(&req.text, kind, scorer.schema())?;
        let enc = encode_instruction(&instr, scorer.tokenizer(), scorer.max_len())?;
        let l = enc.ids.len();
        let scores = scorer.score(&enc.ids)?;
        if scores.len() != l * l {
            return Err(Error::Shape(format!("scorer returned {} cells for {l} tokens", scores.len())));
        }
        let plane = Tensor::from_vec(&[1, l, l], scores)?;
        let mut spans: Vec<ExtractedSpan> = decode_spans(&plane, threshold)
            .into_iter()
            .filter_map(|p| {
                let (start, end) = enc.offsets.to_chars(p.start, p.end)?;
                Some(ExtractedSpan { text: char_slice(&req.text, start, end), start, end, score: p.score })
            })
            .collect();
        spans.sort_by(|a, b| (a.start, a.end).cmp(&(b.start, b.end)));
        out.insert(kind.clone(), spans);
    }
    Ok(ExtractionResult(out))
}
