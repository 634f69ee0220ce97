use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, bio_to_spans, exact_match, macro_f1, matthews, span_f1, MetricReport};
use crate::autograd::{Graph, Var};
use crate::backbone::{argmax, Architecture, Backbone, ForwardCtx, TokenBatch, Tokenizer, BOS};
use crate::error::{Error, Result};
use crate::heads::{decode_spans, ChoiceHead, ClsHead, GlobalPointerHead, SpanKey, TokenHead, Verbalizer};
use crate::processors::{
    bio_tags, build_extractive_instruction, collate_classification, collate_generation, collate_multichoice,
    collate_spans, collate_tokens, encode_instruction, apply_template, Example, InstructionSchema, LabelSet,
    OffsetMap, PromptTemplate,
};
use crate::scalar::{softmax_in_place, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    HeadCls,
    MaskedPromptCls,
    TokenCls,
    GlobalPointer,
    Multichoice,
    ClmGeneration,
}

impl TaskType {
    pub const ALL: [TaskType; 6] = [
        TaskType::HeadCls,
        TaskType::MaskedPromptCls,
        TaskType::TokenCls,
        TaskType::GlobalPointer,
        TaskType::Multichoice,
        TaskType::ClmGeneration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::HeadCls => "head_cls",
            TaskType::MaskedPromptCls => "masked_prompt_cls",
            TaskType::TokenCls => "token_cls",
            TaskType::GlobalPointer => "global_pointer",
            TaskType::Multichoice => "multichoice",
            TaskType::ClmGeneration => "clm_generation",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskType::HeadCls | TaskType::MaskedPromptCls | TaskType::Multichoice)
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::UnregisteredTask {
            given: s.to_string(),
            registered: Self::ALL.map(TaskType::name).join(", "),
        })
    }
}

impl std::fmt::Display for TaskType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_head_dim() -> usize {
    16
}

fn default_max_new() -> usize {
    16
}

/// Everything besides weights needed to rebuild a task model; stored as
/// `task.json` next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_type: TaskType,
    /// Class labels, or span types for span tasks.
    pub labels: Vec<String>,
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// `label_words[c]` verbalizes class `c` of `labels`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_words: Option<Vec<Vec<String>>>,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default)]
    pub threshold: f64,
    /// When set, span examples are `(text_a, type = text_b)` instructions
    /// scored by a single-type pointer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<InstructionSchema>,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
}

impl TaskSpec {
    pub fn new(task_type: TaskType, labels: Vec<String>, max_len: usize) -> Self {
        Self {
            task_type,
            labels,
            max_len,
            template: None,
            label_words: None,
            head_dim: default_head_dim(),
            threshold: 0.0,
            instruction: None,
            max_new_tokens: default_max_new(),
        }
    }

    /// Number of score planes of the span head.
    pub fn span_types(&self) -> usize {
        if self.instruction.is_some() {
            1
        } else {
            self.labels.len()
        }
    }
}

/// Model input for a list of examples.
#[derive(Clone, Debug, Default)]
pub struct Encoded {
    pub batch: TokenBatch,
    pub gold: Vec<SpanKey>,
    pub num_choices: usize,
    /// Per-row token to source-character map (span tasks).
    pub offsets: Vec<OffsetMap>,
    /// Loss terms the batch contributes to a mean.
    pub targets: usize,
}

/// Turns examples into batches. Owns its own tokenizer copy so it can run on
/// a producer thread while the model trains.
#[derive(Clone, Debug)]
pub struct TaskEncoder {
    pub spec: TaskSpec,
    tokenizer: Tokenizer,
    labels: LabelSet,
    tags: Option<LabelSet>,
    template: Option<PromptTemplate>,
}

fn source_offsets(tokenizer: &Tokenizer, text: &str, max_len: usize) -> OffsetMap {
    let (_, offs) = tokenizer.encode_with_offsets(text);
    let keep = max_len.saturating_sub(2).min(offs.len());
    let mut spans = vec![None];
    spans.extend(offs[..keep].iter().copied().map(Some));
    spans.push(None);
    OffsetMap::from_spans(spans)
}

impl TaskEncoder {
    pub fn new(spec: TaskSpec, tokenizer: Tokenizer) -> Result<Self> {
        let labels = LabelSet::new(spec.labels.clone());
        if labels.len() != spec.labels.len() || labels.labels() != spec.labels.as_slice() {
            return Err(Error::InvalidArgument("task labels must be sorted and distinct".into()));
        }
        let tags = (spec.task_type == TaskType::TokenCls).then(|| bio_tags(&labels));
        let template = match spec.task_type {
            TaskType::MaskedPromptCls => {
                let pattern = spec.template.as_deref().unwrap_or(super::DEFAULT_TEMPLATE);
                let words = spec
                    .label_words
                    .clone()
                    .unwrap_or_else(|| spec.labels.iter().map(|l| vec![l.clone()]).collect());
                if words.len() != labels.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} label word groups for {} labels",
                        words.len(),
                        labels.len()
                    )));
                }
                Some(PromptTemplate::new(pattern, Verbalizer::new(words, &tokenizer)?)?)
            }
            _ => None,
        };
        Ok(Self { spec, tokenizer, labels, tags, template })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn template(&self) -> Option<&PromptTemplate> {
        self.template.as_ref()
    }

    pub fn encode(&self, examples: &[Example]) -> Result<Encoded> {
        let (tok, max_len) = (&self.tokenizer, self.spec.max_len);
        let mut enc = Encoded::default();
        match self.spec.task_type {
            TaskType::HeadCls => enc.batch = collate_classification(examples, tok, &self.labels, max_len)?,
            TaskType::MaskedPromptCls => {
                let t = self.template.as_ref().expect("prompt task has a template");
                enc.batch = apply_template(examples, t, tok, &self.labels, max_len)?;
            }
            TaskType::TokenCls => {
                enc.batch = collate_tokens(examples, tok, self.tags.as_ref().expect("tags"), max_len)?;
                enc.offsets = examples.iter().map(|e| source_offsets(tok, &e.text_a, max_len)).collect();
            }
            TaskType::GlobalPointer => match &self.spec.instruction {
                Some(schema) => self.encode_instructions(examples, schema, &mut enc)?,
                None => {
                    let (batch, gold) = collate_spans(examples, tok, &self.labels, max_len)?;
                    enc.batch = batch;
                    enc.gold = gold;
                    enc.offsets = examples.iter().map(|e| source_offsets(tok, &e.text_a, max_len)).collect();
                }
            },
            TaskType::Multichoice => {
                let (batch, n) = collate_multichoice(examples, tok, max_len)?;
                enc.batch = batch;
                enc.num_choices = n;
            }
            TaskType::ClmGeneration => enc.batch = collate_generation(examples, tok, max_len)?,
        }
        enc.targets = match self.spec.task_type {
            TaskType::HeadCls | TaskType::MaskedPromptCls | TaskType::Multichoice => {
                enc.batch.labels.as_ref().map_or(0, Vec::len)
            }
            TaskType::TokenCls => enc
                .batch
                .token_labels
                .iter()
                .flatten()
                .zip(&enc.batch.attention_mask)
                .filter(|(t, &m)| t.is_some() && m == 1)
                .count(),
            TaskType::GlobalPointer => enc.batch.batch_size * self.spec.span_types(),
            TaskType::ClmGeneration => enc.batch.lm_targets.iter().flatten().flatten().count(),
        };
        Ok(enc)
    }

    fn encode_instructions(&self, examples: &[Example], schema: &InstructionSchema, enc: &mut Encoded) -> Result<()> {
        let mut seqs = Vec::with_capacity(examples.len());
        for (b, e) in examples.iter().enumerate() {
            let kind = e
                .text_b
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument(format!("instruction example {:?} has no type in text_b", e.id)))?;
            let instr = build_extractive_instruction(&e.text_a, kind, schema)?;
            let encoded = encode_instruction(&instr, &self.tokenizer, self.spec.max_len)?;
            for s in e.spans.iter().flatten().filter(|s| s.kind == kind) {
                if let Some((start, end)) = encoded.offsets.to_tokens(s.start, s.end) {
                    enc.gold.push(SpanKey { batch: b, type_id: 0, start, end });
                }
            }
            seqs.push(encoded.ids);
            enc.offsets.push(encoded.offsets);
        }
        enc.batch = TokenBatch::from_sequences(&seqs);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Cls(ClsHead),
    Token(TokenHead),
    Choice(ChoiceHead),
    Span(GlobalPointerHead),
    Prompt,
    Lm,
}

/// A predicted span in source characters `[start, end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CharSpan {
    pub type_id: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Backbone plus task head and encoder.
#[derive(Clone, Debug)]
pub struct TaskModel<S: Scalar> {
    pub backbone: Backbone<S>,
    pub encoder: TaskEncoder,
    head: Head,
    pub eval_batch_size: usize,
}

impl<S: Scalar> TaskModel<S> {
    /// Attaches the task head, reusing head tensors already in the store
    /// (e.g. loaded from a checkpoint) and creating them otherwise.
    pub fn new(mut backbone: Backbone<S>, spec: TaskSpec, seed: u64) -> Result<Self> {
        let arch = backbone.config().architecture;
        let want = if spec.task_type == TaskType::ClmGeneration { Architecture::Decoder } else { Architecture::Encoder };
        if arch != want {
            return Err(Error::Unsupported(format!("task {} needs a {want:?} backbone, got {arch:?}", spec.task_type)));
        }
        if spec.max_len > backbone.config().max_seq_len {
            return Err(Error::Config(format!(
                "max_len {} exceeds the model's max_seq_len {}",
                spec.max_len,
                backbone.config().max_seq_len
            )));
        }
        let encoder = TaskEncoder::new(spec, backbone.tokenizer().clone())?;
        let spec = &encoder.spec;
        let d = backbone.config().hidden_size;
        let store = backbone.params_mut();
        let n = encoder.labels.len();
        let head = match spec.task_type {
            TaskType::HeadCls => Head::Cls(match store.id(&format!("{}.weight", ClsHead::NAME)) {
                Some(_) => ClsHead::from_store(store)?,
                None => ClsHead::new(store, seed, d, n)?,
            }),
            TaskType::TokenCls => {
                let tags = encoder.tags.as_ref().expect("tags").len();
                Head::Token(match store.id(&format!("{}.weight", TokenHead::NAME)) {
                    Some(_) => TokenHead::from_store(store)?,
                    None => TokenHead::new(store, seed, d, tags)?,
                })
            }
            TaskType::Multichoice => Head::Choice(match store.id(&format!("{}.weight", ChoiceHead::NAME)) {
                Some(_) => ChoiceHead::from_store(store)?,
                None => ChoiceHead::new(store, seed, d)?,
            }),
            TaskType::GlobalPointer => {
                let t = spec.span_types();
                let mut h = match store.id(&format!("{}.query.weight", GlobalPointerHead::NAME)) {
                    Some(_) => GlobalPointerHead::from_store(store, t)?,
                    None => GlobalPointerHead::new(store, seed, d, t, spec.head_dim)?,
                };
                h.threshold = spec.threshold;
                Head::Span(h)
            }
            TaskType::MaskedPromptCls => Head::Prompt,
            TaskType::ClmGeneration => Head::Lm,
        };
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::Checkpoint(format!("stored {what} head does not fit the task"))) };
        match head {
            Head::Cls(h) => check(h.num_labels == n, "classification")?,
            Head::Token(h) => check(h.num_tags == encoder.tags.as_ref().map_or(0, LabelSet::len), "token")?,
            _ => {}
        }
        Ok(Self { backbone, encoder, head, eval_batch_size: 32 })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.encoder.spec
    }

    pub fn task_type(&self) -> TaskType {
        self.encoder.spec.task_type
    }

    pub fn labels(&self) -> &LabelSet {
        &self.encoder.labels
    }

    pub fn encode(&self, examples: &[Example]) -> Result<Encoded> {
        self.encoder.encode(examples)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.backbone.save(dir)?;
        let path = dir.join("task.json");
        let json = serde_json::to_string_pretty(self.spec())?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let backbone = Backbone::load(dir)?;
        let path = dir.join("task.json");
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let spec: TaskSpec = serde_json::from_str(&raw)?;
        let seed = backbone.config().seed;
        Self::new(backbone, spec, seed)
    }

    /// Task loss times `scale` (the caller divides by the target count).
    pub fn loss_graph<'g>(&'g self, g: &Graph<'g, S>, enc: &Encoded, ctx: &mut ForwardCtx, scale: S) -> Result<Var> {
        let batch = &enc.batch;
        if let Head::Lm = self.head {
            return Ok(match self.backbone.lm_loss_graph(g, batch, ctx, scale)? {
                Some(v) => v,
                None => g.constant(Tensor::scalar(S::zero())),
            });
        }
        let hidden = self.backbone.hidden(g, batch, ctx)?;
        match self.head {
            Head::Token(h) => h.loss(g, hidden, batch, scale),
            Head::Span(h) => {
                let scores = h.scores(g, hidden, batch);
                h.loss(g, scores, &enc.gold, scale)
            }
            _ => {
                let logits = self.logits_from_hidden(g, hidden, enc)?;
                let labels = batch
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("batch has no labels".into()))?;
                let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
                Ok(g.cross_entropy(logits, &targets, scale))
            }
        }
    }

    fn logits_from_hidden<'g>(&'g self, g: &Graph<'g, S>, hidden: Var, enc: &Encoded) -> Result<Var> {
        let batch = &enc.batch;
        match self.head {
            Head::Cls(h) => Ok(h.logits(g, hidden, batch)),
            Head::Choice(h) => h.logits(g, hidden, batch, enc.num_choices),
            Head::Prompt => {
                let pos = batch
                    .mask_positions
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("prompt batch has no mask positions".into()))?;
                let rows: Vec<usize> = pos.iter().enumerate().map(|(b, &p)| b * batch.seq_len + p).collect();
                let vocab = self.backbone.lm_logits(g, g.gather_rows(hidden, &rows));
                let t = self.encoder.template.as_ref().expect("prompt task has a template");
                Ok(t.verbalizer.class_logits(g, vocab))
            }
            _ => Err(Error::Unsupported(format!("{} has no class logits", self.task_type()))),
        }
    }

    /// Class logits `[rows, C]` for classification-style tasks.
    pub fn class_logits(&self, enc: &Encoded, ctx: &mut ForwardCtx) -> Result<Tensor<S>> {
        let g = Graph::new(self.backbone.params());
        let hidden = self.backbone.hidden(&g, &enc.batch, ctx)?;
        let logits = self.logits_from_hidden(&g, hidden, enc)?;
        let out = g.value(logits).clone();
        Ok(out)
    }

    /// Row-wise softmax of [`Self::class_logits`].
    pub fn class_probs(&self, enc: &Encoded, ctx: &mut ForwardCtx) -> Result<Tensor<S>> {
        let mut logits = self.class_logits(enc, ctx)?;
        let c = logits.cols();
        for row in logits.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(logits)
    }

    /// Class probabilities for examples, evaluated in chunks.
    pub fn predict_probs(&self, examples: &[Example], ctx: &mut ForwardCtx) -> Result<Vec<Vec<S>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.eval_batch_size.max(1)) {
            let p = self.class_probs(&self.encode(chunk)?, ctx)?;
            out.extend((0..p.rows()).map(|r| p.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn predict_labels(&self, examples: &[Example]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.eval_batch_size.max(1)) {
            let l = self.class_logits(&self.encode(chunk)?, &mut ForwardCtx::eval())?;
            out.extend((0..l.rows()).map(|r| argmax(l.row(r))));
        }
        Ok(out)
    }

    /// Span scores `[B, T, L, L]` for an encoded span batch.
    pub fn span_scores(&self, enc: &Encoded, ctx: &mut ForwardCtx) -> Result<Tensor<S>> {
        let Head::Span(h) = self.head else {
            return Err(Error::Unsupported(format!("{} does not score spans", self.task_type())));
        };
        let g = Graph::new(self.backbone.params());
        let hidden = self.backbone.hidden(&g, &enc.batch, ctx)?;
        let s = h.scores(&g, hidden, &enc.batch);
        let out = g.value(s).clone();
        Ok(out)
    }

    /// Predicted spans in source characters for span tasks, sorted by
    /// `(start, end, type)`. Cells outside the text region are dropped.
    pub fn predict_spans(&self, examples: &[Example]) -> Result<Vec<Vec<CharSpan>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.eval_batch_size.max(1)) {
            let enc = self.encode(chunk)?;
            match self.head {
                Head::Span(h) => {
                    let scores = self.span_scores(&enc, &mut ForwardCtx::eval())?;
                    let [b, t, l, _] = *scores.shape() else { unreachable!("span scores are rank 4") };
                    let per = t * l * l;
                    for row in 0..b {
                        let plane = Tensor::from_vec(&[t, l, l], scores.data()[row * per..(row + 1) * per].to_vec())?;
                        let mut spans: Vec<CharSpan> = decode_spans(&plane, S::of(h.threshold))
                            .into_iter()
                            .filter_map(|p| {
                                let (start, end) = enc.offsets[row].to_chars(p.start, p.end)?;
                                Some(CharSpan { type_id: p.type_id, start, end, score: p.score.as_f64() })
                            })
                            .collect();
                        spans.sort_by(|a, b| (a.start, a.end, a.type_id).cmp(&(b.start, b.end, b.type_id)));
                        out.push(spans);
                    }
                }
                Head::Token(_) => {
                    let g = Graph::new(self.backbone.params());
                    let hidden = self.backbone.hidden(&g, &enc.batch, &mut ForwardCtx::eval())?;
                    let Head::Token(h) = self.head else { unreachable!() };
                    let logits = g.value(h.logits(&g, hidden)).clone();
                    let tags = self.encoder.tags.as_ref().expect("tags");
                    let l = enc.batch.seq_len;
                    for row in 0..enc.batch.batch_size {
                        let n = enc.batch.row_len(row);
                        // skip BOS and EOS
                        let seq: Vec<usize> = (1..n.saturating_sub(1)).map(|i| argmax(logits.row(row * l + i))).collect();
                        let spans = bio_to_spans(&seq, tags)
                            .into_iter()
                            .filter_map(|(kind, s, e)| {
                                let (start, end) = enc.offsets[row].to_chars(s + 1, e + 1)?;
                                Some(CharSpan { type_id: self.encoder.labels.id(&kind).ok()?, start, end, score: 1.0 })
                            })
                            .collect();
                        out.push(spans);
                    }
                }
                _ => return Err(Error::Unsupported(format!("{} does not predict spans", self.task_type()))),
            }
        }
        Ok(out)
    }

    /// Greedy continuation of each example's `text_a`.
    pub fn generate_texts(&self, examples: &[Example]) -> Result<Vec<String>> {
        let tok = self.backbone.tokenizer();
        examples
            .iter()
            .map(|e| {
                let mut prefix = vec![BOS];
                prefix.extend(tok.encode_words(&e.text_a));
                let out = self.backbone.generate(&prefix, self.spec().max_new_tokens)?;
                Ok(tok.decode(&out[prefix.len()..]))
            })
            .collect()
    }
}

/// Scores `model` on labelled examples with the metrics that fit `task`.
pub fn evaluate<S: Scalar>(model: &TaskModel<S>, examples: &[Example], task: TaskType) -> Result<MetricReport> {
    if task != model.task_type() {
        return Err(Error::InvalidArgument(format!("cannot score a {} model as {task}", model.task_type())));
    }
    let mut report = MetricReport::default();
    match task {
        TaskType::HeadCls | TaskType::MaskedPromptCls | TaskType::Multichoice => {
            let gold: Vec<usize> = match task {
                TaskType::Multichoice => {
                    let enc = model.encode(examples)?;
                    enc.batch.labels.ok_or_else(|| Error::InvalidArgument("evaluation needs labels".into()))?
                }
                _ => examples
                    .iter()
                    .map(|e| match &e.label {
                        Some(l) => model.labels().id(l),
                        None => Err(Error::InvalidArgument(format!("example {:?} has no label", e.id))),
                    })
                    .collect::<Result<_>>()?,
            };
            let pred = model.predict_labels(examples)?;
            report.accuracy = Some(accuracy(&pred, &gold));
            if task != TaskType::Multichoice {
                let c = model.labels().len();
                report.macro_f1 = Some(macro_f1(&pred, &gold, c));
                if c == 2 {
                    report.matthews = Some(matthews(&pred, &gold));
                }
            }
        }
        TaskType::TokenCls | TaskType::GlobalPointer => {
            let pred = model.predict_spans(examples)?;
            let instruction = model.spec().instruction.is_some();
            let mut p = Vec::new();
            let mut g = Vec::new();
            for (i, (e, spans)) in examples.iter().zip(&pred).enumerate() {
                let wanted = if instruction { e.text_b.as_deref() } else { None };
                for s in e.spans.iter().flatten().filter(|s| wanted.map_or(true, |w| s.kind == w)) {
                    g.push((i, s.kind.clone(), s.start, s.end));
                }
                for s in spans {
                    let kind = match wanted {
                        Some(w) => w.to_string(),
                        None => model.labels().name(s.type_id).unwrap_or("?").to_string(),
                    };
                    p.push((i, kind, s.start, s.end));
                }
            }
            report.span_f1 = Some(span_f1(&p, &g));
        }
        TaskType::ClmGeneration => {
            let gold: Vec<String> = examples.iter().map(|e| e.label.clone().unwrap_or_default()).collect();
            report.exact_match = Some(exact_match(&model.generate_texts(examples)?, &gold));
        }
    }
    Ok(report)
}
