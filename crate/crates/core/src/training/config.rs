use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::metrics::MetricReport;
use super::task::{evaluate, TaskModel, TaskSpec, TaskType};
use super::tracking::Tracker;
use super::trainer::{fit, EvalStrategy, FitOutcome, TrainOptions};
use crate::backbone::{Architecture, Backbone, ModelConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::peft::{apply_plan, freeze_backbone, TuningPlan};
use crate::processors::{choices, load_dataset, Example, InstructionSchema, LabelSet};
use crate::scalar::Scalar;

/// `key=value` pairs from `--user_defined="a=1,b=2"`, in given order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserDefined(pub Vec<(String, String)>);

impl std::fmt::Display for UserDefined {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let pairs: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&pairs.join(","))
    }
}

impl Serialize for UserDefined {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        s.collect_str(self)
    }
}

impl UserDefined {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("user_defined {key}={v:?} is not valid"))))
            .transpose()
    }
}

pub fn parse_user_defined(s: &str) -> std::result::Result<UserDefined, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got {part:?}"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("empty key in {part:?}"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(UserDefined(out))
}

/// One training run. Each field is a command-line flag of the same name.
#[derive(Args, Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    /// Checkpoint directory or preset (toy-tiny, toy-small, toy-base).
    #[arg(long = "model_name_or_path", required = true)]
    pub model_name_or_path: String,
    /// Directory with train/dev/test files, or a registered dataset prefix.
    #[arg(long = "data_dir", required = true)]
    pub data_dir: String,
    #[arg(long = "output_dir", required = true)]
    pub output_dir: PathBuf,
    #[arg(long = "seed", default_value_t = 42)]
    pub seed: u64,
    #[arg(long = "max_seq_length", default_value_t = 128)]
    pub max_seq_length: usize,
    #[arg(long = "max_eval_seq_length", default_value_t = 128)]
    pub max_eval_seq_length: usize,
    #[arg(long = "do_train")]
    pub do_train: bool,
    #[arg(long = "do_eval")]
    pub do_eval: bool,
    #[arg(long = "per_device_train_batch_size", default_value_t = 8)]
    pub per_device_train_batch_size: usize,
    #[arg(long = "per_device_eval_batch_size", default_value_t = 8)]
    pub per_device_eval_batch_size: usize,
    #[arg(long = "gradient_accumulation_steps", default_value_t = 1)]
    pub gradient_accumulation_steps: usize,
    #[arg(long = "learning_rate", default_value_t = 5e-5)]
    pub learning_rate: f64,
    #[arg(long = "num_train_epochs", default_value_t = 3.0)]
    pub num_train_epochs: f64,
    #[arg(long = "evaluation_strategy", value_enum, default_value_t = EvalStrategy::Epoch)]
    pub evaluation_strategy: EvalStrategy,
    #[arg(long = "task_name", default_value = "default")]
    pub task_name: String,
    #[arg(long = "task_type", default_value = "head_cls")]
    pub task_type: String,
    #[arg(long = "model_type", default_value = "bert")]
    pub model_type: String,
    /// Comma-separated key=value pairs.
    #[arg(long = "user_defined", value_parser = parse_user_defined, default_value = "")]
    pub user_defined: UserDefined,
    /// Directory receiving `run-<id>.jsonl`.
    #[arg(long = "tracking_uri")]
    pub tracking_uri: Option<PathBuf>,
    /// Freeze every backbone tensor; only the task head trains.
    #[arg(long = "use_freezing")]
    pub use_freezing: bool,
}

impl RunConfig {
    pub fn new(model_name_or_path: impl Into<String>, data_dir: impl Into<String>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            model_name_or_path: model_name_or_path.into(),
            data_dir: data_dir.into(),
            output_dir: output_dir.into(),
            seed: 42,
            max_seq_length: 128,
            max_eval_seq_length: 128,
            do_train: true,
            do_eval: true,
            per_device_train_batch_size: 8,
            per_device_eval_batch_size: 8,
            gradient_accumulation_steps: 1,
            learning_rate: 5e-5,
            num_train_epochs: 3.0,
            evaluation_strategy: EvalStrategy::Epoch,
            task_name: "default".into(),
            task_type: "head_cls".into(),
            model_type: "bert".into(),
            user_defined: UserDefined::default(),
            tracking_uri: None,
            use_freezing: false,
        }
    }

    pub fn task(&self) -> Result<TaskType> {
        self.task_type.parse()
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        let ud = &self.user_defined;
        let defaults = TrainOptions::default();
        Ok(TrainOptions {
            learning_rate: self.learning_rate,
            num_train_epochs: self.num_train_epochs,
            batch_size: self.per_device_train_batch_size,
            gradient_accumulation_steps: self.gradient_accumulation_steps,
            evaluation_strategy: self.evaluation_strategy,
            eval_steps: ud.parse_as("eval_steps")?,
            eval_max_len: Some(self.max_eval_seq_length),
            seed: self.seed,
            weight_decay: ud.parse_as("weight_decay")?.unwrap_or(defaults.weight_decay),
            warmup_ratio: ud.parse_as("warmup_ratio")?.unwrap_or(defaults.warmup_ratio),
            max_grad_norm: match ud.get("max_grad_norm") {
                Some("none") => None,
                Some(_) => ud.parse_as("max_grad_norm")?,
                None => defaults.max_grad_norm,
            },
            shuffle: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.task()?;
        let positive = [
            ("max_seq_length", self.max_seq_length),
            ("max_eval_seq_length", self.max_eval_seq_length),
            ("per_device_train_batch_size", self.per_device_train_batch_size),
            ("per_device_eval_batch_size", self.per_device_eval_batch_size),
            ("gradient_accumulation_steps", self.gradient_accumulation_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.num_train_epochs >= 0.0) {
            return Err(Error::Config("num_train_epochs must be non-negative".into()));
        }
        Ok(())
    }

    fn architecture(&self) -> Result<Architecture> {
        match self.model_type.as_str() {
            "bert" | "roberta" | "encoder" => Ok(Architecture::Encoder),
            "gpt2" | "gpt" | "decoder" => Ok(Architecture::Decoder),
            other => Err(Error::Config(format!("unknown model_type {other:?} (bert, roberta, gpt2)"))),
        }
    }
}

/// Train and evaluation examples named by `data_dir`: files
/// `train.{jsonl,tsv}` and `dev`/`test` inside a directory, or the
/// registered `<prefix>/train` and `<prefix>/test` sets.
pub fn load_splits(data_dir: &str) -> Result<(Vec<Example>, Vec<Example>)> {
    let dir = Path::new(data_dir);
    if dir.is_dir() {
        let find = |stems: &[&str]| -> Option<PathBuf> {
            stems.iter().flat_map(|s| ["jsonl", "tsv"].map(|e| dir.join(format!("{s}.{e}")))).find(|p| p.is_file())
        };
        let train = find(&["train"]).ok_or_else(|| Error::Config(format!("no train.jsonl or train.tsv in {data_dir}")))?;
        let train = load_dataset(&train.to_string_lossy())?;
        let eval = match find(&["dev", "test"]) {
            Some(p) => load_dataset(&p.to_string_lossy())?,
            None => Vec::new(),
        };
        return Ok((train, eval));
    }
    Ok((load_dataset(&format!("{data_dir}/train"))?, load_dataset(&format!("{data_dir}/test"))?))
}

/// `k` examples per label, drawn with `seed`, in original order.
pub fn sample_k_shot(examples: &[Example], k: usize, seed: u64) -> Vec<Example> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_label.entry(e.label.as_deref().unwrap_or("")).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = by_label
        .into_values()
        .flat_map(|mut idx| {
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx
        })
        .collect();
    keep.sort();
    keep.into_iter().map(|i| examples[i].clone()).collect()
}

/// Parses `lora:<r>:<alpha>`, `adapter:<m>`, `prefix:<p>`, `bitfit`, `full`.
pub fn parse_plan(s: &str) -> Result<TuningPlan> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize| -> Result<usize> {
        parts.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Config(format!("bad peft spec {s:?}")))
    };
    Ok(match parts[0] {
        "full" => TuningPlan::Full,
        "freeze" => TuningPlan::FreezeBackbone,
        "bitfit" => TuningPlan::BitFit,
        "lora" => {
            let rank = num(1)?;
            let alpha = parts.get(2).and_then(|a| a.parse().ok()).unwrap_or(rank as f64);
            TuningPlan::Lora { rank, alpha }
        }
        "adapter" => TuningPlan::Adapter { bottleneck: num(1)? },
        "prefix" => TuningPlan::Prefix { prefix_len: num(1)? },
        other => return Err(Error::Config(format!("unknown peft method {other:?}"))),
    })
}

/// `neg:terrible|bad,pos:great` → words per label in `labels` order.
fn parse_label_words(s: &str, labels: &LabelSet) -> Result<Vec<Vec<String>>> {
    let mut out = vec![Vec::new(); labels.len()];
    for part in s.split([',', ';']).filter(|p| !p.trim().is_empty()) {
        let (label, words) =
            part.split_once(':').ok_or_else(|| Error::Config(format!("label_words entry {part:?} needs label:words")))?;
        out[labels.id(label.trim())?] = words.split('|').map(|w| w.trim().to_string()).collect();
    }
    Ok(out)
}

/// Task spec derived from the run flags and the data.
pub fn task_spec(cfg: &RunConfig, train: &[Example], eval: &[Example]) -> Result<TaskSpec> {
    let task = cfg.task()?;
    let all: Vec<Example> = train.iter().chain(eval).cloned().collect();
    let labels = match task {
        TaskType::HeadCls | TaskType::MaskedPromptCls => LabelSet::from_examples(&all),
        TaskType::TokenCls | TaskType::GlobalPointer => LabelSet::from_span_types(&all),
        TaskType::Multichoice | TaskType::ClmGeneration => LabelSet::new(Vec::<String>::new()),
    };
    let ud = &cfg.user_defined;
    let mut spec = TaskSpec::new(task, labels.labels().to_vec(), cfg.max_seq_length);
    if task == TaskType::MaskedPromptCls {
        spec.template = Some(ud.get("template").unwrap_or(super::DEFAULT_TEMPLATE).to_string());
        if let Some(w) = ud.get("label_words") {
            spec.label_words = Some(parse_label_words(w, &labels)?);
        }
    }
    if let Some(h) = ud.parse_as("head_dim")? {
        spec.head_dim = h;
    }
    if let Some(t) = ud.parse_as("threshold")? {
        spec.threshold = t;
    }
    if let Some(p) = ud.get("instruction") {
        spec.instruction = Some(InstructionSchema::extractive(p)?);
    }
    if let Some(m) = ud.parse_as("max_new_tokens")? {
        spec.max_new_tokens = m;
    }
    Ok(spec)
}

/// Words the vocabulary must contain besides the training text.
fn spec_text(spec: &TaskSpec) -> Vec<String> {
    let mut out: Vec<String> = spec.labels.clone();
    out.extend(spec.template.clone());
    out.extend(spec.label_words.iter().flatten().flatten().cloned());
    out.extend(spec.instruction.as_ref().map(|s| s.pattern.replace("{text}", "").replace("{type}", "")));
    out
}

/// Fresh or loaded backbone with the task head attached and the tuning plan
/// applied.
pub fn build_model<S: Scalar>(cfg: &RunConfig, spec: TaskSpec, train: &[Example]) -> Result<TaskModel<S>> {
    let ud = &cfg.user_defined;
    let path = Path::new(&cfg.model_name_or_path);
    let mut model = if path.is_dir() {
        if path.join("task.json").is_file() && ud.get("fresh_head") != Some("true") {
            let mut m = TaskModel::<S>::load(path)?;
            if m.task_type() != spec.task_type {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} model, run asks for {}",
                    m.task_type(),
                    spec.task_type
                )));
            }
            m.encoder.spec.max_len = spec.max_len.min(m.backbone.config().max_seq_len);
            m
        } else {
            let mut backbone = Backbone::<S>::load(path)?;
            strip_heads(&mut backbone);
            TaskModel::new(backbone, spec, cfg.seed)?
        }
    } else {
        let mut config = ModelConfig::preset(&cfg.model_name_or_path).ok_or_else(|| {
            Error::Config(format!(
                "model_name_or_path {:?} is neither a checkpoint directory nor a preset (toy-tiny, toy-small, toy-base)",
                cfg.model_name_or_path
            ))
        })?;
        config.architecture = cfg.architecture()?;
        config.seed = cfg.seed;
        config.max_seq_len = config.max_seq_len.max(cfg.max_seq_length).max(cfg.max_eval_seq_length);
        if let Some(p) = ud.parse_as("dropout")? {
            config.dropout_p = p;
        }
        for (key, slot) in [("hidden_size", &mut config.hidden_size), ("num_layers", &mut config.num_layers), ("num_heads", &mut config.num_heads)] {
            if let Some(v) = ud.parse_as(key)? {
                *slot = v;
            }
        }
        let mut corpus: Vec<String> = train
            .iter()
            .flat_map(|e| std::iter::once(e.text_a.clone()).chain(e.text_b.clone()).chain(e.label.clone()))
            .collect();
        corpus.extend(spec_text(&spec));
        let tokenizer = Tokenizer::build(&corpus, ud.parse_as("vocab_size")?.unwrap_or(5000))?;
        TaskModel::new(Backbone::<S>::new(config, tokenizer)?, spec, cfg.seed)?
    };
    if let Some(p) = ud.get("peft") {
        apply_plan(&mut model.backbone, &parse_plan(p)?)?;
    }
    if cfg.use_freezing {
        freeze_backbone(&mut model.backbone)?;
    }
    model.eval_batch_size = cfg.per_device_eval_batch_size;
    Ok(model)
}

/// Drops head tensors a pretrained checkpoint may carry from another task.
fn strip_heads<S: Scalar>(backbone: &mut Backbone<S>) {
    let heads: Vec<_> = backbone
        .params()
        .iter()
        .filter(|(_, p)| p.group == crate::params::ParamGroup::Head)
        .map(|(id, _)| id)
        .collect();
    for id in heads {
        backbone.params_mut().remove(id);
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome<S: Scalar> {
    pub model: TaskModel<S>,
    pub fit: FitOutcome,
    /// Evaluation of the saved (best) model when `do_eval` is set.
    pub report: Option<MetricReport>,
    pub run_id: Option<String>,
}

/// Loads data per `cfg.data_dir` and runs [`train_on`].
pub fn train<S: Scalar>(cfg: &RunConfig) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let (mut train, eval) = load_splits(&cfg.data_dir)?;
    if let Some(k) = cfg.user_defined.parse_as::<usize>("k")? {
        train = sample_k_shot(&train, k, cfg.seed);
    }
    train_on(cfg, &train, &eval)
}

/// The full run on given data: build, train, keep the best checkpoint in
/// `output_dir`, evaluate it, and track everything.
pub fn train_on<S: Scalar>(cfg: &RunConfig, train: &[Example], eval: &[Example]) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let mut tracker = cfg.tracking_uri.as_deref().map(|u| Tracker::create(u, None)).transpose()?;
    let spec = task_spec(cfg, train, eval)?;
    if spec.task_type == TaskType::Multichoice {
        if let Some(e) = train.iter().find(|e| choices(e).len() < 2) {
            return Err(Error::InvalidArgument(format!("multiple-choice example {:?} lists fewer than 2 choices", e.id)));
        }
    }
    let mut model = build_model::<S>(cfg, spec, train)?;
    if let Some(t) = tracker.as_mut() {
        let flags = serde_json::to_value(cfg)?;
        for (k, v) in flags.as_object().into_iter().flatten() {
            let v = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            t.param(0, k, v)?;
        }
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let eval_set = (!eval.is_empty()).then_some(eval);
    let opts = cfg.train_options()?;
    let fit_out = if cfg.do_train {
        fit(&mut model, train, eval_set, &opts, tracker.as_mut(), Some(&cfg.output_dir))?
    } else {
        FitOutcome::default()
    };
    let mut report = None;
    if cfg.do_eval {
        if eval.is_empty() {
            return Err(Error::Config("do_eval needs a dev or test split".into()));
        }
        if cfg.output_dir.join("task.json").is_file() && cfg.do_train {
            let best = TaskModel::<S>::load(&cfg.output_dir)?;
            model.backbone = best.backbone;
        }
        let mut m = model.clone();
        m.encoder.spec.max_len = cfg.max_eval_seq_length.min(m.backbone.config().max_seq_len);
        let r = evaluate(&m, eval, m.task_type())?;
        let step = fit_out.steps as u64;
        if let Some(t) = tracker.as_mut() {
            for (k, v) in r.entries() {
                t.metric(step, &format!("final_{k}"), v)?;
            }
        }
        let path = cfg.output_dir.join("metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&r)?).map_err(|e| Error::io(&path, e))?;
        report = Some(r);
    }
    Ok(RunOutcome { model, fit: fit_out, report, run_id: tracker.map(|t| t.run_id().to_string()) })
}
