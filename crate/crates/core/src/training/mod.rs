//! Trainer loop, metrics, experiment tracking and the command-line runner.

mod cli;
mod config;
mod metrics;
mod optim;
mod pretrain;
mod task;
mod trainer;
mod tracking;

pub use cli::run_cli;
pub use config::{
    build_model, load_splits, parse_plan, parse_user_defined, sample_k_shot, task_spec, train, train_on, RunConfig,
    RunOutcome, UserDefined,
};
pub use metrics::{accuracy, bio_to_spans, exact_match, macro_f1, matthews, span_f1, MetricReport};
pub use optim::{clip_grad_norm, linear_schedule, AdamW};
pub use pretrain::pretrain_lm;
pub use task::{evaluate, CharSpan, Encoded, TaskEncoder, TaskModel, TaskSpec, TaskType};
pub use trainer::{fit, BestMetric, EvalStrategy, FitOutcome, TrainOptions};
pub use tracking::{metric_curves, read_events, render_report, EventKind, EventValue, Tracker, TrackingEvent};

/// Cloze pattern used by `masked_prompt_cls` unless one is configured.
pub const DEFAULT_TEMPLATE: &str = "{text} It was {mask}.";
