//! Instruction-driven span extraction: multi-dataset training, an extraction
//! API, a command line and a small JSON-over-HTTP service.

mod cli;
mod extract;
mod pretrain;
mod service;

pub use cli::run_hugie_cli;
pub use extract::{check_window, ensure_instruction_model, extract, ExtractedSpan, ExtractionRequest, ExtractionResult, SpanScorer};
pub use pretrain::{dataset_types, instruction_examples, pretrain_hugie};
pub use service::{respond, serve, HealthInfo, ServiceHandle};

use crate::scalar::Scalar;
use crate::training::TaskModel;

/// Health summary of a loaded extraction model.
pub fn health_info<S: Scalar>(model: &TaskModel<S>) -> HealthInfo {
    let c = model.backbone.config();
    HealthInfo { status: "ok".into(), vocab_size: c.vocab_size, d: c.hidden_size, types: model.labels().labels().to_vec() }
}
