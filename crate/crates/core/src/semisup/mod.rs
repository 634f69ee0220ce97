//! Low-resource learning: MC-dropout uncertainty, confident pseudo-label
//! selection, self-training and content-free calibration.

mod calibration;
mod select;
mod selftrain;
mod uncertainty;

pub use calibration::{calibrate, estimate_content_free_prior, CalibrationState, DEFAULT_CONTENT_FREE_INPUTS};
pub use select::{select_confident, select_confident_balanced, Selected, SelectionRule};
pub use selftrain::{self_train, RoundReport, SelfTrainConfig, SelfTrainOutcome};
pub use uncertainty::{entropy, mc_dropout_predict, uncertainty_from_passes, UncertaintyReport};
