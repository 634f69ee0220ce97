use serde::{Deserialize, Serialize};

use crate::backbone::ForwardCtx;
use crate::error::{Error, Result};
use crate::processors::Example;
use crate::scalar::Scalar;
use crate::training::TaskModel;

pub const DEFAULT_CONTENT_FREE_INPUTS: [&str; 3] = ["", "[MASK]", "N/A"];

const PRIOR_FLOOR: f64 = 1e-6;

/// Class prior the model assigns to inputs without content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub p_cf: Vec<f64>,
}

impl CalibrationState {
    /// Floors every entry at 1e-6 and renormalizes.
    pub fn new(prior: &[f64]) -> Result<Self> {
        if prior.is_empty() || prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("content-free prior must be a non-empty non-negative vector".into()));
        }
        let floored: Vec<f64> = prior.iter().map(|&p| p.max(PRIOR_FLOOR)).collect();
        let s: f64 = floored.iter().sum();
        if (s - 1.0).abs() <= SUM_TOLERANCE {
            return Ok(Self { p_cf: floored });
        }
        Ok(Self { p_cf: floored.into_iter().map(|p| p / s).collect() })
    }
}

/// Mean class distribution over `inputs`, each wrapped in the model's template.
pub fn estimate_content_free_prior<S: Scalar>(model: &TaskModel<S>, inputs: &[&str]) -> Result<CalibrationState> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("at least one content-free input is required".into()));
    }
    let examples: Vec<Example> = inputs.iter().enumerate().map(|(i, t)| Example::new(format!("cf{i}"), *t)).collect();
    let probs = model.predict_probs(&examples, &mut ForwardCtx::eval())?;
    let c = probs[0].len();
    let mut mean = vec![0.0; c];
    for row in &probs {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x.as_f64() / probs.len() as f64;
        }
    }
    CalibrationState::new(&mean)
}

/// Divides by the prior and renormalizes. A uniform prior returns `probs`
/// bit for bit, and vectors already summing to one within rounding are not
/// rescaled.
pub fn calibrate(probs: &[f64], state: &CalibrationState) -> Result<Vec<f64>> {
    if probs.len() != state.p_cf.len() {
        return Err(Error::Shape(format!("{} probabilities for a {}-class prior", probs.len(), state.p_cf.len())));
    }
    let uniform = state.p_cf.windows(2).all(|w| w[0] == w[1]);
    let w: Vec<f64> = if uniform { probs.to_vec() } else { probs.iter().zip(&state.p_cf).map(|(p, q)| p / q).collect() };
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() <= SUM_TOLERANCE {
        return Ok(w);
    }
    Ok(w.into_iter().map(|x| x / s).collect())
}

const SUM_TOLERANCE: f64 = 1e-12;
