use serde::{Deserialize, Serialize};

use crate::backbone::ForwardCtx;
use crate::error::{Error, Result};
use crate::processors::Example;
use crate::scalar::Scalar;
use crate::training::TaskModel;

/// Per-example predictive uncertainty from repeated stochastic passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// `[N][C]`, the mean of the per-pass class distributions.
    pub mean_probs: Vec<Vec<f64>>,
    pub predictive_entropy: Vec<f64>,
    pub expected_entropy: Vec<f64>,
    /// Mutual information: predictive minus expected entropy.
    pub bald: Vec<f64>,
    pub passes: usize,
    /// Set when a single pass made `bald` meaningless (it is reported as 0).
    pub single_pass: bool,
}

impl UncertaintyReport {
    pub fn len(&self) -> usize {
        self.mean_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_probs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.mean_probs.first().map_or(0, Vec::len)
    }

    /// Argmax of the mean distribution; ties go to the lower class.
    pub fn predicted(&self, i: usize) -> usize {
        crate::backbone::argmax(&self.mean_probs[i])
    }
}

/// Shannon entropy in nats; `0 · log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Aggregates `passes[t][i][c]` in pass order.
pub fn uncertainty_from_passes(passes: &[Vec<Vec<f64>>]) -> Result<UncertaintyReport> {
    let t = passes.len();
    if t == 0 {
        return Err(Error::InvalidArgument("at least one pass is required".into()));
    }
    let n = passes[0].len();
    if passes.iter().any(|p| p.len() != n) {
        return Err(Error::Shape("passes disagree on the number of examples".into()));
    }
    let mut report = UncertaintyReport {
        mean_probs: Vec::with_capacity(n),
        predictive_entropy: Vec::with_capacity(n),
        expected_entropy: Vec::with_capacity(n),
        bald: Vec::with_capacity(n),
        passes: t,
        single_pass: t == 1,
    };
    for i in 0..n {
        let c = passes[0][i].len();
        if passes.iter().any(|p| p[i].len() != c) {
            return Err(Error::Shape(format!("passes disagree on the class count of example {i}")));
        }
        let mut mean = vec![0.0; c];
        for p in passes {
            for (m, &x) in mean.iter_mut().zip(&p[i]) {
                *m += x;
            }
        }
        let sum: f64 = mean.iter().sum();
        mean.iter_mut().for_each(|m| *m /= sum);
        let expected = passes.iter().map(|p| entropy(&p[i])).sum::<f64>() / t as f64;
        let predictive = entropy(&mean);
        let agree = passes.iter().all(|p| p[i] == passes[0][i]);
        report.bald.push(if agree { 0.0 } else { predictive - expected });
        report.predictive_entropy.push(if agree { expected } else { predictive });
        report.expected_entropy.push(expected);
        report.mean_probs.push(mean);
    }
    if t == 1 {
        log::warn!("a single stochastic pass carries no model uncertainty; bald is reported as 0");
    }
    Ok(report)
}

/// `passes` forward passes with dropout active at inference; pass `t` uses
/// its own stream of `seed`. Passes run on separate threads and are reduced
/// in pass order.
pub fn mc_dropout_predict<S: Scalar>(
    model: &TaskModel<S>,
    examples: &[Example],
    passes: usize,
    seed: u64,
) -> Result<UncertaintyReport> {
    if passes == 0 {
        return Err(Error::InvalidArgument("mc dropout needs at least one pass".into()));
    }
    let per_pass: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..passes)
            .map(|t| {
                scope.spawn(move || {
                    let mut ctx = ForwardCtx::mc_inference(seed, t as u64);
                    let probs = model.predict_probs(examples, &mut ctx)?;
                    Ok(probs.into_iter().map(|r| r.into_iter().map(Scalar::as_f64).collect()).collect())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("mc pass panicked")).collect()
    });
    let per_pass = per_pass.into_iter().collect::<Result<Vec<_>>>()?;
    uncertainty_from_passes(&per_pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_opposite_passes() {
        let r = uncertainty_from_passes(&[vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]).unwrap();
        assert_eq!(r.mean_probs[0], vec![0.5, 0.5]);
        assert!((r.predictive_entropy[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(r.expected_entropy[0], 0.0);
        assert!((r.bald[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn identical_passes_have_zero_bald() {
        let p = vec![vec![0.3, 0.3, 0.4], vec![0.1, 0.7, 0.2]];
        let r = uncertainty_from_passes(&vec![p.clone(); 10]).unwrap();
        assert!(r.bald.iter().all(|&b| b == 0.0));
        let one = uncertainty_from_passes(&[p]).unwrap();
        assert!(one.single_pass && one.bald.iter().all(|&b| b == 0.0));
        assert!(uncertainty_from_passes(&[]).is_err());
    }

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-12;
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn bald_is_nonnegative(passes in (2usize..6, 2usize..5).prop_flat_map(|(t, c)| proptest::collection::vec(simplex(c).prop_map(|p| vec![p]), t))) {
            let r = uncertainty_from_passes(&passes).unwrap();
            prop_assert!(r.bald[0] >= -1e-9);
            prop_assert!((r.mean_probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
