use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use super::optim::{clip_grad_norm, linear_schedule, AdamW};
use super::task::{evaluate, Encoded, TaskModel};
use super::tracking::{EventKind, Tracker};
use crate::autograd::Graph;
use crate::backbone::ForwardCtx;
use crate::error::{Error, Result};
use crate::params::Gradients;
use crate::processors::Example;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalStrategy {
    Steps,
    Epoch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub num_train_epochs: f64,
    pub batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub evaluation_strategy: EvalStrategy,
    /// Updates between evaluations under `Steps`; one epoch when unset.
    pub eval_steps: Option<usize>,
    /// Encoder length used during evaluation, when different.
    pub eval_max_len: Option<usize>,
    pub seed: u64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            num_train_epochs: 3.0,
            batch_size: 8,
            gradient_accumulation_steps: 1,
            evaluation_strategy: EvalStrategy::Epoch,
            eval_steps: None,
            eval_max_len: None,
            seed: 42,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            max_grad_norm: Some(1.0),
            shuffle: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOutcome {
    pub steps: usize,
    /// `(step, primary metric)` of the best evaluation.
    pub best: Option<(usize, f64)>,
    pub evaluations: Vec<(usize, MetricReport)>,
    pub losses: Vec<f64>,
}

/// Written next to the best checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetric {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// Micro-batch index lists grouped into optimizer updates.
fn plan_updates(n: usize, opts: &TrainOptions) -> Vec<(usize, Vec<Vec<usize>>)> {
    if n == 0 || opts.num_train_epochs <= 0.0 {
        return Vec::new();
    }
    let bs = opts.batch_size.max(1);
    let accum = opts.gradient_accumulation_steps.max(1);
    let per_epoch = n.div_ceil(bs).div_ceil(accum);
    let total = ((opts.num_train_epochs * per_epoch as f64).round() as usize).max(1);
    let mut updates = Vec::with_capacity(total);
    let mut epoch = 0;
    while updates.len() < total {
        let mut order: Vec<usize> = (0..n).collect();
        if opts.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
        }
        let micro: Vec<Vec<usize>> = order.chunks(bs).map(<[usize]>::to_vec).collect();
        for group in micro.chunks(accum) {
            if updates.len() == total {
                break;
            }
            updates.push((epoch, group.to_vec()));
        }
        epoch += 1;
    }
    updates
}

fn evaluate_at<S: Scalar>(model: &mut TaskModel<S>, eval: &[Example], opts: &TrainOptions) -> Result<MetricReport> {
    let saved = model.encoder.spec.max_len;
    if let Some(l) = opts.eval_max_len {
        model.encoder.spec.max_len = l.min(model.backbone.config().max_seq_len);
    }
    let task = model.task_type();
    let report = evaluate(model, eval, task);
    model.encoder.spec.max_len = saved;
    report
}

/// Trains `model` in place. Evaluates on `eval` per the strategy and saves
/// the best checkpoint (by primary metric, first wins ties) to `best_dir`;
/// without an eval set the final model is saved there instead.
pub fn fit<S: Scalar>(
    model: &mut TaskModel<S>,
    train: &[Example],
    eval: Option<&[Example]>,
    opts: &TrainOptions,
    mut tracker: Option<&mut Tracker>,
    best_dir: Option<&Path>,
) -> Result<FitOutcome> {
    let updates = plan_updates(train.len(), opts);
    let total = updates.len();
    let per_epoch_last: Vec<bool> =
        (0..total).map(|i| i + 1 == total || updates[i + 1].0 != updates[i].0).collect();
    let eval_every = opts.eval_steps.unwrap_or_else(|| per_epoch_last.iter().position(|&b| b).map_or(1, |p| p + 1));
    let mut out = FitOutcome::default();
    let mut optimizer = AdamW::<S>::new(opts.weight_decay);

    if let Some(t) = tracker.as_deref_mut() {
        t.param(0, "total_updates", total as f64)?;
        t.param(0, "trainable_parameters", crate::peft::count_parameters(&model.backbone).trainable as f64)?;
    }

    let record_eval = |model: &mut TaskModel<S>, step: usize, out: &mut FitOutcome, tracker: &mut Option<&mut Tracker>| -> Result<()> {
        let Some(eval) = eval else { return Ok(()) };
        let report = evaluate_at(model, eval, opts)?;
        let (name, value) = report.primary();
        if let Some(t) = tracker.as_deref_mut() {
            for (k, v) in report.entries() {
                t.metric(step as u64, &format!("eval_{k}"), v)?;
            }
        }
        log::info!("step {step}: eval {name} = {value:.4}");
        if out.best.map_or(true, |(_, b)| value > b) {
            out.best = Some((step, value));
            if let Some(dir) = best_dir {
                model.save(dir)?;
                let best = BestMetric { step, metric: name.to_string(), value };
                let path = dir.join("best_metric.json");
                std::fs::write(&path, serde_json::to_string_pretty(&best)?).map_err(|e| Error::io(&path, e))?;
                if let Some(t) = tracker.as_deref_mut() {
                    t.log(step as u64, EventKind::Artifact, "best_checkpoint", dir.display().to_string())?;
                }
            }
        }
        out.evaluations.push((step, report));
        Ok(())
    };

    if total == 0 {
        record_eval(model, 0, &mut out, &mut tracker)?;
        if eval.is_none() {
            if let Some(dir) = best_dir {
                model.save(dir)?;
            }
        }
        return Ok(out);
    }

    let encoder = model.encoder.clone();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Encoded>>(4);
        let producer_updates = &updates;
        let enc_ref = &encoder;
        scope.spawn(move || {
            for (_, group) in producer_updates {
                for idx in group {
                    let examples: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
                    if tx.send(enc_ref.encode(&examples)).is_err() {
                        return;
                    }
                }
            }
        });

        for (u, (_, group)) in updates.iter().enumerate() {
            let step = u + 1;
            let batches = group.iter().map(|_| rx.recv().expect("producer alive")).collect::<Result<Vec<Encoded>>>()?;
            let n_targets: usize = batches.iter().map(|b| b.targets).sum();
            let scale = S::one() / S::of(n_targets.max(1) as f64);
            let mut grads = Gradients::new();
            let mut loss = 0.0;
            for (m, enc) in batches.iter().enumerate() {
                let mut ctx = ForwardCtx::train(opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((u * 64 + m) as u64));
                let g = Graph::new(model.backbone.params());
                let l = model.loss_graph(&g, enc, &mut ctx, scale)?;
                loss += g.value(l).data()[0].as_f64();
                grads.merge(g.backward(l));
            }
            if !loss.is_finite() {
                if let Some(t) = tracker.as_deref_mut() {
                    t.param(step as u64, "abort", format!("non-finite loss at step {step}"))?;
                }
                return Err(Error::NonFiniteLoss { step });
            }
            if let Some(max) = opts.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            let lr = linear_schedule(opts.learning_rate, step, total, opts.warmup_ratio);
            optimizer.step(model.backbone.params_mut(), &grads, lr);
            out.losses.push(loss);
            out.steps = step;
            if let Some(t) = tracker.as_deref_mut() {
                t.metric(step as u64, "train_loss", loss)?;
                t.metric(step as u64, "learning_rate", lr)?;
            }
            let due = match opts.evaluation_strategy {
                EvalStrategy::Epoch => per_epoch_last[u],
                EvalStrategy::Steps => step % eval_every.max(1) == 0 || step == total,
            };
            if due {
                record_eval(model, step, &mut out, &mut tracker)?;
            }
        }
        drop(rx);
        Ok(())
    })?;

    if eval.is_none() {
        if let Some(dir) = best_dir {
            model.save(dir)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_plan_counts() {
        let opts = TrainOptions { batch_size: 4, gradient_accumulation_steps: 2, num_train_epochs: 2.0, ..Default::default() };
        let plan = plan_updates(20, &opts);
        // 5 micro-batches -> 3 updates per epoch
        assert_eq!(plan.len(), 6);
        assert_eq!(plan[2].1.len(), 1);
        assert_eq!(plan.iter().filter(|p| p.0 == 1).count(), 3);
        let zero = TrainOptions { num_train_epochs: 0.0, ..Default::default() };
        assert!(plan_updates(20, &zero).is_empty());
        let half = TrainOptions { batch_size: 2, num_train_epochs: 0.5, ..Default::default() };
        assert_eq!(plan_updates(20, &half).len(), 5);
    }

    #[test]
    fn every_example_once_per_epoch() {
        let opts = TrainOptions { batch_size: 3, num_train_epochs: 1.0, ..Default::default() };
        let mut seen: Vec<usize> = plan_updates(10, &opts).into_iter().flat_map(|(_, g)| g.into_iter().flatten()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
