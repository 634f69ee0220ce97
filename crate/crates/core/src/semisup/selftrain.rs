use serde::{Deserialize, Serialize};

use super::select::{select_confident, select_confident_balanced, SelectionRule};
use super::uncertainty::mc_dropout_predict;
use crate::error::{Error, Result};
use crate::processors::Example;
use crate::scalar::Scalar;
use crate::training::{build_model, evaluate, fit, task_spec, MetricReport, RunConfig, TaskModel, Tracker};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub rounds: usize,
    /// Stochastic passes per uncertainty estimate.
    pub passes: usize,
    /// Pseudo-labels added per round; `32 · C` when unset.
    pub budget: Option<usize>,
    pub rule: SelectionRule,
    /// Take `ceil(k / C)` per predicted class instead of the global top `k`.
    pub balanced: bool,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self { rounds: 3, passes: 10, budget: None, rule: SelectionRule::LowestBald, balanced: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected_count: usize,
    pub mean_bald_selected: f64,
    /// Against the pool's hidden labels, when every selected example has one.
    pub pseudo_label_accuracy: Option<f64>,
    pub student: Option<MetricReport>,
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome<S: Scalar> {
    pub model: TaskModel<S>,
    /// Evaluation of the round-0 teacher.
    pub teacher: Option<MetricReport>,
    pub rounds: Vec<RoundReport>,
    pub stopped_early: bool,
}

/// Teacher on `labeled`, then per round: score the remaining pool with MC
/// dropout, pseudo-label the most certain examples, and retrain a student from
/// fresh initialization on `labeled` plus every pseudo-label so far. Labels
/// on `unlabeled` are never trained on; they only score pseudo-label quality.
pub fn self_train<S: Scalar>(
    labeled: &[Example],
    unlabeled: &[Example],
    eval: &[Example],
    cfg: &SelfTrainConfig,
    run: &RunConfig,
) -> Result<SelfTrainOutcome<S>> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::InvalidArgument("self-training needs labeled and unlabeled examples".into()));
    }
    if cfg.rounds > 0 && cfg.passes < 2 {
        return Err(Error::Config("uncertainty-based selection needs at least 2 passes".into()));
    }
    run.validate()?;
    let mut tracker = run.tracking_uri.as_deref().map(|u| Tracker::create(u, None)).transpose()?;
    let spec = task_spec(run, labeled, eval)?;
    if !spec.task_type.is_classification() {
        return Err(Error::Unsupported(format!("self-training needs a classification task, got {}", spec.task_type)));
    }
    let hidden = |e: &Example| Example { label: None, ..e.clone() };
    // One vocabulary for teacher and students.
    let vocab: Vec<Example> = labeled.iter().cloned().chain(unlabeled.iter().map(hidden)).collect();
    let opts = run.train_options()?;
    let budget = cfg.budget.unwrap_or(32 * spec.labels.len()).max(1);

    let train_one = |data: &[Example]| -> Result<(TaskModel<S>, Option<MetricReport>)> {
        let mut m = build_model::<S>(run, spec.clone(), &vocab)?;
        fit(&mut m, data, None, &opts, None, None)?;
        let report = if eval.is_empty() { None } else { Some(evaluate(&m, eval, m.task_type())?) };
        Ok((m, report))
    };

    let (mut model, teacher) = train_one(labeled)?;
    if let (Some(t), Some(r)) = (tracker.as_mut(), &teacher) {
        t.metric(0, "student_metric", r.primary().1)?;
    }
    let mut pool: Vec<Example> = unlabeled.to_vec();
    let mut train: Vec<Example> = labeled.to_vec();
    let mut rounds = Vec::new();
    let mut stopped_early = false;

    for round in 1..=cfg.rounds {
        if pool.is_empty() {
            stopped_early = true;
            log::info!("unlabeled pool exhausted before round {round}");
            if let Some(t) = tracker.as_mut() {
                t.param(round as u64, "stopped_early", format!("pool exhausted before round {round}"))?;
            }
            break;
        }
        let probe: Vec<Example> = pool.iter().map(hidden).collect();
        let report = mc_dropout_predict(&model, &probe, cfg.passes, run.seed.wrapping_add(round as u64))?;
        let picked = if cfg.balanced {
            select_confident_balanced(&report, budget, cfg.rule)?
        } else {
            select_confident(&report, budget, cfg.rule)?
        };
        let names = model.labels().labels().to_vec();
        let mean_bald = picked.iter().map(|s| report.bald[s.index]).sum::<f64>() / picked.len() as f64;
        let gold: Option<Vec<bool>> =
            picked.iter().map(|s| pool[s.index].label.as_ref().map(|l| *l == names[s.label])).collect();
        let pseudo_acc = gold.map(|g| g.iter().filter(|&&ok| ok).count() as f64 / g.len().max(1) as f64);

        let mut taken = vec![false; pool.len()];
        for s in &picked {
            taken[s.index] = true;
            train.push(Example { label: Some(names[s.label].clone()), ..pool[s.index].clone() });
        }
        pool = pool.into_iter().zip(taken).filter(|(_, t)| !t).map(|(e, _)| e).collect();

        let (student, student_report) = train_one(&train)?;
        model = student;
        let step = round as u64;
        if let Some(t) = tracker.as_mut() {
            t.metric(step, "round", round as f64)?;
            t.metric(step, "selected_count", picked.len() as f64)?;
            t.metric(step, "mean_bald_selected", mean_bald)?;
            if let Some(a) = pseudo_acc {
                t.metric(step, "pseudo_label_accuracy", a)?;
            }
            if let Some(r) = &student_report {
                t.metric(step, "student_metric", r.primary().1)?;
            }
        }
        rounds.push(RoundReport {
            round,
            selected_count: picked.len(),
            mean_bald_selected: mean_bald,
            pseudo_label_accuracy: pseudo_acc,
            student: student_report,
        });
    }
    Ok(SelfTrainOutcome { model, teacher, rounds, stopped_early })
}
