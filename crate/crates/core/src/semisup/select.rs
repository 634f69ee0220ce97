use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::uncertainty::UncertaintyReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    #[default]
    LowestBald,
    LowestEntropy,
}

impl SelectionRule {
    fn key(self, report: &UncertaintyReport, i: usize) -> f64 {
        match self {
            SelectionRule::LowestBald => report.bald[i],
            SelectionRule::LowestEntropy => report.predictive_entropy[i],
        }
    }
}

/// A selected pool index with its hard pseudo-label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selected {
    pub index: usize,
    pub label: usize,
}

fn ranked(report: &UncertaintyReport, rule: SelectionRule) -> Vec<usize> {
    let mut order: Vec<usize> = (0..report.len()).collect();
    order.sort_by(|&a, &b| rule.key(report, a).total_cmp(&rule.key(report, b)).then(a.cmp(&b)));
    order
}

/// The `k` least uncertain examples under `rule`, in rank order; ties go to
/// the smaller index.
pub fn select_confident(report: &UncertaintyReport, k: usize, rule: SelectionRule) -> Result<Vec<Selected>> {
    check(report, k)?;
    Ok(ranked(report, rule).into_iter().take(k).map(|index| Selected { index, label: report.predicted(index) }).collect())
}

/// Up to `ceil(k / C)` least uncertain examples per predicted class,
/// ordered by class and then rank.
pub fn select_confident_balanced(report: &UncertaintyReport, k: usize, rule: SelectionRule) -> Result<Vec<Selected>> {
    check(report, k)?;
    let per = k.div_ceil(report.num_classes().max(1));
    let mut by_class: BTreeMap<usize, Vec<Selected>> = BTreeMap::new();
    for index in ranked(report, rule) {
        let label = report.predicted(index);
        let slot = by_class.entry(label).or_default();
        if slot.len() < per {
            slot.push(Selected { index, label });
        }
    }
    Ok(by_class.into_values().flatten().collect())
}

fn check(report: &UncertaintyReport, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("selection budget must be at least 1".into()));
    }
    if report.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty pool".into()));
    }
    Ok(())
}
