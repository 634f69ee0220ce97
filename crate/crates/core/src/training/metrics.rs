use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::processors::LabelSet;

/// Task-appropriate scores in `[0, 1]`; absent metrics are omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub span_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub matthews: Option<f64>,
}

impl MetricReport {
    /// Name and value of the metric used for model selection.
    pub fn primary(&self) -> (&'static str, f64) {
        if let Some(v) = self.accuracy {
            ("accuracy", v)
        } else if let Some(v) = self.span_f1 {
            ("span_f1", v)
        } else if let Some(v) = self.exact_match {
            ("exact_match", v)
        } else {
            ("none", 0.0)
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("accuracy", self.accuracy),
            ("macro_f1", self.macro_f1),
            ("span_f1", self.span_f1),
            ("exact_match", self.exact_match),
            ("matthews", self.matthews),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "prediction/gold length mismatch");
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 };
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// Unweighted mean of per-class F1 over classes present in gold or predictions.
pub fn macro_f1(pred: &[usize], gold: &[usize], num_classes: usize) -> f64 {
    let mut scores = Vec::new();
    for c in 0..num_classes {
        let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count();
        let fp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g != c).count();
        let fn_ = pred.iter().zip(gold).filter(|&(&p, &g)| p != c && g == c).count();
        if tp + fp + fn_ > 0 {
            scores.push(f1(tp, fp, fn_));
        }
    }
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Matthews correlation of binary predictions; 0 when undefined.
pub fn matthews(pred: &[usize], gold: &[usize]) -> f64 {
    let count = |p: usize, g: usize| pred.iter().zip(gold).filter(|&(&a, &b)| a == p && b == g).count() as f64;
    let (tp, tn, fp, fn_) = (count(1, 1), count(0, 0), count(1, 0), count(0, 1));
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

/// Micro F1 over sets of items (e.g. `(example, type, start, end)`); two
/// empty sets score 1.
pub fn span_f1<T: Eq + Hash>(pred: &[T], gold: &[T]) -> f64 {
    let p: HashSet<&T> = pred.iter().collect();
    let g: HashSet<&T> = gold.iter().collect();
    let tp = p.intersection(&g).count();
    f1(tp, p.len() - tp, g.len() - tp)
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Share of outputs equal to the reference after whitespace and case folding.
pub fn exact_match(pred: &[String], gold: &[String]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "prediction/gold length mismatch");
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| normalize(p) == normalize(g)).count() as f64 / gold.len() as f64
}

/// Typed token spans `(type, first, last)` from a BIO tag sequence. A stray
/// `I-x` opens a new span.
pub fn bio_to_spans(tags: &[usize], tagset: &LabelSet) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        let name = tagset.name(t).unwrap_or("O");
        let (prefix, kind) = name.split_once('-').unwrap_or((name, ""));
        let continues = prefix == "I" && open.as_ref().is_some_and(|(k, _)| k == kind);
        if continues {
            continue;
        }
        if let Some((k, s)) = open.take() {
            out.push((k, s, i - 1));
        }
        if prefix == "B" || prefix == "I" {
            open = Some((kind.to_string(), i));
        }
    }
    if let Some((k, s)) = open {
        out.push((k, s, tags.len() - 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scores() {
        assert_eq!(accuracy(&[1, 0, 2], &[1, 0, 2]), 1.0);
        assert_eq!(macro_f1(&[1, 0, 2], &[1, 0, 2], 3), 1.0);
        assert_eq!(span_f1(&[(0, 1, 2)], &[(0, 1, 2)]), 1.0);
        assert_eq!(matthews(&[1, 0, 1, 0], &[1, 0, 1, 0]), 1.0);
    }

    #[test]
    fn one_right_one_spurious() {
        let gold = [("person", 0, 0), ("person", 2, 2)];
        let pred = [("person", 0, 0), ("person", 1, 1)];
        assert_eq!(span_f1(&pred, &gold), 0.5);
    }

    #[test]
    fn empty_span_sets() {
        let none: [u8; 0] = [];
        assert_eq!(span_f1(&none, &none), 1.0);
        assert_eq!(span_f1(&[1u8], &none), 0.0);
        assert_eq!(span_f1(&none, &[1u8]), 0.0);
    }

    #[test]
    fn macro_f1_by_hand() {
        // class 0: tp 1 fp 1 fn 0 -> 2/3; class 1: tp 1 fp 0 fn 1 -> 2/3
        let v = macro_f1(&[0, 0, 1], &[0, 1, 1], 2);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matthews_inverted_and_degenerate() {
        assert_eq!(matthews(&[0, 1], &[1, 0]), -1.0);
        assert_eq!(matthews(&[1, 1], &[1, 0]), 0.0);
    }

    #[test]
    fn exact_match_normalizes() {
        let p = vec!["Hello  World".to_string(), "x".to_string()];
        let g = vec!["hello world".to_string(), "y".to_string()];
        assert_eq!(exact_match(&p, &g), 0.5);
    }

    #[test]
    fn bio_decoding() {
        let tags = LabelSet::new(["O", "B-per", "I-per", "B-loc", "I-loc"]);
        let id = |s: &str| tags.id(s).unwrap();
        let seq = [id("B-per"), id("I-per"), id("O"), id("I-loc"), id("B-loc"), id("B-loc")];
        assert_eq!(
            bio_to_spans(&seq, &tags),
            vec![("per".into(), 0, 1), ("loc".into(), 3, 3), ("loc".into(), 4, 4), ("loc".into(), 5, 5)]
        );
    }
}
