use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::processors::{Example, DEFAULT_EXTRACTIVE_PATTERN};
use crate::scalar::Scalar;
use crate::training::{train_on, RunConfig, RunOutcome, TaskType};

/// Span types annotated anywhere in `dataset`.
pub fn dataset_types(dataset: &[Example]) -> Vec<String> {
    dataset.iter().flat_map(|e| e.spans.iter().flatten().map(|s| s.kind.clone())).collect::<BTreeSet<_>>().into_iter().collect()
}

/// One example per (text, type): `text_b` names the type and `spans` keep
/// only that type. Every positive pair is kept; pairs whose type is absent
/// from the text are sampled down to the number of positives.
pub fn instruction_examples(dataset: &[Example], seed: u64) -> Result<Vec<Example>> {
    for e in dataset {
        e.validate().map_err(|m| Error::InvalidArgument(format!("example {:?}: {m}", e.id)))?;
    }
    let types = dataset_types(dataset);
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for e in dataset {
        for kind in &types {
            let spans: Vec<_> = e.spans.iter().flatten().filter(|s| &s.kind == kind).cloned().collect();
            let ex = Example { id: format!("{}#{kind}", e.id), text_b: Some(kind.clone()), label: None, ..e.clone() }
                .with_spans(spans.clone());
            if spans.is_empty() { &mut negative } else { &mut positive }.push(ex);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    negative.shuffle(&mut rng);
    negative.truncate(positive.len());
    let mut out = positive;
    out.extend(negative);
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Trains one instruction-driven global-pointer model over several span
/// datasets; `eval` sets (possibly empty) are converted the same way, with
/// every negative pair kept. The best model is written to `cfg.output_dir`.
pub fn pretrain_hugie<S: Scalar>(
    datasets: &[Vec<Example>],
    eval: &[Vec<Example>],
    cfg: &RunConfig,
) -> Result<RunOutcome<S>> {
    if datasets.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    let mut cfg = cfg.clone();
    cfg.task_type = TaskType::GlobalPointer.name().to_string();
    if cfg.user_defined.get("instruction").is_none() {
        cfg.user_defined.0.push(("instruction".into(), DEFAULT_EXTRACTIVE_PATTERN.into()));
    }
    let mut train = Vec::new();
    for (i, d) in datasets.iter().enumerate() {
        train.extend(instruction_examples(d, cfg.seed.wrapping_add(i as u64))?);
    }
    let mut held_out = Vec::new();
    for d in eval {
        for e in d {
            e.validate().map_err(|m| Error::InvalidArgument(format!("example {:?}: {m}", e.id)))?;
        }
        let types = dataset_types(d);
        for e in d {
            for kind in &types {
                let spans = e.spans.iter().flatten().filter(|s| &s.kind == kind).cloned().collect();
                held_out.push(Example { id: format!("{}#{kind}", e.id), text_b: Some(kind.clone()), ..e.clone() }.with_spans(spans));
            }
        }
    }
    if cfg.do_eval && held_out.is_empty() {
        cfg.do_eval = false;
    }
    train_on::<S>(&cfg, &train, &held_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processors::synthetic::{entity_dataset, event_dataset};

    #[test]
    fn pool_covers_types_with_balanced_negatives() {
        let people: Vec<Example> = entity_dataset(50, 1)
            .into_iter()
            .map(|e| {
                let spans = e.spans.iter().flatten().filter(|s| s.kind == "person").cloned().collect();
                e.with_spans(spans)
            })
            .collect();
        let events = event_dataset(50, 2);
        let a = instruction_examples(&people, 0).unwrap();
        let b = instruction_examples(&events, 0).unwrap();
        let kinds: BTreeSet<&str> = a.iter().chain(&b).filter_map(|e| e.text_b.as_deref()).collect();
        assert_eq!(kinds.into_iter().collect::<Vec<_>>(), vec!["event", "person"]);
        for pool in [&a, &b] {
            let pos = pool.iter().filter(|e| !e.spans.as_ref().unwrap().is_empty()).count();
            let neg = pool.len() - pos;
            assert!(neg <= pos && neg > 0, "{pos} {neg}");
            for e in pool.iter() {
                assert!(e.spans.iter().flatten().all(|s| Some(&s.kind) == e.text_b.as_ref()));
            }
        }
    }

    #[test]
    fn out_of_bounds_spans_are_rejected() {
        let mut bad = entity_dataset(3, 1);
        bad[0].spans = Some(vec![crate::processors::SpanLabel { kind: "person".into(), start: 2, end: 500 }]);
        assert!(instruction_examples(&bad, 0).is_err());
    }
}
