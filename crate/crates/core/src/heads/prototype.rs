use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean embedding per class, keyed by class id.
pub fn prototypes<S: Scalar>(support: &[(Vec<S>, usize)]) -> Result<BTreeMap<usize, Vec<S>>> {
    let Some((first, _)) = support.first() else {
        return Err(Error::InvalidArgument("empty support set".into()));
    };
    let dim = first.len();
    let mut sums: BTreeMap<usize, (Vec<S>, usize)> = BTreeMap::new();
    for (emb, class) in support {
        if emb.len() != dim {
            return Err(Error::Shape(format!("support embedding has dim {}, expected {dim}", emb.len())));
        }
        let entry = sums.entry(*class).or_insert_with(|| (vec![S::zero(); dim], 0));
        for (acc, &x) in entry.0.iter_mut().zip(emb) {
            *acc = *acc + x;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, n))| (c, sum.into_iter().map(|x| x / S::of(n as f64)).collect()))
        .collect())
}

/// Nearest-prototype label under squared Euclidean distance; ties go to the
/// smallest class id.
pub fn prototype_classify<S: Scalar>(support: &[(Vec<S>, usize)], queries: &[Vec<S>]) -> Result<Vec<usize>> {
    let protos = prototypes(support)?;
    let dim = support[0].0.len();
    queries
        .iter()
        .map(|q| {
            if q.len() != dim {
                return Err(Error::Shape(format!("query has dim {}, expected {dim}", q.len())));
            }
            let mut best: Option<(usize, S)> = None;
            for (&class, p) in &protos {
                let d: S = q.iter().zip(p).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((class, d));
                }
            }
            Ok(best.expect("non-empty prototypes").0)
        })
        .collect()
}
