//! Global-pointer span extraction: every `(start, end)` token pair of every
//! type gets a bilinear score; spans are the valid cells above a threshold.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::model::{normal_tensor, INIT_STD};
use crate::backbone::TokenBatch;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identifies one score cell: `(batch row, type, start, end)`, end inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanKey {
    pub batch: usize,
    pub type_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanPrediction<S> {
    pub type_id: usize,
    pub start: usize,
    pub end: usize,
    pub score: S,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalPointerHead {
    pub(crate) query: ParamId,
    pub(crate) key: ParamId,
    pub num_types: usize,
    pub head_dim: usize,
    pub threshold: f64,
}

/// `[B, L, L]` mask of cells with `start <= end` and both ends non-PAD.
pub fn span_validity(batch: &TokenBatch) -> Vec<bool> {
    let l = batch.seq_len;
    let mut valid = vec![false; batch.batch_size * l * l];
    for b in 0..batch.batch_size {
        let m = &batch.attention_mask[b * l..(b + 1) * l];
        for i in 0..l {
            for j in i..l {
                valid[(b * l + i) * l + j] = m[i] == 1 && m[j] == 1;
            }
        }
    }
    valid
}

impl GlobalPointerHead {
    pub const NAME: &'static str = "head.gp";

    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        seed: u64,
        hidden: usize,
        num_types: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if num_types == 0 || head_dim == 0 {
            return Err(Error::InvalidArgument("global pointer needs >= 1 type and head_dim >= 1".into()));
        }
        let shape = [hidden, num_types * head_dim];
        let qn = format!("{}.query.weight", Self::NAME);
        let kn = format!("{}.key.weight", Self::NAME);
        let query = store.add(qn.clone(), normal_tensor(seed, &qn, &shape, INIT_STD), ParamGroup::Head)?;
        let key = store.add(kn.clone(), normal_tensor(seed, &kn, &shape, INIT_STD), ParamGroup::Head)?;
        Ok(Self { query, key, num_types, head_dim, threshold: 0.0 })
    }

    pub fn from_store<S: Scalar>(store: &ParamStore<S>, num_types: usize) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{}.{n}.weight", Self::NAME))
                .ok_or_else(|| Error::Checkpoint(format!("missing head tensor {}.{n}.weight", Self::NAME)))
        };
        let (query, key) = (get("query")?, get("key")?);
        let width = store.value(query).cols();
        if num_types == 0 || width % num_types != 0 {
            return Err(Error::Checkpoint("global pointer width is not a multiple of num_types".into()));
        }
        Ok(Self { query, key, num_types, head_dim: width / num_types, threshold: 0.0 })
    }

    /// Scores `[B, T, L, L]` from row-packed hidden states.
    pub fn scores<'g, S: Scalar>(&self, g: &Graph<'g, S>, hidden: Var, batch: &TokenBatch) -> Var {
        let q = g.matmul(hidden, g.param(self.query));
        let k = g.matmul(hidden, g.param(self.key));
        g.global_pointer_scores(q, k, batch.batch_size, batch.seq_len, self.num_types, &span_validity(batch))
    }

    /// Scores for `hidden: [B, L, d]` outside of any training graph.
    pub fn score<S: Scalar>(&self, store: &ParamStore<S>, hidden: &Tensor<S>, batch: &TokenBatch) -> Result<Tensor<S>> {
        let (b, l, d) = super::dims3(hidden)?;
        let g = Graph::new(store);
        let h = g.constant(hidden.clone().reshape(&[b * l, d])?);
        let s = self.scores(&g, h, batch);
        let out = g.value(s).clone();
        Ok(out)
    }

    /// Loss against gold cells, times `scale`.
    pub fn loss<'g, S: Scalar>(&self, g: &Graph<'g, S>, scores: Var, gold: &[SpanKey], scale: S) -> Result<Var> {
        let mask = gold_mask(&g.shape(scores), gold)?;
        g.global_pointer_loss(scores, &mask, scale)
    }
}

fn gold_mask(shape: &[usize], gold: &[SpanKey]) -> Result<Vec<bool>> {
    let [b, t, l, l2] = *shape else {
        return Err(Error::Shape(format!("span scores must be [B, T, L, L], got {shape:?}")));
    };
    debug_assert_eq!(l, l2);
    let mut mask = vec![false; b * t * l * l];
    for k in gold {
        if k.batch >= b || k.type_id >= t || k.start >= l || k.end >= l || k.start > k.end {
            return Err(Error::GoldSpanOutOfRegion { type_id: k.type_id, start: k.start, end: k.end });
        }
        mask[((k.batch * t + k.type_id) * l + k.start) * l + k.end] = true;
    }
    Ok(mask)
}

/// Total multi-label span loss of a `[B, T, L, L]` score tensor whose invalid
/// cells hold `-inf`:
/// `Σ_{b,t} log(1 + Σ_gold e^{-s}) + log(1 + Σ_{valid non-gold} e^{s})`.
pub fn global_pointer_loss<S: Scalar>(scores: &Tensor<S>, gold: &[SpanKey]) -> Result<S> {
    let mask = gold_mask(scores.shape(), gold)?;
    let store = ParamStore::new();
    let g = Graph::new(&store);
    let s = g.constant(scores.clone());
    let loss = g.global_pointer_loss(s, &mask, S::one())?;
    let v = g.value(loss).data()[0];
    Ok(v)
}

/// Valid cells of a `[T, L, L]` score tensor with score above `threshold`,
/// ordered by `(type, start, end)`.
pub fn decode_spans<S: Scalar>(scores: &Tensor<S>, threshold: S) -> Vec<SpanPrediction<S>> {
    let [t, l, _] = *scores.shape() else {
        panic!("decode_spans expects [T, L, L] scores, got {:?}", scores.shape());
    };
    let mut out = Vec::new();
    for type_id in 0..t {
        for start in 0..l {
            for end in start..l {
                let score = scores.data()[(type_id * l + start) * l + end];
                if score > threshold && score != S::neg_infinity() {
                    out.push(SpanPrediction { type_id, start, end, score });
                }
            }
        }
    }
    out
}

/// Per-row decoding of `[B, T, L, L]` scores.
pub fn decode_batch<S: Scalar>(scores: &Tensor<S>, threshold: S) -> Vec<Vec<SpanPrediction<S>>> {
    let [b, t, l, _] = *scores.shape() else {
        panic!("decode_batch expects [B, T, L, L] scores, got {:?}", scores.shape());
    };
    let per = t * l * l;
    (0..b)
        .map(|row| {
            let slice = Tensor::from_vec(&[t, l, l], scores.data()[row * per..(row + 1) * per].to_vec()).expect("shape");
            decode_spans(&slice, threshold)
        })
        .collect()
}
