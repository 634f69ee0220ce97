//! Task heads that sit on top of the backbone's hidden states.

mod global_pointer;
mod prototype;
mod verbalizer;

pub use global_pointer::{decode_batch, decode_spans, global_pointer_loss, span_validity, GlobalPointerHead, SpanKey, SpanPrediction};
pub use prototype::{prototype_classify, prototypes};
pub use verbalizer::{verbalizer_predict, Verbalizer};

use crate::autograd::{Graph, Var};
use crate::backbone::model::{add_linear, Linear};
use crate::backbone::TokenBatch;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn linear_from_store<S: Scalar>(store: &ParamStore<S>, name: &str) -> Result<Linear> {
    let get = |suffix: &str| {
        store
            .id(&format!("{name}.{suffix}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing head tensor {name}.{suffix}")))
    };
    Ok(Linear { w: get("weight")?, b: get("bias")? })
}

fn apply<'g, S: Scalar>(g: &Graph<'g, S>, x: Var, lin: Linear) -> Var {
    g.add_bias(g.matmul(x, g.param(lin.w)), g.param(lin.b))
}

/// Row indices of the first (BOS) position of every sequence.
pub fn first_token_rows(batch: &TokenBatch) -> Vec<usize> {
    (0..batch.batch_size).map(|b| b * batch.seq_len).collect()
}

/// Affine classifier over the first-token hidden state.
#[derive(Clone, Copy, Debug)]
pub struct ClsHead {
    pub(crate) proj: Linear,
    pub num_labels: usize,
}

impl ClsHead {
    pub const NAME: &'static str = "head.cls";

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, seed: u64, hidden: usize, num_labels: usize) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::InvalidArgument(format!("classification needs >= 2 labels, got {num_labels}")));
        }
        let proj = add_linear(store, seed, Self::NAME, hidden, num_labels, ParamGroup::Head)?;
        Ok(Self { proj, num_labels })
    }

    pub fn from_store<S: Scalar>(store: &ParamStore<S>) -> Result<Self> {
        let proj = linear_from_store(store, Self::NAME)?;
        let num_labels = store.value(proj.b).numel();
        Ok(Self { proj, num_labels })
    }

    /// Logits `[batch, num_labels]` from row-packed hidden states.
    pub fn logits<'g, S: Scalar>(&self, g: &Graph<'g, S>, hidden: Var, batch: &TokenBatch) -> Var {
        let cls = g.gather_rows(hidden, &first_token_rows(batch));
        apply(g, cls, self.proj)
    }
}

/// `logits[b] = hidden[b, 0, :] · weight + bias` for `hidden: [B, L, d]`,
/// `weight: [d, C]`, `bias: [C]`.
pub fn cls_forward<S: Scalar>(hidden: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, l, d) = dims3(hidden)?;
    let c = weight.cols();
    if c < 2 {
        return Err(Error::InvalidArgument(format!("classification needs >= 2 labels, got {c}")));
    }
    if weight.rows() != d || bias.numel() != c {
        return Err(Error::Shape("cls weight must be [d, C] and bias [C]".into()));
    }
    let mut out = Tensor::zeros(&[b, c]);
    for row in 0..b {
        let h = &hidden.data()[row * l * d..row * l * d + d];
        for j in 0..c {
            let mut acc = bias.data()[j];
            for (k, &x) in h.iter().enumerate() {
                acc = acc + x * weight.data()[k * c + j];
            }
            out.data_mut()[row * c + j] = acc;
        }
    }
    Ok(out)
}

pub(crate) fn dims3<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::Shape(format!("expected a rank-3 tensor, got {s:?}"))),
    }
}

/// Per-position affine tagger.
#[derive(Clone, Copy, Debug)]
pub struct TokenHead {
    pub(crate) proj: Linear,
    pub num_tags: usize,
}

impl TokenHead {
    pub const NAME: &'static str = "head.token";

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, seed: u64, hidden: usize, num_tags: usize) -> Result<Self> {
        if num_tags == 0 {
            return Err(Error::InvalidArgument("token labeling needs at least one tag".into()));
        }
        let proj = add_linear(store, seed, Self::NAME, hidden, num_tags, ParamGroup::Head)?;
        Ok(Self { proj, num_tags })
    }

    pub fn from_store<S: Scalar>(store: &ParamStore<S>) -> Result<Self> {
        let proj = linear_from_store(store, Self::NAME)?;
        let num_tags = store.value(proj.b).numel();
        Ok(Self { proj, num_tags })
    }

    /// Tag logits `[batch * seq_len, num_tags]`.
    pub fn logits<'g, S: Scalar>(&self, g: &Graph<'g, S>, hidden: Var) -> Var {
        apply(g, hidden, self.proj)
    }

    /// Cross-entropy over positions that are not PAD and carry a tag, times `scale`.
    pub fn loss<'g, S: Scalar>(&self, g: &Graph<'g, S>, hidden: Var, batch: &TokenBatch, scale: S) -> Result<Var> {
        let tags = batch
            .token_labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("batch has no token labels".into()))?;
        let targets: Vec<Option<usize>> = tags
            .iter()
            .zip(&batch.attention_mask)
            .map(|(t, &m)| if m == 1 { *t } else { None })
            .collect();
        Ok(g.cross_entropy(self.logits(g, hidden), &targets, scale))
    }
}

/// Shared scalar scorer for (context, choice) pairs.
#[derive(Clone, Copy, Debug)]
pub struct ChoiceHead {
    pub(crate) proj: Linear,
}

impl ChoiceHead {
    pub const NAME: &'static str = "head.choice";

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, seed: u64, hidden: usize) -> Result<Self> {
        Ok(Self { proj: add_linear(store, seed, Self::NAME, hidden, 1, ParamGroup::Head)? })
    }

    pub fn from_store<S: Scalar>(store: &ParamStore<S>) -> Result<Self> {
        Ok(Self { proj: linear_from_store(store, Self::NAME)? })
    }

    /// Choice logits `[examples, num_choices]` where the batch holds
    /// `examples * num_choices` pair rows, choices of one example adjacent.
    pub fn logits<'g, S: Scalar>(&self, g: &Graph<'g, S>, hidden: Var, batch: &TokenBatch, num_choices: usize) -> Result<Var> {
        if num_choices < 2 {
            return Err(Error::InvalidArgument("multi-choice needs at least 2 choices".into()));
        }
        if batch.batch_size % num_choices != 0 {
            return Err(Error::Shape("batch rows must be a multiple of num_choices".into()));
        }
        let cls = g.gather_rows(hidden, &first_token_rows(batch));
        let scores = apply(g, cls, self.proj);
        Ok(g.reshape(scores, &[batch.batch_size / num_choices, num_choices]))
    }
}
