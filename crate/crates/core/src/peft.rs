//! Parameter-efficient tuning: backbone freezing, LoRA, bottleneck adapters,
//! prefix key/values and bias-only tuning, plus exact parameter accounting.
//!
//! Every method freezes the backbone except for its own tensors; head
//! tensors are never frozen. Injected tensors live under the `peft/` name
//! namespace so checkpoints keep base and adapter weights separable.

use serde::{Deserialize, Serialize};

use crate::backbone::model::{add_linear, normal_tensor, AdapterIds, Linear, LoraIds, INIT_STD};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TuningPlan {
    #[default]
    Full,
    FreezeBackbone,
    Lora { rank: usize, alpha: f64 },
    Adapter { bottleneck: usize },
    Prefix { prefix_len: usize },
    #[serde(rename = "bitfit")]
    BitFit,
}

impl TuningPlan {
    pub fn name(&self) -> &'static str {
        match self {
            TuningPlan::Full => "full",
            TuningPlan::FreezeBackbone => "freeze_backbone",
            TuningPlan::Lora { .. } => "lora",
            TuningPlan::Adapter { .. } => "adapter",
            TuningPlan::Prefix { .. } => "prefix",
            TuningPlan::BitFit => "bitfit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
    pub breakdown: Vec<TensorInfo>,
}

pub fn count_parameters<S: Scalar>(model: &Backbone<S>) -> ParamReport {
    report_for(model.params())
}

pub fn report_for<S: Scalar>(store: &ParamStore<S>) -> ParamReport {
    let breakdown: Vec<TensorInfo> = store
        .iter()
        .map(|(_, p)| TensorInfo {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            group: p.group,
        })
        .collect();
    let size = |t: &TensorInfo| t.shape.iter().product::<usize>();
    let total: usize = breakdown.iter().map(size).sum();
    let trainable: usize = breakdown.iter().filter(|t| t.trainable).map(size).sum();
    let fraction = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
    ParamReport { trainable, total, fraction, breakdown }
}

fn require_untouched<S: Scalar>(model: &Backbone<S>, method: &str) -> Result<()> {
    if model.plan != TuningPlan::Full {
        return Err(Error::InvalidArgument(format!(
            "cannot apply {method}: {} is already active",
            model.plan.name()
        )));
    }
    Ok(())
}

fn freeze_all_backbone<S: Scalar>(model: &mut Backbone<S>) {
    model.params.set_trainable_where(false, |p| p.group == ParamGroup::Backbone);
}

/// Excludes every backbone tensor (embeddings included) from updates.
pub fn freeze_backbone<S: Scalar>(model: &mut Backbone<S>) -> Result<()> {
    require_untouched(model, "freeze_backbone")?;
    freeze_all_backbone(model);
    model.plan = TuningPlan::FreezeBackbone;
    Ok(())
}

pub fn unfreeze_backbone<S: Scalar>(model: &mut Backbone<S>) -> Result<()> {
    if model.plan != TuningPlan::FreezeBackbone {
        return Err(Error::InvalidArgument("backbone is not frozen by freeze_backbone".into()));
    }
    model.params.set_trainable_where(true, |p| p.group == ParamGroup::Backbone);
    model.plan = TuningPlan::Full;
    Ok(())
}

/// Wraps every query and value projection as `x W + (alpha / rank) (x A) B`
/// with `A ~ N(0, 0.02)` and `B = 0`.
pub fn apply_lora<S: Scalar>(model: &mut Backbone<S>, rank: usize, alpha: f64) -> Result<()> {
    require_untouched(model, "lora")?;
    let d = model.config.hidden_size;
    if rank == 0 || rank > d {
        return Err(Error::InvalidArgument(format!("lora rank {rank} must lie in 1..={d}")));
    }
    freeze_all_backbone(model);
    let seed = model.config.seed;
    for i in 0..model.layers.len() {
        let mut make = |proj: &str| -> Result<LoraIds> {
            let base = format!("peft/layers.{i}.attn.{proj}");
            let a_name = format!("{base}.lora_a");
            let a = model.params.add(a_name.clone(), normal_tensor(seed, &a_name, &[d, rank], INIT_STD), ParamGroup::Peft)?;
            let b = model.params.add(format!("{base}.lora_b"), Tensor::zeros(&[rank, d]), ParamGroup::Peft)?;
            Ok(LoraIds { a, b })
        };
        let q = make("query")?;
        let v = make("value")?;
        model.peft[i].lora_query = Some(q);
        model.peft[i].lora_value = Some(v);
    }
    model.plan = TuningPlan::Lora { rank, alpha };
    Ok(())
}

/// Folds `W += (alpha / rank) A B` into the wrapped projections and removes
/// the low-rank tensors. The backbone stays frozen.
pub fn merge_lora<S: Scalar>(model: &mut Backbone<S>) -> Result<()> {
    let TuningPlan::Lora { rank, alpha } = model.plan else {
        return Err(Error::InvalidArgument("merge_lora requires an active LoRA plan".into()));
    };
    let scale = S::of(alpha / rank as f64);
    for i in 0..model.layers.len() {
        let pairs = [
            (model.peft[i].lora_query.take(), model.layers[i].query.w),
            (model.peft[i].lora_value.take(), model.layers[i].value.w),
        ];
        for (lora, w) in pairs {
            let Some(lora) = lora else { continue };
            let a = model.params.remove(lora.a).expect("lora a");
            let b = model.params.remove(lora.b).expect("lora b");
            let mut delta = a.value.matmul(&b.value);
            delta.scale_in_place(scale);
            model.params.get_mut(w).value.add_assign(&delta);
        }
    }
    model.plan = TuningPlan::FreezeBackbone;
    Ok(())
}

/// Inserts a ReLU bottleneck adapter (down to `bottleneck`, up, residual add)
/// after the attention and feed-forward sublayers of every layer. The
/// up-projection starts at zero.
pub fn apply_adapter<S: Scalar>(model: &mut Backbone<S>, bottleneck: usize) -> Result<()> {
    require_untouched(model, "adapter")?;
    if bottleneck == 0 {
        return Err(Error::InvalidArgument("adapter bottleneck must be >= 1".into()));
    }
    freeze_all_backbone(model);
    let (d, seed) = (model.config.hidden_size, model.config.seed);
    for i in 0..model.layers.len() {
        let mut make = |site: &str| -> Result<AdapterIds> {
            let base = format!("peft/layers.{i}.adapter_{site}");
            let down = add_linear(&mut model.params, seed, &format!("{base}.down"), d, bottleneck, ParamGroup::Peft)?;
            let up_w = model.params.add(format!("{base}.up.weight"), Tensor::zeros(&[bottleneck, d]), ParamGroup::Peft)?;
            let up_b = model.params.add(format!("{base}.up.bias"), Tensor::zeros(&[d]), ParamGroup::Peft)?;
            Ok(AdapterIds { down, up: Linear { w: up_w, b: up_b } })
        };
        let attn = make("attn")?;
        let ffn = make("ffn")?;
        model.peft[i].adapter_attn = Some(attn);
        model.peft[i].adapter_ffn = Some(ffn);
    }
    model.plan = TuningPlan::Adapter { bottleneck };
    Ok(())
}

/// Trains only tensors named `*.bias` (plus heads).
pub fn apply_bitfit<S: Scalar>(model: &mut Backbone<S>) -> Result<()> {
    require_untouched(model, "bitfit")?;
    model
        .params
        .set_trainable_where(false, |p| p.group == ParamGroup::Backbone && !p.name.ends_with(".bias"));
    model.plan = TuningPlan::BitFit;
    Ok(())
}

/// Prepends `prefix_len` trainable key and value vectors to every attention
/// layer. Sequences must then satisfy `prefix_len + L <= max_seq_len`.
pub fn apply_prefix<S: Scalar>(model: &mut Backbone<S>, prefix_len: usize) -> Result<()> {
    require_untouched(model, "prefix")?;
    if prefix_len == 0 {
        return Err(Error::InvalidArgument("prefix length must be >= 1".into()));
    }
    if prefix_len >= model.config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "prefix length {prefix_len} leaves no room within max_seq_len {}",
            model.config.max_seq_len
        )));
    }
    freeze_all_backbone(model);
    let (d, seed) = (model.config.hidden_size, model.config.seed);
    for i in 0..model.layers.len() {
        let kn = format!("peft/layers.{i}.prefix.key");
        let vn = format!("peft/layers.{i}.prefix.value");
        let k = model.params.add(kn.clone(), normal_tensor(seed, &kn, &[prefix_len, d], INIT_STD), ParamGroup::Peft)?;
        let v = model.params.add(vn.clone(), normal_tensor(seed, &vn, &[prefix_len, d], INIT_STD), ParamGroup::Peft)?;
        model.peft[i].prefix = Some((k, v));
    }
    model.plan = TuningPlan::Prefix { prefix_len };
    Ok(())
}

/// Applies any plan to an untouched model.
pub fn apply_plan<S: Scalar>(model: &mut Backbone<S>, plan: &TuningPlan) -> Result<()> {
    match *plan {
        TuningPlan::Full => Ok(()),
        TuningPlan::FreezeBackbone => freeze_backbone(model),
        TuningPlan::Lora { rank, alpha } => apply_lora(model, rank, alpha),
        TuningPlan::Adapter { bottleneck } => apply_adapter(model, bottleneck),
        TuningPlan::Prefix { prefix_len } => apply_prefix(model, prefix_len),
        TuningPlan::BitFit => apply_bitfit(model),
    }
}

/// Analytic trainable count of the injected/selected backbone tensors for a
/// plan, excluding heads.
pub fn expected_trainable(config: &crate::backbone::ModelConfig, plan: &TuningPlan) -> usize {
    let (d, n, v, f) = (config.hidden_size, config.num_layers, config.vocab_size, config.ffn_size());
    match *plan {
        TuningPlan::Full => count_backbone(config),
        TuningPlan::FreezeBackbone => 0,
        TuningPlan::Lora { rank, .. } => n * 2 * rank * (d + d),
        TuningPlan::Adapter { bottleneck: m } => n * 2 * (d * m + m + m * d + d),
        TuningPlan::Prefix { prefix_len } => n * 2 * prefix_len * d,
        // every *.bias: embeddings norm, per layer q/k/v/o + attn norm + ffn up/down + ffn norm, lm head
        TuningPlan::BitFit => d + n * (4 * d + d + f + d + d) + (d + d + v),
    }
}

/// Analytic size of the unmodified backbone.
pub fn count_backbone(config: &crate::backbone::ModelConfig) -> usize {
    let (d, n, v, f, l) = (config.hidden_size, config.num_layers, config.vocab_size, config.ffn_size(), config.max_seq_len);
    let embeddings = v * d + l * d + 2 * d;
    let layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
    let lm_head = d * d + d + 2 * d + v;
    embeddings + n * layer + lm_head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ForwardCtx, ModelConfig, TokenBatch, Tokenizer};

    fn model(d: usize, layers: usize) -> Backbone<f64> {
        let tok = Tokenizer::build(&["a b c d e"], 100).unwrap();
        let cfg = ModelConfig { hidden_size: d, num_layers: layers, num_heads: 2, max_seq_len: 12, ..Default::default() };
        Backbone::new(cfg, tok).unwrap()
    }

    #[test]
    fn full_model_matches_backbone_formula() {
        let m = model(8, 2);
        let r = count_parameters(&m);
        assert_eq!(r.total, count_backbone(&m.config));
        assert_eq!(r.trainable, r.total);
        assert_eq!(r.fraction, 1.0);
    }

    #[test]
    fn one_method_per_model() {
        let mut m = model(8, 1);
        apply_bitfit(&mut m).unwrap();
        assert!(apply_lora(&mut m, 2, 4.0).is_err());
        assert!(freeze_backbone(&mut m).is_err());
    }

    #[test]
    fn lora_rank_limits() {
        let mut m = model(8, 1);
        assert!(apply_lora(&mut m, 9, 1.0).is_err());
        assert!(apply_lora(&mut m, 0, 1.0).is_err());
        assert!(apply_lora(&mut m, 8, 1.0).is_ok());
    }

    #[test]
    fn prefix_validation_and_shape() {
        let mut m = model(8, 2);
        assert!(apply_prefix(&mut m, 0).is_err());
        assert!(apply_prefix(&mut m, 12).is_err());
        apply_prefix(&mut m, 3).unwrap();
        let ok = TokenBatch::from_sequences(&[vec![2, 5, 6, 3]]);
        let h = m.forward_encoder(&ok, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(h.shape(), &[1, 4, 8]);
        let long = TokenBatch::from_sequences(&[vec![5; 10]]);
        assert!(m.forward_encoder(&long, &mut ForwardCtx::eval()).is_err());
    }

    #[test]
    fn merge_requires_lora() {
        let mut m = model(8, 1);
        assert!(merge_lora(&mut m).is_err());
    }

    #[test]
    fn unfreeze_restores_count() {
        let mut m = model(8, 1);
        let before = count_parameters(&m).trainable;
        freeze_backbone(&mut m).unwrap();
        assert_eq!(count_parameters(&m).trainable, 0);
        unfreeze_backbone(&mut m).unwrap();
        assert_eq!(count_parameters(&m).trainable, before);
    }

    #[test]
    fn report_serializes() {
        let m = model(8, 1);
        let json = serde_json::to_string(&count_parameters(&m)).unwrap();
        let back: ParamReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, count_parameters(&m));
        let plan = serde_json::to_string(&TuningPlan::Lora { rank: 4, alpha: 8.0 }).unwrap();
        assert_eq!(plan, r#"{"method":"lora","rank":4,"alpha":8.0}"#);
    }
}
