//! The transformer backbone: embeddings, post-norm transformer layers and a
//! tied language-model head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Architecture, ModelConfig};
use super::tokenizer::{Tokenizer, EOS, MASK, PAD};
use crate::autograd::{AttentionSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::peft::TuningPlan;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

/// Token ids packed as `[batch, seq_len]` plus optional per-task targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// One class id per row (classification, multi-choice).
    pub labels: Option<Vec<usize>>,
    /// One optional tag per position (sequence labeling).
    pub token_labels: Option<Vec<Option<usize>>>,
    /// Index of the single `[MASK]` per row (prompt classification).
    pub mask_positions: Option<Vec<usize>>,
    /// Per-position language-model targets (masked or next-token).
    pub lm_targets: Option<Vec<Option<u32>>>,
}

impl TokenBatch {
    /// Right-pads sequences with PAD to the longest one.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Self {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut attention_mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            for l in 0..seq_len {
                let id = s.get(l).copied().unwrap_or(PAD);
                ids.push(id);
                attention_mask.push(u8::from(id != PAD));
            }
        }
        Self { ids, attention_mask, batch_size: seqs.len(), seq_len, ..Default::default() }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Number of non-PAD tokens in row `b`.
    pub fn row_len(&self, b: usize) -> usize {
        self.attention_mask[b * self.seq_len..(b + 1) * self.seq_len].iter().filter(|&&m| m == 1).count()
    }

    pub fn key_valid(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
    /// Dropout active without any parameter update (Monte-Carlo dropout).
    McInference,
}

/// Dropout mode plus the random stream masks are drawn from.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    mode: DropoutMode,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { mode: DropoutMode::Eval, rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self { mode: DropoutMode::Train, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    /// A stochastic inference pass whose masks come from a stream derived
    /// from `(seed, pass)`, so passes are reproducible and independent.
    pub fn mc_inference(seed: u64, pass: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pass + 1);
        Self { mode: DropoutMode::McInference, rng: Some(rng) }
    }

    pub fn mode(&self) -> DropoutMode {
        self.mode
    }

    /// Inverted-dropout mask, or `None` when dropout is inactive.
    pub fn mask<S: Scalar>(&mut self, n: usize, p: f64) -> Option<Vec<S>> {
        if self.mode == DropoutMode::Eval || p <= 0.0 {
            return None;
        }
        let rng = self.rng.as_mut().expect("stochastic modes carry an rng");
        let keep = S::of(1.0 / (1.0 - p));
        Some((0..n).map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep }).collect())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EmbeddingIds {
    pub word: ParamId,
    pub position: ParamId,
    pub norm_w: ParamId,
    pub norm_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: Linear,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
    pub ffn_norm: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct LmHeadIds {
    pub transform: Linear,
    pub norm: Linear,
    pub bias: ParamId,
}

/// Low-rank pair: `a: [d_in, r]`, `b: [r, d_out]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LoraIds {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AdapterIds {
    pub down: Linear,
    pub up: Linear,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct LayerPeft {
    pub lora_query: Option<LoraIds>,
    pub lora_value: Option<LoraIds>,
    pub adapter_attn: Option<AdapterIds>,
    pub adapter_ffn: Option<AdapterIds>,
    pub prefix: Option<(ParamId, ParamId)>,
}

/// Small trainable transformer with its tokenizer. Task heads and PEFT
/// modules register their tensors in the same [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone<S: Scalar> {
    pub(crate) config: ModelConfig,
    pub(crate) tokenizer: Tokenizer,
    pub(crate) params: ParamStore<S>,
    pub(crate) emb: EmbeddingIds,
    pub(crate) layers: Vec<LayerIds>,
    pub(crate) lm_head: LmHeadIds,
    pub(crate) peft: Vec<LayerPeft>,
    pub(crate) plan: TuningPlan,
}

/// Seeded generator dedicated to one named tensor, independent of the order
/// in which tensors are created.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

pub(crate) fn normal_tensor<S: Scalar>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<S> {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| S::of(dist.sample(&mut rng))).collect()).expect("shape")
}

pub(crate) fn add_linear<S: Scalar>(
    params: &mut ParamStore<S>,
    seed: u64,
    name: &str,
    d_in: usize,
    d_out: usize,
    group: ParamGroup,
) -> Result<Linear> {
    let w = params.add(format!("{name}.weight"), normal_tensor(seed, &format!("{name}.weight"), &[d_in, d_out], INIT_STD), group)?;
    let b = params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), group)?;
    Ok(Linear { w, b })
}

fn add_norm<S: Scalar>(params: &mut ParamStore<S>, name: &str, d: usize) -> Result<Linear> {
    let w = params.add(format!("{name}.weight"), Tensor::full(&[d], S::one()), ParamGroup::Backbone)?;
    let b = params.add(format!("{name}.bias"), Tensor::zeros(&[d]), ParamGroup::Backbone)?;
    Ok(Linear { w, b })
}

impl<S: Scalar> Backbone<S> {
    /// Fresh model; `config.vocab_size` is overwritten by the tokenizer size.
    pub fn new(mut config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.vocab_size = tokenizer.len();
        config.validate()?;
        let (d, seed) = (config.hidden_size, config.seed);
        let mut params = ParamStore::new();
        let bb = ParamGroup::Backbone;
        let emb = EmbeddingIds {
            word: params.add("embeddings.word", normal_tensor(seed, "embeddings.word", &[config.vocab_size, d], INIT_STD), bb)?,
            position: params.add(
                "embeddings.position",
                normal_tensor(seed, "embeddings.position", &[config.max_seq_len, d], INIT_STD),
                bb,
            )?,
            norm_w: params.add("embeddings.norm.weight", Tensor::full(&[d], S::one()), bb)?,
            norm_b: params.add("embeddings.norm.bias", Tensor::zeros(&[d]), bb)?,
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("layers.{i}");
            layers.push(LayerIds {
                query: add_linear(&mut params, seed, &format!("{p}.attn.query"), d, d, bb)?,
                key: add_linear(&mut params, seed, &format!("{p}.attn.key"), d, d, bb)?,
                value: add_linear(&mut params, seed, &format!("{p}.attn.value"), d, d, bb)?,
                output: add_linear(&mut params, seed, &format!("{p}.attn.output"), d, d, bb)?,
                attn_norm: add_norm(&mut params, &format!("{p}.attn_norm"), d)?,
                ffn_up: add_linear(&mut params, seed, &format!("{p}.ffn.up"), d, config.ffn_size(), bb)?,
                ffn_down: add_linear(&mut params, seed, &format!("{p}.ffn.down"), config.ffn_size(), d, bb)?,
                ffn_norm: add_norm(&mut params, &format!("{p}.ffn_norm"), d)?,
            });
        }
        let lm_head = LmHeadIds {
            transform: add_linear(&mut params, seed, "lm_head.transform", d, d, bb)?,
            norm: add_norm(&mut params, "lm_head.norm", d)?,
            bias: params.add("lm_head.bias", Tensor::zeros(&[config.vocab_size]), bb)?,
        };
        let peft = vec![LayerPeft::default(); config.num_layers];
        Ok(Self { config, tokenizer, params, emb, layers, lm_head, peft, plan: TuningPlan::Full })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn plan(&self) -> &TuningPlan {
        &self.plan
    }

    pub fn prefix_len(&self) -> usize {
        match self.plan {
            TuningPlan::Prefix { prefix_len } => prefix_len,
            _ => 0,
        }
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        if batch.seq_len + self.prefix_len() > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} (+{} prefix) exceeds max_seq_len {}",
                batch.seq_len,
                self.prefix_len(),
                self.config.max_seq_len
            )));
        }
        if batch.ids.len() != batch.batch_size * batch.seq_len || batch.attention_mask.len() != batch.ids.len() {
            return Err(Error::Shape("batch ids/mask do not match [batch, seq_len]".into()));
        }
        Ok(())
    }

    fn linear<'g>(&'g self, g: &Graph<'g, S>, x: Var, lin: Linear) -> Var {
        g.add_bias(g.matmul(x, g.param(lin.w)), g.param(lin.b))
    }

    fn dropout<'g>(&'g self, g: &Graph<'g, S>, x: Var, ctx: &mut ForwardCtx) -> Var {
        let shape = g.shape(x);
        match ctx.mask::<S>(shape.iter().product(), self.config.dropout_p) {
            Some(m) => g.mul_const(x, Tensor::from_vec(&shape, m).expect("shape")),
            None => x,
        }
    }

    fn lora<'g>(&'g self, g: &Graph<'g, S>, x: Var, base: Var, lora: Option<LoraIds>) -> Var {
        match (lora, &self.plan) {
            (Some(l), TuningPlan::Lora { rank, alpha }) => {
                let delta = g.matmul(g.matmul(x, g.param(l.a)), g.param(l.b));
                g.add(base, g.scale(delta, S::of(alpha / *rank as f64)))
            }
            _ => base,
        }
    }

    fn adapter<'g>(&'g self, g: &Graph<'g, S>, x: Var, adapter: Option<AdapterIds>) -> Var {
        match adapter {
            Some(a) => {
                let h = g.relu(self.linear(g, x, a.down));
                g.add(x, self.linear(g, h, a.up))
            }
            None => x,
        }
    }

    /// Final hidden states as row-packed `[batch * seq_len, d]`.
    pub fn hidden<'g>(&'g self, g: &Graph<'g, S>, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_batch(batch)?;
        let (bsz, l) = (batch.batch_size, batch.seq_len);
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..l).collect();
        let x = g.add(g.gather_rows(g.param(self.emb.word), &ids), g.gather_rows(g.param(self.emb.position), &positions));
        let x = g.layer_norm(x, g.param(self.emb.norm_w), g.param(self.emb.norm_b), S::of(LN_EPS));
        let mut x = self.dropout(g, x, ctx);
        let key_valid = batch.key_valid();
        let causal = self.config.architecture == Architecture::Decoder;

        for (layer, peft) in self.layers.iter().zip(&self.peft) {
            let q = self.lora(g, x, self.linear(g, x, layer.query), peft.lora_query);
            let k = self.linear(g, x, layer.key);
            let v = self.lora(g, x, self.linear(g, x, layer.value), peft.lora_value);
            let prefix = peft.prefix.map(|(pk, pv)| (g.param(pk), g.param(pv)));
            let p = self.prefix_len();
            let spec = AttentionSpec {
                batch: bsz,
                seq_len: l,
                num_heads: self.config.num_heads,
                key_valid: key_valid.clone(),
                causal,
                prob_mask: ctx.mask(bsz * self.config.num_heads * l * (p + l), self.config.dropout_p),
            };
            let ctx_rows = g.attention(q, k, v, prefix, spec);
            let a = self.linear(g, ctx_rows, layer.output);
            let a = self.dropout(g, a, ctx);
            let a = self.adapter(g, a, peft.adapter_attn);
            x = g.layer_norm(g.add(x, a), g.param(layer.attn_norm.w), g.param(layer.attn_norm.b), S::of(LN_EPS));

            let f = g.gelu(self.linear(g, x, layer.ffn_up));
            let f = self.linear(g, f, layer.ffn_down);
            let f = self.dropout(g, f, ctx);
            let f = self.adapter(g, f, peft.adapter_ffn);
            x = g.layer_norm(g.add(x, f), g.param(layer.ffn_norm.w), g.param(layer.ffn_norm.b), S::of(LN_EPS));
        }
        Ok(x)
    }

    /// Vocabulary logits for selected hidden rows through the tied LM head.
    pub fn lm_logits<'g>(&'g self, g: &Graph<'g, S>, rows: Var) -> Var {
        let h = g.gelu(self.linear(g, rows, self.lm_head.transform));
        let h = g.layer_norm(h, g.param(self.lm_head.norm.w), g.param(self.lm_head.norm.b), S::of(LN_EPS));
        g.add_bias(g.matmul_nt(h, g.param(self.emb.word)), g.param(self.lm_head.bias))
    }

    /// Hidden states `[batch, seq_len, d]`.
    pub fn forward_encoder(&self, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Tensor<S>> {
        let g = Graph::new(&self.params);
        let h = self.hidden(&g, batch, ctx)?;
        let out = g.value(h).clone();
        out.reshape(&[batch.batch_size, batch.seq_len, self.config.hidden_size])
    }

    /// Masked-LM logits `[batch, seq_len, vocab]` at every position.
    pub fn forward_mlm(&self, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<Tensor<S>> {
        if self.config.architecture != Architecture::Encoder {
            return Err(Error::Unsupported("masked language modeling needs an encoder backbone".into()));
        }
        let g = Graph::new(&self.params);
        let h = self.hidden(&g, batch, ctx)?;
        let logits = self.lm_logits(&g, h);
        let out = g.value(logits).clone();
        out.reshape(&[batch.batch_size, batch.seq_len, self.config.vocab_size])
    }

    /// Sum of token losses over positions carrying an LM target, multiplied by
    /// `scale`. `None` when the batch has no targets.
    pub fn lm_loss_graph<'g>(
        &'g self,
        g: &Graph<'g, S>,
        batch: &TokenBatch,
        ctx: &mut ForwardCtx,
        scale: S,
    ) -> Result<Option<Var>> {
        let targets = batch
            .lm_targets
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("batch has no language-model targets".into()))?;
        let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let h = self.hidden(g, batch, ctx)?;
        let logits = self.lm_logits(g, g.gather_rows(h, &rows));
        let t: Vec<Option<usize>> = rows.iter().map(|&r| targets[r].map(|x| x as usize)).collect();
        Ok(Some(g.cross_entropy(logits, &t, scale)))
    }

    /// Mean LM loss over target positions; zero targets yield `0` with
    /// `empty == true`.
    pub fn lm_loss(&self, batch: &TokenBatch, ctx: &mut ForwardCtx) -> Result<LmLoss<S>> {
        let n = batch.lm_targets.as_ref().map_or(0, |t| t.iter().flatten().count());
        let g = Graph::new(&self.params);
        let scale = if n == 0 { S::one() } else { S::one() / S::of(n as f64) };
        Ok(match self.lm_loss_graph(&g, batch, ctx, scale)? {
            Some(v) => LmLoss { value: g.value(v).data()[0], targets: n, empty: false },
            None => LmLoss { value: S::zero(), targets: 0, empty: true },
        })
    }

    /// Greedy decoding. Returns `prefix` followed by generated tokens; stops
    /// before emitting EOS, after `max_new` tokens, or at `max_seq_len`.
    pub fn generate(&self, prefix: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if self.config.architecture != Architecture::Decoder {
            return Err(Error::Unsupported("generation needs a decoder backbone".into()));
        }
        if prefix.is_empty() {
            return Err(Error::EmptyPrefix);
        }
        let mut out = prefix.to_vec();
        for _ in 0..max_new {
            if out.len() + self.prefix_len() >= self.config.max_seq_len {
                break;
            }
            let batch = TokenBatch::from_sequences(std::slice::from_ref(&out));
            let g = Graph::new(&self.params);
            let h = self.hidden(&g, &batch, &mut ForwardCtx::eval())?;
            let last = g.gather_rows(h, &[out.len() - 1]);
            let logits = self.lm_logits(&g, last);
            let next = argmax(g.value(logits).data()) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmLoss<S> {
    pub value: S,
    pub targets: usize,
    /// Set when the batch had no target positions.
    pub empty: bool,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Replaces a random subset of content tokens by `[MASK]` and records the
/// originals as targets. At least one token per row is masked.
pub fn mask_tokens(batch: &mut TokenBatch, prob: f64, rng: &mut ChaCha8Rng) {
    let mut targets = vec![None; batch.ids.len()];
    for b in 0..batch.batch_size {
        let row: Vec<usize> = (0..batch.seq_len)
            .map(|l| b * batch.seq_len + l)
            .filter(|&i| batch.ids[i] > MASK)
            .collect();
        let mut picked: Vec<usize> = row.iter().copied().filter(|_| rng.gen::<f64>() < prob).collect();
        if picked.is_empty() && !row.is_empty() {
            picked.push(row[rng.gen_range(0..row.len())]);
        }
        for i in picked {
            targets[i] = Some(batch.ids[i]);
            batch.ids[i] = MASK;
        }
    }
    batch.lm_targets = Some(targets);
}

/// Next-token targets for a decoder: position `l` predicts token `l + 1`.
pub fn next_token_targets(batch: &mut TokenBatch) {
    let mut targets = vec![None; batch.ids.len()];
    for b in 0..batch.batch_size {
        for l in 0..batch.seq_len.saturating_sub(1) {
            let next = batch.ids[b * batch.seq_len + l + 1];
            if next != PAD {
                targets[b * batch.seq_len + l] = Some(next);
            }
        }
    }
    batch.lm_targets = Some(targets);
}
