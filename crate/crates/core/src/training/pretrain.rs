use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, linear_schedule, AdamW};
use super::trainer::TrainOptions;
use crate::autograd::Graph;
use crate::backbone::{mask_tokens, next_token_targets, Architecture, Backbone, ForwardCtx, TokenBatch, BOS, EOS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Language-model pre-training over raw text: masked-token prediction for
/// encoders, next-token prediction for decoders. Returns the loss of every
/// update. Gradient accumulation is ignored here.
pub fn pretrain_lm<S: Scalar>(
    backbone: &mut Backbone<S>,
    corpus: &[String],
    opts: &TrainOptions,
    mask_prob: f64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty pre-training corpus".into()));
    }
    let max_len = backbone.config().max_seq_len - backbone.prefix_len();
    let arch = backbone.config().architecture;
    let seqs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|t| {
            let mut ids = vec![BOS];
            ids.extend(backbone.tokenizer().encode_words(t));
            ids.truncate(max_len - 1);
            ids.push(EOS);
            ids
        })
        .collect();

    let bs = opts.batch_size.max(1);
    let per_epoch = seqs.len().div_ceil(bs);
    let total = ((opts.num_train_epochs * per_epoch as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut optimizer = AdamW::<S>::new(opts.weight_decay);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut losses = Vec::with_capacity(total);

    for step in 1..=total {
        let i = (step - 1) % per_epoch;
        if i == 0 && opts.shuffle {
            order.shuffle(&mut rng);
        }
        let rows: Vec<Vec<u32>> = order[i * bs..((i + 1) * bs).min(seqs.len())].iter().map(|&j| seqs[j].clone()).collect();
        let mut batch = TokenBatch::from_sequences(&rows);
        match arch {
            Architecture::Encoder => mask_tokens(&mut batch, mask_prob, &mut rng),
            Architecture::Decoder => next_token_targets(&mut batch),
        }
        let n = batch.lm_targets.as_ref().map_or(0, |t| t.iter().flatten().count());
        if n == 0 {
            continue;
        }
        let mut ctx = ForwardCtx::train(opts.seed ^ step as u64);
        let g = Graph::new(backbone.params());
        let Some(l) = backbone.lm_loss_graph(&g, &batch, &mut ctx, S::one() / S::of(n as f64))? else { continue };
        let loss = g.value(l).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = g.backward(l);
        if let Some(max) = opts.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let lr = linear_schedule(opts.learning_rate, step, total, opts.warmup_ratio);
        optimizer.step(backbone.params_mut(), &grads, lr);
        losses.push(loss);
        if step % 50 == 0 {
            log::info!("pretrain step {step}/{total}: loss {loss:.4}");
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ModelConfig, Tokenizer};

    #[test]
    fn loss_goes_down() {
        let corpus: Vec<String> = (0..40).map(|i| format!("the movie was {} .", if i % 2 == 0 { "great" } else { "bad" })).collect();
        let tok = Tokenizer::build(&corpus, 100).unwrap();
        for arch in [Architecture::Encoder, Architecture::Decoder] {
            let cfg = ModelConfig { hidden_size: 16, num_layers: 1, num_heads: 2, max_seq_len: 16, dropout_p: 0.0, architecture: arch, ..Default::default() };
            let mut bb = Backbone::<f64>::new(cfg, tok.clone()).unwrap();
            let opts = TrainOptions { learning_rate: 1e-2, num_train_epochs: 10.0, batch_size: 8, ..Default::default() };
            let losses = pretrain_lm(&mut bb, &corpus, &opts, 0.3).unwrap();
            let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
            let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
            assert!(tail < head * 0.7, "{arch:?}: {head} -> {tail}");
        }
    }
}
