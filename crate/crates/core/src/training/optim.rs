use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay. Decay applies to matrices only; biases,
/// norms and other vectors are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Only trainable parameters with a
    /// gradient move; frozen tensors are never written.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one, eps) = (S::one(), S::of(self.eps));
        let step_size = S::of(lr / bc1);
        let bc2_sqrt = S::of(bc2.sqrt());
        let mut ids: Vec<&ParamId> = grads.iter().map(|(id, _)| id).collect();
        ids.sort();
        for &id in ids {
            let g = grads.get(id).expect("listed gradient");
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = if p.value.rank() >= 2 { S::of(lr * self.weight_decay) } else { S::zero() };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - decay * *w;
                *w = *w - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Linear warmup over the first `warmup` updates, then linear decay towards
/// zero at `total`. `step` counts from 1.
pub fn linear_schedule(base_lr: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if warmup > 0 && step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let rest = total.saturating_sub(warmup) + 1;
    base_lr * total.saturating_sub(step).saturating_add(1) as f64 / rest as f64
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm && norm > 0.0 {
        let s = S::of(max_norm / norm);
        grads.scale(s);
    }
    norm
}
