//! Decoupled-weight-decay adaptive-moment optimizer and the cosine
//! learning-rate schedule.

use crate::autodiff::GradMap;
use crate::backbone::{AdapterParams, ModelParams};
use ndarray::Array2;
use std::collections::BTreeMap;

/// AdamW with bias-corrected moments; weight decay is decoupled from the
/// gradient term.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Supervised-stage constants: beta2 = 0.95, weight decay 0.05.
    pub fn sft_default() -> Self {
        Self::new(0.9, 0.95, 1e-8, 0.05)
    }

    /// RL-stage constants: beta2 = 0.999, weight decay 1e-4.
    pub fn rl_default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 1e-4)
    }

    fn apply_one(&mut self, name: &str, target: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(grad.raw_dim()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(grad.raw_dim()));
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (mi, vi)) in target
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }

    /// One update over full model parameters. Gradient keys must name
    /// parameter arrays.
    pub fn step_model(&mut self, params: &mut ModelParams, grads: &GradMap, lr: f64) {
        self.step += 1;
        for (name, grad) in grads {
            self.apply_one(name, params.array_mut(name), grad, lr);
        }
    }

    /// One update over adapter factors. Gradient keys use the
    /// `adapter.{target}.{down|up}` naming of the forward binder.
    pub fn step_adapter(&mut self, adapter: &mut AdapterParams, grads: &GradMap, lr: f64) {
        self.step += 1;
        for (name, grad) in grads {
            if let Some(target) = adapter.factor_mut(name) {
                self.apply_one(name, target, grad, lr);
            }
        }
    }
}

/// Linear warmup to `peak`, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, peak: f64, warmup_steps: u64) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / decay_span).clamp(0.0, 1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, BackboneConfig};

    fn tiny_params() -> ModelParams {
        let cfg = BackboneConfig {
            layers: 1,
            width: 8,
            heads: 2,
            vocab: 32,
            token_channels: 3,
            max_refs: 2,
            rope_base: 100.0,
        };
        init_params(&cfg, 0).unwrap()
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut params = tiny_params();
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.0);
        let loss = |p: &ModelParams| -> f64 {
            p.array("layers.0.attn.wq").iter().map(|v| v * v).sum()
        };
        let initial = loss(&params);
        for _ in 0..200 {
            let grad = params.array("layers.0.attn.wq").mapv(|v| 2.0 * v);
            let mut grads = GradMap::new();
            grads.insert("layers.0.attn.wq".to_string(), grad);
            opt.step_model(&mut params, &grads, 1e-2);
        }
        assert!(loss(&params) < initial * 0.01);
    }

    #[test]
    fn weight_decay_shrinks_untouched_weights() {
        let mut params = tiny_params();
        let before = params.array("layers.0.attn.wk").mapv(f64::abs).sum();
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.5);
        let mut grads = GradMap::new();
        grads.insert(
            "layers.0.attn.wk".to_string(),
            Array2::zeros(params.array("layers.0.attn.wk").raw_dim()),
        );
        for _ in 0..10 {
            opt.step_model(&mut params, &grads, 0.1);
        }
        let after = params.array("layers.0.attn.wk").mapv(f64::abs).sum();
        assert!(after < before * 0.7);
    }

    #[test]
    fn cosine_schedule_shape() {
        let peak = 3e-4;
        assert!(cosine_lr(0, 1000, peak, 100) < peak * 0.02);
        assert!((cosine_lr(99, 1000, peak, 100) - peak).abs() < 1e-12);
        let mid = cosine_lr(550, 1000, peak, 100);
        assert!(mid < peak && mid > 0.0);
        assert!(cosine_lr(999, 1000, peak, 100) <= cosine_lr(100, 1000, peak, 100));
        assert!(cosine_lr(1000, 1000, peak, 100) < 1e-8);
    }
}
