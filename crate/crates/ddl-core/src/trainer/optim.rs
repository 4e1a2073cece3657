//! Decoupled-weight-decay Adam, global-norm clipping, and the warmup +
//! cosine learning-rate schedule. Update arithmetic runs in f64; parameters
//! and moments stay in the model precision.

use std::collections::HashMap;

use crate::param::Parameterized;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// Optimizer state: first/second moments per parameter (by name) plus the
/// bias-correction step counter.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub cfg: AdamConfig,
    pub step: usize,
    moments: Vec<(String, Vec<S>, Vec<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(model: &impl Parameterized<S>, cfg: AdamConfig) -> Self {
        let mut moments = Vec::new();
        model.visit_params(&mut |p| {
            moments.push((p.name.clone(), vec![S::zero(); p.numel()], vec![S::zero(); p.numel()]));
        });
        AdamW { cfg, step: 0, moments }
    }

    pub fn moments(&self) -> &[(String, Vec<S>, Vec<S>)] {
        &self.moments
    }

    pub fn restore_moments(&mut self, step: usize, moments: Vec<(String, Vec<S>, Vec<S>)>) {
        self.step = step;
        self.moments = moments;
    }

    /// Scale gradients so their global L2 norm is at most `clip`. Returns
    /// the pre-clip norm. Summation follows the fixed parameter order.
    pub fn clip_global_norm(grads: &mut HashMap<String, Vec<S>>, order: &[String], clip: f64) -> f64 {
        let mut sum_sq = 0.0f64;
        for name in order {
            if let Some(g) = grads.get(name) {
                for &v in g {
                    let x = v.to_f64();
                    sum_sq += x * x;
                }
            }
        }
        let norm = sum_sq.sqrt();
        if clip > 0.0 && norm > clip {
            let scale = S::from_f64(clip / norm);
            for name in order {
                if let Some(g) = grads.get_mut(name) {
                    for v in g.iter_mut() {
                        *v = *v * scale;
                    }
                }
            }
        }
        norm
    }

    /// One decoupled AdamW update over every parameter. Parameters flagged
    /// `decay: false` (biases, norm scales, gate biases) skip the weight
    /// decay term.
    pub fn update(&mut self, model: &mut impl Parameterized<S>, grads: &HashMap<String, Vec<S>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut idx = 0;
        model.visit_params_mut(&mut |p| {
            let (name, m, v) = &mut self.moments[idx];
            assert_eq!(name, &p.name, "optimizer state order diverged from parameter order");
            idx += 1;
            let g = grads.get(&p.name).expect("gradient missing for parameter");
            assert_eq!(g.len(), p.numel());
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            for i in 0..p.numel() {
                let gi = g[i].to_f64();
                let mi = c.beta1 * m[i].to_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].to_f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = S::from_f64(mi);
                v[i] = S::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let x = p.data[i].to_f64();
                let new = x - lr * decay * x - lr * m_hat / (v_hat.sqrt() + c.eps);
                p.data[i] = S::from_f64(new);
            }
        });
    }
}

/// Linear warmup to the peak, then cosine decay to `min_lr_frac * peak`.
/// Step 0 starts the ramp at zero.
pub fn lr_at(step: usize, total_steps: usize, warmup: usize, peak: f64, min_lr_frac: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let floor = peak * min_lr_frac;
    if total_steps <= warmup {
        return floor;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    let progress = progress.clamp(0.0, 1.0);
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
