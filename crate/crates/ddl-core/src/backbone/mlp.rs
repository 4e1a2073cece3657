//! Gated (SwiGLU-style) feed-forward sublayer:
//! `W_down( silu(W_gate x) * (W_up x) )`.

use crate::param::{Binder, Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hidden width `round(8/3 * d)` snapped to the nearest multiple of 8.
pub fn hidden_width(d: usize) -> usize {
    let raw = 8.0 * d as f64 / 3.0;
    (((raw / 8.0).round() as usize).max(1)) * 8
}

#[derive(Debug, Clone)]
pub struct Mlp<S: Scalar> {
    w_gate: Param<S>,
    w_up: Param<S>,
    w_down: Param<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(prefix: &str, d: usize, rng: &mut impl rand::Rng) -> Self {
        let h = hidden_width(d);
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = 1.0 / (h as f64).sqrt();
        Mlp {
            w_gate: Param::gaussian(format!("{prefix}.w_gate"), &[d, h], std_in, rng, true),
            w_up: Param::gaussian(format!("{prefix}.w_up"), &[d, h], std_in, rng, true),
            w_down: Param::gaussian(format!("{prefix}.w_down"), &[h, d], std_out, rng, true),
        }
    }

    pub fn forward(&self, binder: &mut Binder<S>, x: &Tensor<S>) -> Tensor<S> {
        let w_gate = binder.bind(&self.w_gate);
        let w_up = binder.bind(&self.w_up);
        let w_down = binder.bind(&self.w_down);
        x.matmul(&w_gate).silu().mul(&x.matmul(&w_up)).matmul(&w_down)
    }
}

impl<S: Scalar> Parameterized<S> for Mlp<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.w_gate);
        f(&self.w_up);
        f(&self.w_down);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w_gate);
        f(&mut self.w_up);
        f(&mut self.w_down);
    }
}
