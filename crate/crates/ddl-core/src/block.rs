//! Vector-regime (`d_v = 1`) delta residual block.
//!
//! Replaces the additive shortcut of one pre-norm sublayer with the gated
//! rank-1 update `x' = x + beta (v - k^T x) k`. The sublayer output is wired
//! either as the write direction (k-map) or as the write content (v-map);
//! the gate squashes a scalar logit of the normalized context into (0, 2).

use serde::{Deserialize, Serialize};

use crate::delta::{delta_update_graph, normalize_direction_graph};
use crate::error::Result;
use crate::param::{Binder, Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::ops::rms_norm;
use crate::tensor::Tensor;

pub const RMS_NORM_EPS: f64 = 1e-6;

/// Which role the backbone sublayer output plays in the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    /// Sublayer output is the raw direction; value comes from a linear
    /// projection of the residual stream.
    KMap,
    /// Sublayer output is the value; direction comes from an auxiliary
    /// linear branch on the context.
    VMap,
}

// ── Gate ─────────────────────────────────────────────────────────────

/// Scalar gate `beta = 2 sigma(logit)` with logits computed in f64.
///
/// At init the input weights are zero and the bias is `logit(beta_init / 2)`
/// (clamped), so `beta` starts at `beta_init` regardless of the context.
#[derive(Debug, Clone)]
pub struct BetaGate<S: Scalar> {
    pub beta_init: f64,
    single_linear: bool,
    w: Param<S>,       // single: (d,); two-layer: (d, hidden)
    bias: Param<S>,    // single: output bias; two-layer: hidden bias (hidden,)
    w_out: Option<Param<S>>, // two-layer: (hidden,)
    bias_out: Option<Param<S>>, // two-layer: (1,)
}

const LOGIT_CLAMP: f64 = 30.0;

fn init_logit(beta_init: f64) -> f64 {
    assert!(beta_init > 0.0 && beta_init < 2.0, "beta_init must lie in (0, 2), got {beta_init}");
    let p = beta_init / 2.0;
    (p / (1.0 - p)).ln().clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

impl<S: Scalar> BetaGate<S> {
    pub fn new(prefix: &str, d: usize, single_linear: bool, hidden: usize, beta_init: f64) -> Self {
        let bias0 = S::from_f64(init_logit(beta_init));
        if single_linear {
            BetaGate {
                beta_init,
                single_linear: true,
                w: Param::zeros(format!("{prefix}.gate.w"), &[d], true),
                bias: Param::new(format!("{prefix}.gate.b"), &[1], vec![bias0], false),
                w_out: None,
                bias_out: None,
            }
        } else {
            BetaGate {
                beta_init,
                single_linear: false,
                w: Param::zeros(format!("{prefix}.gate.w1"), &[d, hidden], true),
                bias: Param::zeros(format!("{prefix}.gate.b1"), &[hidden], false),
                w_out: Some(Param::zeros(format!("{prefix}.gate.w2"), &[hidden], true)),
                bias_out: Some(Param::new(format!("{prefix}.gate.b2"), &[1], vec![bias0], false)),
            }
        }
    }

    /// `beta` over the leading axes of `ctx` (last axis consumed).
    pub fn forward(&self, binder: &mut Binder<S>, ctx: &Tensor<S>) -> Tensor<S> {
        if self.single_linear {
            let w = binder.bind(&self.w);
            let b = binder.bind(&self.bias);
            Tensor::gate_single(ctx, &w, &b)
        } else {
            let w1 = binder.bind(&self.w);
            let b1 = binder.bind(&self.bias);
            let w2 = binder.bind(self.w_out.as_ref().expect("two-layer gate"));
            let b2 = binder.bind(self.bias_out.as_ref().expect("two-layer gate"));
            Tensor::gate_two_layer(ctx, &w1, &b1, &w2, &b2)
        }
    }

    /// Test hook: overwrite the output bias so the gate saturates.
    pub fn set_output_bias(&mut self, logit: f64) {
        let slot = match &mut self.bias_out {
            Some(b) => b,
            None => &mut self.bias,
        };
        slot.data = vec![S::from_f64(logit)];
    }
}

impl<S: Scalar> Parameterized<S> for BetaGate<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.w);
        f(&self.bias);
        if let Some(p) = &self.w_out {
            f(p);
        }
        if let Some(p) = &self.bias_out {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.bias);
        if let Some(p) = &mut self.w_out {
            f(p);
        }
        if let Some(p) = &mut self.bias_out {
            f(p);
        }
    }
}

// ── Block ────────────────────────────────────────────────────────────

/// Per-sublayer delta residual wiring for a vector stream `(..., d)`.
#[derive(Debug, Clone)]
pub struct DeltaBlock<S: Scalar> {
    pub map_mode: MapMode,
    pub eps_k: f64,
    /// Open-question flag: when set, the value projection reads the
    /// normalized context instead of the raw residual stream.
    pub v_from_context: bool,
    norm_scale: Param<S>,
    gate: BetaGate<S>,
    /// k-map: value projection `w_v` over the stream. v-map: readout `w_p`
    /// over the sublayer output.
    w_value: Param<S>,
    /// v-map only: linear direction branch `phi_k`.
    phi_k: Option<Param<S>>,
}

impl<S: Scalar> DeltaBlock<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        d: usize,
        map_mode: MapMode,
        eps_k: f64,
        single_linear_gate: bool,
        gate_hidden: usize,
        beta_init: f64,
        v_from_context: bool,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let (w_value, phi_k) = match map_mode {
            MapMode::KMap => {
                (Param::gaussian(format!("{prefix}.w_v"), &[d], std, rng, true), None)
            }
            MapMode::VMap => (
                Param::gaussian(format!("{prefix}.w_p"), &[d], std, rng, true),
                Some(Param::gaussian(format!("{prefix}.phi_k"), &[d, d], std, rng, true)),
            ),
        };
        DeltaBlock {
            map_mode,
            eps_k,
            v_from_context,
            norm_scale: Param::full(format!("{prefix}.norm.scale"), &[d], S::one(), false),
            gate: BetaGate::new(prefix, d, single_linear_gate, gate_hidden, beta_init),
            w_value,
            phi_k,
        }
    }

    pub fn gate(&self) -> &BetaGate<S> {
        &self.gate
    }

    pub fn gate_mut(&mut self) -> &mut BetaGate<S> {
        &mut self.gate
    }

    /// Apply the block around `sublayer`. Returns the updated stream and the
    /// gate values (leading shape of `x`).
    pub fn forward(
        &self,
        binder: &mut Binder<S>,
        x: &Tensor<S>,
        sublayer: impl FnOnce(&mut Binder<S>, &Tensor<S>) -> Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let d = *x.shape().last().expect("stream needs a last axis");
        let scale = binder.bind(&self.norm_scale);
        let ctx = rms_norm(x, &scale, RMS_NORM_EPS);
        let beta = self.gate.forward(binder, &ctx);
        let w_value = binder.bind(&self.w_value);

        let (k, v) = match self.map_mode {
            MapMode::KMap => {
                let k_tilde = sublayer(binder, &ctx);
                let k = normalize_direction_graph(&k_tilde, self.eps_k)?;
                let v_src = if self.v_from_context { &ctx } else { x };
                let nd = v_src.ndim();
                let v = v_src.mul(&w_value).sum_axis(nd - 1, false).sigmoid();
                (k, v)
            }
            MapMode::VMap => {
                let h = sublayer(binder, &ctx);
                let nd = h.ndim();
                let v = h.mul(&w_value).sum_axis(nd - 1, false).sigmoid();
                let phi = binder.bind(self.phi_k.as_ref().expect("v-map has phi_k"));
                let k_tilde = linear_lastdim(&ctx, &phi);
                let k = normalize_direction_graph(&k_tilde, self.eps_k)?;
                (k, v)
            }
        };

        // Lift to a one-column matrix state, update, drop the column axis.
        let x_col = x.unsqueeze(x.ndim());
        let v_col = v.unsqueeze(v.ndim());
        let out = delta_update_graph(&x_col, &k, &beta, &v_col);
        let _ = d;
        Ok((out.reshape(x.shape()), beta))
    }
}

impl<S: Scalar> Parameterized<S> for DeltaBlock<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.norm_scale);
        self.gate.visit_params(f);
        f(&self.w_value);
        if let Some(p) = &self.phi_k {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.norm_scale);
        self.gate.visit_params_mut(f);
        f(&mut self.w_value);
        if let Some(p) = &mut self.phi_k {
            f(p);
        }
    }
}

/// `x @ w` over the last axis, tolerating rank-1 `x`.
pub(crate) fn linear_lastdim<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Tensor<S> {
    if x.ndim() == 1 {
        let d = x.shape()[0];
        let n = w.shape()[1];
        x.reshape(&[1, d]).matmul(w).reshape(&[n])
    } else {
        x.matmul(w)
    }
}
