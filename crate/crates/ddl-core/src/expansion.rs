//! Expanded-state regime: the residual stream is a matrix `(d, d_v)` per
//! token, giving `d_v` memory slots per feature while the backbone keeps its
//! vector width. Sublayers see a compressed readout, and the rank-1 delta
//! update writes the result back across all slots at once
//! (compress, process, expand).
//!
//! Four variants:
//!   - `baseline`: repeat-expansion at the embedding, causal time-axis
//!     depthwise conv + learned channel pooling as the readout;
//!   - `ec`: embedding expansion through an identity-initialized depthwise
//!     causal conv instead of plain repetition;
//!   - `cc`: readout convolves along the channel axis and consumes it
//!     (kernel size must equal `d_v`);
//!   - `cc-ec`: both.

use serde::{Deserialize, Serialize};

use crate::block::{linear_lastdim, BetaGate, MapMode, RMS_NORM_EPS};
use crate::delta::{delta_update_graph, normalize_direction_graph};
use crate::error::{Error, Result};
use crate::param::{Binder, Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::ops::rms_norm;
use crate::tensor::Tensor;

/// Expanded-state architecture variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Baseline,
    Ec,
    Cc,
    CcEc,
}

impl Variant {
    pub fn uses_embed_conv(self) -> bool {
        matches!(self, Variant::Ec | Variant::CcEc)
    }

    pub fn uses_channel_compression(self) -> bool {
        matches!(self, Variant::Cc | Variant::CcEc)
    }
}

// ── Expander ─────────────────────────────────────────────────────────

/// Maps token embeddings `(B, T, d)` to the initial expanded state
/// `(B, T, d, d_v)`.
#[derive(Debug, Clone)]
pub enum Expander<S: Scalar> {
    /// Every channel is a copy of the embedding.
    Repeat { d_v: usize },
    /// Depthwise causal conv over tokens, `d -> d * d_v` channels, identity
    /// taps at lag 0 so the start matches plain repetition.
    EmbedConv { kernels: Param<S>, kernel_size: usize, d_v: usize },
}

impl<S: Scalar> Expander<S> {
    pub fn new(prefix: &str, d: usize, d_v: usize, variant: Variant, kernel_size: usize) -> Self {
        if variant.uses_embed_conv() {
            assert!(kernel_size >= 1, "embed conv kernel size must be >= 1");
            let mut data = vec![S::zero(); d * d_v * kernel_size];
            for c in 0..d * d_v {
                data[c * kernel_size] = S::one(); // lag-0 identity tap
            }
            Expander::EmbedConv {
                kernels: Param::new(format!("{prefix}.embed_conv"), &[d, d_v, kernel_size], data, true),
                kernel_size,
                d_v,
            }
        } else {
            Expander::Repeat { d_v }
        }
    }

    pub fn d_v(&self) -> usize {
        match self {
            Expander::Repeat { d_v } => *d_v,
            Expander::EmbedConv { d_v, .. } => *d_v,
        }
    }

    /// `(B, T, d)` embeddings to `(B, T, d, d_v)` state.
    pub fn expand(&self, binder: &mut Binder<S>, emb: &Tensor<S>) -> Tensor<S> {
        assert_eq!(emb.ndim(), 3, "expander expects (batch, seq, d), got {:?}", emb.shape());
        let (b, t, d) = (emb.shape()[0], emb.shape()[1], emb.shape()[2]);
        match self {
            Expander::Repeat { d_v } => {
                emb.unsqueeze(3).broadcast_to(&[b, t, d, *d_v])
            }
            Expander::EmbedConv { kernels, kernel_size, d_v } => {
                let w = binder.bind(kernels);
                // out[b,t,i,j] = sum_s w[i,j,s] * emb[b,t-s,i]
                let emb_col = emb.unsqueeze(3); // (B,T,d,1)
                let mut acc: Option<Tensor<S>> = None;
                for s in 0..*kernel_size {
                    let w_s = w.slice_axis(2, s, s + 1).reshape(&[d, *d_v]);
                    let shifted = shift_tokens(&emb_col, s); // (B,T,d,1)
                    let term = shifted.mul(&w_s); // broadcast to (B,T,d,d_v)
                    acc = Some(match acc {
                        None => term,
                        Some(a) => a.add(&term),
                    });
                }
                acc.expect("kernel_size >= 1")
            }
        }
    }
}

impl<S: Scalar> Parameterized<S> for Expander<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        if let Expander::EmbedConv { kernels, .. } = self {
            f(kernels);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        if let Expander::EmbedConv { kernels, .. } = self {
            f(kernels);
        }
    }
}

/// Delay a `(B, T, ...)` tensor by `s` tokens with zero padding at the start.
/// Lags at or beyond the sequence length see only padding.
fn shift_tokens<S: Scalar>(x: &Tensor<S>, s: usize) -> Tensor<S> {
    if s == 0 {
        return x.clone();
    }
    let t = x.shape()[1];
    if s >= t {
        return Tensor::zeros(x.shape());
    }
    let mut pad_shape = x.shape().to_vec();
    pad_shape[1] = s;
    let zeros = Tensor::zeros(&pad_shape);
    let head = x.slice_axis(1, 0, t - s);
    Tensor::concat(1, &[&zeros, &head])
}

// ── Compressor ───────────────────────────────────────────────────────

/// Readout from the expanded state `(B, T, d, d_v)` down to `(B, T, d)`.
#[derive(Debug, Clone)]
pub enum Compressor<S: Scalar> {
    /// Causal depthwise conv over tokens (identity tap at lag 0), then
    /// pooling across channels with a learned read vector (uniform init).
    TimeAxis { kernels: Param<S>, read: Param<S>, kernel_size: usize },
    /// Learned per-feature weights consume the channel axis in one step;
    /// kernel size must equal `d_v`. Uniform init.
    ChannelAxis { kernels: Param<S>, d_v: usize },
}

impl<S: Scalar> Compressor<S> {
    pub fn new(
        prefix: &str,
        d: usize,
        d_v: usize,
        variant: Variant,
        kernel_size: usize,
    ) -> Result<Self> {
        if variant.uses_channel_compression() {
            if kernel_size != d_v {
                return Err(Error::ChannelKernelSize { kernel_size, d_v });
            }
            let uniform = S::from_f64(1.0 / d_v as f64);
            Ok(Compressor::ChannelAxis {
                kernels: Param::full(format!("{prefix}.cc_kernel"), &[d, d_v], uniform, true),
                d_v,
            })
        } else {
            assert!(kernel_size >= 1, "state conv kernel size must be >= 1");
            let mut taps = vec![S::zero(); d * d_v * kernel_size];
            for c in 0..d * d_v {
                taps[c * kernel_size] = S::one();
            }
            Ok(Compressor::TimeAxis {
                kernels: Param::new(format!("{prefix}.state_conv"), &[d, d_v, kernel_size], taps, true),
                read: Param::full(
                    format!("{prefix}.read"),
                    &[d_v],
                    S::from_f64(1.0 / d_v as f64),
                    false,
                ),
                kernel_size,
            })
        }
    }

    /// `(B, T, d, d_v)` state to `(B, T, d)` sublayer input.
    pub fn compress(&self, binder: &mut Binder<S>, x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.ndim(), 4, "compressor expects (batch, seq, d, d_v), got {:?}", x.shape());
        let (_, _, d, d_v) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        match self {
            Compressor::TimeAxis { kernels, read, kernel_size } => {
                let w = binder.bind(kernels);
                let mut acc: Option<Tensor<S>> = None;
                for s in 0..*kernel_size {
                    let w_s = w.slice_axis(2, s, s + 1).reshape(&[d, d_v]);
                    let term = shift_tokens(x, s).mul(&w_s);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => a.add(&term),
                    });
                }
                let conv = acc.expect("kernel_size >= 1"); // (B,T,d,d_v)
                let r = binder.bind(read);
                conv.mul(&r).sum_axis(3, false)
            }
            Compressor::ChannelAxis { kernels, .. } => {
                let w = binder.bind(kernels); // (d, d_v)
                x.mul(&w).sum_axis(3, false)
            }
        }
    }
}

impl<S: Scalar> Parameterized<S> for Compressor<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        match self {
            Compressor::TimeAxis { kernels, read, .. } => {
                f(kernels);
                f(read);
            }
            Compressor::ChannelAxis { kernels, .. } => f(kernels),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        match self {
            Compressor::TimeAxis { kernels, read, .. } => {
                f(kernels);
                f(read);
            }
            Compressor::ChannelAxis { kernels, .. } => f(kernels),
        }
    }
}

// ── Expanded block ───────────────────────────────────────────────────

/// Per-sublayer delta residual wiring for the expanded stream
/// `(B, T, d, d_v)`: compress, run the sublayer on the normalized readout,
/// derive `(k, beta, v)`, write back with the matrix delta update. One
/// `(k, beta, v)` triple per token, shared across all channels.
#[derive(Debug, Clone)]
pub struct ExpandedBlock<S: Scalar> {
    pub map_mode: MapMode,
    pub eps_k: f64,
    pub d_v: usize,
    compressor: Compressor<S>,
    norm_scale: Param<S>,
    gate: BetaGate<S>,
    /// `(d, d_v)`: value projection `W_v` (transposed storage for x @ W).
    w_value: Param<S>,
    /// v-map only: linear direction branch on the raw readout.
    phi_k: Option<Param<S>>,
}

impl<S: Scalar> ExpandedBlock<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        d: usize,
        d_v: usize,
        variant: Variant,
        state_kernel: usize,
        map_mode: MapMode,
        eps_k: f64,
        single_linear_gate: bool,
        gate_hidden: usize,
        beta_init: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let phi_k = match map_mode {
            MapMode::KMap => None,
            MapMode::VMap => {
                Some(Param::gaussian(format!("{prefix}.phi_k"), &[d, d], std, rng, true))
            }
        };
        Ok(ExpandedBlock {
            map_mode,
            eps_k,
            d_v,
            compressor: Compressor::new(prefix, d, d_v, variant, state_kernel)?,
            norm_scale: Param::full(format!("{prefix}.norm.scale"), &[d], S::one(), false),
            gate: BetaGate::new(prefix, d, single_linear_gate, gate_hidden, beta_init),
            w_value: Param::gaussian(format!("{prefix}.w_value"), &[d, d_v], std, rng, true),
            phi_k,
        })
    }

    pub fn gate(&self) -> &BetaGate<S> {
        &self.gate
    }

    pub fn gate_mut(&mut self) -> &mut BetaGate<S> {
        &mut self.gate
    }

    pub fn compressor(&self) -> &Compressor<S> {
        &self.compressor
    }

    /// Apply the block around `sublayer`. Returns the updated state and the
    /// per-token gate values `(B, T)`.
    pub fn forward(
        &self,
        binder: &mut Binder<S>,
        x: &Tensor<S>,
        sublayer: impl FnOnce(&mut Binder<S>, &Tensor<S>) -> Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let x_in = self.compressor.compress(binder, x); // (B,T,d)
        let scale = binder.bind(&self.norm_scale);
        let ctx = rms_norm(&x_in, &scale, RMS_NORM_EPS);
        let h = sublayer(binder, &ctx); // (B,T,d)
        let beta = self.gate.forward(binder, &ctx); // (B,T)
        let w_v = binder.bind(&self.w_value); // (d, d_v)

        let (k, v) = match self.map_mode {
            MapMode::KMap => {
                let k = normalize_direction_graph(&h, self.eps_k)?;
                let v = linear_lastdim(&x_in, &w_v); // (B,T,d_v)
                (k, v)
            }
            MapMode::VMap => {
                let v = linear_lastdim(&h, &w_v);
                let phi = binder.bind(self.phi_k.as_ref().expect("v-map has phi_k"));
                let k_tilde = linear_lastdim(&x_in, &phi);
                let k = normalize_direction_graph(&k_tilde, self.eps_k)?;
                (k, v)
            }
        };
        // The scalar regime squashes the value; the expanded regime leaves it
        // linear. d_v = 1 therefore degenerates exactly to the vector block.
        let v = if self.d_v == 1 { v.sigmoid() } else { v };

        let out = delta_update_graph(x, &k, &beta, &v);
        Ok((out, beta))
    }
}

impl<S: Scalar> Parameterized<S> for ExpandedBlock<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.compressor.visit_params(f);
        f(&self.norm_scale);
        self.gate.visit_params(f);
        f(&self.w_value);
        if let Some(p) = &self.phi_k {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.compressor.visit_params_mut(f);
        f(&mut self.norm_scale);
        self.gate.visit_params_mut(f);
        f(&mut self.w_value);
        if let Some(p) = &mut self.phi_k {
            f(p);
        }
    }
}
