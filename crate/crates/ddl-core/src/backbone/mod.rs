//! Pre-norm transformer backbone: RMSNorm, rotary multi-head attention with
//! query/key normalization, SwiGLU MLP. The residual rule around each
//! sublayer is switchable between the standard additive shortcut and the
//! delta residual update, without touching any sublayer parameter shape.

pub mod attention;
pub mod mlp;
pub mod model;

pub use attention::{Attention, RopeCache};
pub use mlp::{hidden_width, Mlp};
pub use model::{ForwardOutput, Model};

use serde::{Deserialize, Serialize};

use crate::block::MapMode;
use crate::error::{Error, Result};
use crate::expansion::Variant;
use crate::param::{Binder, Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{ops::rms_norm, Tensor};

/// Residual rule applied around every sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    /// `x + F(norm(x))`.
    #[default]
    Baseline,
    /// Gated rank-1 delta update.
    Ddl,
}

/// Which sublayers get the delta update in ddl mode (`d_v = 1` only;
/// expanded states require both).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SublayerSelect {
    #[default]
    Both,
    Attention,
    Mlp,
}

impl SublayerSelect {
    pub fn covers_attention(self) -> bool {
        matches!(self, SublayerSelect::Both | SublayerSelect::Attention)
    }

    pub fn covers_mlp(self) -> bool {
        matches!(self, SublayerSelect::Both | SublayerSelect::Mlp)
    }
}

/// Delta-residual settings, nested under the `ddl` config key.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DdlConfig {
    pub d_v: usize,
    pub map_mode: MapMode,
    pub variant: Variant,
    /// Time-axis readout conv kernel (must equal `d_v` for the cc variants).
    pub state_shortconv_kernel_size: usize,
    /// Embedding-expansion conv kernel (ec variants).
    pub input_embed_shortconv_kernel_size: usize,
    pub beta_init: f64,
    pub eps_k: f64,
    pub beta_single_linear: bool,
    pub beta_hidden_size: usize,
    pub sublayers: SublayerSelect,
    /// When set, the scalar value projection reads the normalized context
    /// instead of the raw residual stream.
    pub v_from_context: bool,
}

impl Default for DdlConfig {
    fn default() -> Self {
        DdlConfig {
            d_v: 1,
            map_mode: MapMode::KMap,
            variant: Variant::Baseline,
            state_shortconv_kernel_size: 4,
            input_embed_shortconv_kernel_size: 4,
            beta_init: 1.0,
            eps_k: 1e-6,
            beta_single_linear: true,
            beta_hidden_size: 16,
            sublayers: SublayerSelect::Both,
            v_from_context: false,
        }
    }
}

/// Architecture settings. Serialized as JSON inside checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub residual_mode: ResidualMode,
    pub ddl: DdlConfig,
    pub tie_embeddings: bool,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            vocab_size: 256,
            seq_len: 128,
            residual_mode: ResidualMode::Baseline,
            ddl: DdlConfig::default(),
            tie_embeddings: false,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return fail("d, n_layers, n_heads and head_dim must be positive".into());
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim must be even for rotary embedding, got {}", self.head_dim));
        }
        if self.vocab_size == 0 || self.seq_len == 0 {
            return fail("vocab_size and seq_len must be positive".into());
        }
        if self.ddl.d_v == 0 {
            return fail("ddl.d_v must be >= 1".into());
        }
        if !(self.ddl.beta_init > 0.0 && self.ddl.beta_init < 2.0) {
            return fail(format!("ddl.beta_init must lie in (0, 2), got {}", self.ddl.beta_init));
        }
        if self.ddl.eps_k < 0.0 {
            return fail("ddl.eps_k must be non-negative".into());
        }
        if self.residual_mode == ResidualMode::Ddl && self.ddl.d_v > 1 {
            if self.ddl.variant.uses_channel_compression()
                && self.ddl.state_shortconv_kernel_size != self.ddl.d_v
            {
                return fail(format!(
                    "channel-axis compression requires ddl.state_shortconv_kernel_size = d_v ({}), got {}",
                    self.ddl.d_v, self.ddl.state_shortconv_kernel_size
                ));
            }
            if self.ddl.sublayers != SublayerSelect::Both {
                return fail("expanded states (d_v > 1) require ddl.sublayers = both".into());
            }
        }
        if !self.ddl.beta_single_linear && self.ddl.beta_hidden_size == 0 {
            return fail("two-layer gate requires ddl.beta_hidden_size >= 1".into());
        }
        Ok(())
    }

    pub fn expanded(&self) -> bool {
        self.residual_mode == ResidualMode::Ddl && self.ddl.d_v > 1
    }
}

/// RMS normalization with a learned per-feature scale.
#[derive(Debug, Clone)]
pub struct RmsNorm<S: Scalar> {
    scale: Param<S>,
}

impl<S: Scalar> RmsNorm<S> {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        RmsNorm { scale: Param::full(name, &[d], S::one(), false) }
    }

    pub fn forward(&self, binder: &mut Binder<S>, x: &Tensor<S>) -> Tensor<S> {
        let scale = binder.bind(&self.scale);
        rms_norm(x, &scale, crate::block::RMS_NORM_EPS)
    }
}

impl<S: Scalar> Parameterized<S> for RmsNorm<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.scale);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_json() {
        let mut cfg = ModelConfig::default();
        cfg.residual_mode = ResidualMode::Ddl;
        cfg.ddl.d_v = 4;
        cfg.ddl.variant = Variant::CcEc;
        cfg.ddl.state_shortconv_kernel_size = 4;
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"variant\":\"cc-ec\""), "kebab-case variant key: {json}");
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.ddl.d_v, 4);
        assert_eq!(back.ddl.variant, Variant::CcEc);
    }

    #[test]
    fn cc_kernel_must_match_dv() {
        let mut cfg = ModelConfig::default();
        cfg.residual_mode = ResidualMode::Ddl;
        cfg.ddl.d_v = 4;
        cfg.ddl.variant = Variant::Cc;
        cfg.ddl.state_shortconv_kernel_size = 3;
        assert!(cfg.validate().is_err());
        cfg.ddl.state_shortconv_kernel_size = 4;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn defaults_validate() {
        assert!(ModelConfig::default().validate().is_ok());
    }
}
