//! The full byte-level language model: embedding, a stack of
//! attention/MLP sublayers with switchable residual wiring, final norm and
//! vocabulary head. With `d_v > 1` the residual stream is the expanded
//! matrix state and sublayers read a compressed view of it; the final
//! readout averages the value channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Attention, Mlp, ModelConfig, ResidualMode, RmsNorm, RopeCache};
use crate::block::DeltaBlock;
use crate::error::Result;
use crate::expansion::{Expander, ExpandedBlock};
use crate::param::{Binder, Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Near-zero init for embedding and head keeps untrained logits flat.
const EMBED_STD: f64 = 0.02;

/// Residual wiring around one sublayer.
#[derive(Debug, Clone)]
enum ResidualPath<S: Scalar> {
    Additive { norm: RmsNorm<S> },
    Vector { block: DeltaBlock<S> },
    Expanded { block: ExpandedBlock<S> },
}

impl<S: Scalar> ResidualPath<S> {
    fn forward(
        &self,
        binder: &mut Binder<S>,
        x: &Tensor<S>,
        sublayer: impl FnOnce(&mut Binder<S>, &Tensor<S>) -> Tensor<S>,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        match self {
            ResidualPath::Additive { norm } => {
                let ctx = norm.forward(binder, x);
                let f = sublayer(binder, &ctx);
                Ok((x.add(&f), None))
            }
            ResidualPath::Vector { block } => {
                let (out, beta) = block.forward(binder, x, sublayer)?;
                Ok((out, Some(beta)))
            }
            ResidualPath::Expanded { block } => {
                let (out, beta) = block.forward(binder, x, sublayer)?;
                Ok((out, Some(beta)))
            }
        }
    }
}

impl<S: Scalar> Parameterized<S> for ResidualPath<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        match self {
            ResidualPath::Additive { norm } => norm.visit_params(f),
            ResidualPath::Vector { block } => block.visit_params(f),
            ResidualPath::Expanded { block } => block.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        match self {
            ResidualPath::Additive { norm } => norm.visit_params_mut(f),
            ResidualPath::Vector { block } => block.visit_params_mut(f),
            ResidualPath::Expanded { block } => block.visit_params_mut(f),
        }
    }
}

#[derive(Debug, Clone)]
struct Layer<S: Scalar> {
    attn: Attention<S>,
    mlp: Mlp<S>,
    attn_path: ResidualPath<S>,
    mlp_path: ResidualPath<S>,
}

/// Per-forward auxiliary signals.
#[derive(Debug, Clone)]
pub struct ForwardOutput<S: Scalar> {
    pub logits: Tensor<S>,
    /// Mean gate value per layer (averaged over tokens and the layer's
    /// gated sublayers); empty in additive mode.
    pub mean_beta_per_layer: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    embedding: Param<S>,
    expander: Option<Expander<S>>,
    layers: Vec<Layer<S>>,
    final_norm: RmsNorm<S>,
    head: Option<Param<S>>,
    rope: RopeCache<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let embedding =
            Param::gaussian("embedding", &[cfg.vocab_size, d], EMBED_STD, &mut rng, true);
        let expander = cfg.expanded().then(|| {
            Expander::new(
                "expander",
                d,
                cfg.ddl.d_v,
                cfg.ddl.variant,
                cfg.ddl.input_embed_shortconv_kernel_size,
            )
        });

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let attn = Attention::new(&format!("layer{l}.attn"), d, cfg.n_heads, cfg.head_dim, &mut rng);
            let mlp = Mlp::new(&format!("layer{l}.mlp"), d, &mut rng);
            let make_path = |name: &str, covered: bool, rng: &mut ChaCha8Rng| -> Result<ResidualPath<S>> {
                let prefix = format!("layer{l}.{name}");
                if cfg.residual_mode == ResidualMode::Baseline || !covered {
                    return Ok(ResidualPath::Additive {
                        norm: RmsNorm::new(format!("{prefix}.norm.scale"), d),
                    });
                }
                if cfg.expanded() {
                    Ok(ResidualPath::Expanded {
                        block: ExpandedBlock::new(
                            &format!("{prefix}.ddl"),
                            d,
                            cfg.ddl.d_v,
                            cfg.ddl.variant,
                            cfg.ddl.state_shortconv_kernel_size,
                            cfg.ddl.map_mode,
                            cfg.ddl.eps_k,
                            cfg.ddl.beta_single_linear,
                            cfg.ddl.beta_hidden_size,
                            cfg.ddl.beta_init,
                            rng,
                        )?,
                    })
                } else {
                    Ok(ResidualPath::Vector {
                        block: DeltaBlock::new(
                            &format!("{prefix}.ddl"),
                            d,
                            cfg.ddl.map_mode,
                            cfg.ddl.eps_k,
                            cfg.ddl.beta_single_linear,
                            cfg.ddl.beta_hidden_size,
                            cfg.ddl.beta_init,
                            cfg.ddl.v_from_context,
                            rng,
                        ),
                    })
                }
            };
            let attn_path = make_path("attn_res", cfg.ddl.sublayers.covers_attention(), &mut rng)?;
            let mlp_path = make_path("mlp_res", cfg.ddl.sublayers.covers_mlp(), &mut rng)?;
            layers.push(Layer { attn, mlp, attn_path, mlp_path });
        }

        let final_norm = RmsNorm::new("final_norm.scale", d);
        let head = if cfg.tie_embeddings {
            None
        } else {
            Some(Param::gaussian("head", &[d, cfg.vocab_size], EMBED_STD, &mut rng, true))
        };
        let rope = RopeCache::new(cfg.seq_len, cfg.head_dim, cfg.rope_base);
        Ok(Model { cfg: cfg.clone(), embedding, expander, layers, final_norm, head, rope })
    }

    /// Logits over `(batch, seq)` token ids.
    pub fn forward(
        &self,
        binder: &mut Binder<S>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<ForwardOutput<S>> {
        assert_eq!(tokens.len(), batch * seq, "token count does not fill (batch, seq)");
        assert!(
            seq <= self.cfg.seq_len,
            "sequence overflow: seq {seq} exceeds configured seq_len {}",
            self.cfg.seq_len
        );
        let table = binder.bind(&self.embedding);
        let emb = Tensor::embedding(&table, tokens, &[batch, seq]);

        let mut mean_beta = Vec::new();
        let mut stream = match &self.expander {
            Some(exp) => exp.expand(binder, &emb),
            None => emb,
        };
        for layer in &self.layers {
            let mut betas: Vec<f64> = Vec::new();
            let (next, beta) = layer.attn_path.forward(binder, &stream, |b, ctx| {
                layer.attn.forward(b, ctx, &self.rope)
            })?;
            if let Some(bt) = beta {
                betas.push(mean_of(&bt));
            }
            stream = next;
            let (next, beta) =
                layer.mlp_path.forward(binder, &stream, |b, ctx| layer.mlp.forward(b, ctx))?;
            if let Some(bt) = beta {
                betas.push(mean_of(&bt));
            }
            stream = next;
            if !betas.is_empty() {
                mean_beta.push(betas.iter().sum::<f64>() / betas.len() as f64);
            }
        }

        // Expanded states read out through the channel mean before the head.
        let vector = if stream.ndim() == 4 { stream.mean_axis(3, false) } else { stream };
        let normed = self.final_norm.forward(binder, &vector);
        let logits = match &self.head {
            Some(head) => {
                let w = binder.bind(head);
                normed.matmul(&w)
            }
            None => {
                let table = binder.bind(&self.embedding);
                normed.matmul(&table.swap_axes(0, 1))
            }
        };
        Ok(ForwardOutput { logits, mean_beta_per_layer: mean_beta })
    }

    /// Mean next-token cross-entropy over the batch.
    pub fn loss(
        &self,
        binder: &mut Binder<S>,
        tokens: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<(Tensor<S>, Vec<f64>)> {
        let out = self.forward(binder, tokens, batch, seq)?;
        let flat = out.logits.reshape(&[batch * seq, self.cfg.vocab_size]);
        Ok((Tensor::cross_entropy_mean(&flat, targets), out.mean_beta_per_layer))
    }

    /// Loss as a plain number on a throwaway tape (finite differences, eval).
    pub fn loss_value(
        &self,
        tokens: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<f64> {
        let tape: Tape<S> = Tape::new();
        let mut binder = Binder::new(&tape);
        let (loss, _) = self.loss(&mut binder, tokens, targets, batch, seq)?;
        Ok(loss.item().to_f64())
    }

    /// Saturate every gate's output bias (test/diagnostic hook).
    pub fn set_all_gate_biases(&mut self, logit: f64) {
        for layer in &mut self.layers {
            for path in [&mut layer.attn_path, &mut layer.mlp_path] {
                match path {
                    ResidualPath::Vector { block } => block.gate_mut().set_output_bias(logit),
                    ResidualPath::Expanded { block } => block.gate_mut().set_output_bias(logit),
                    ResidualPath::Additive { .. } => {}
                }
            }
        }
    }

    pub fn param_data(&self, name: &str) -> Option<Vec<S>> {
        let mut found = None;
        self.visit_params(&mut |p| {
            if p.name == name {
                found = Some(p.data.clone());
            }
        });
        found
    }
}

fn mean_of<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data().iter().map(|&v| Scalar::to_f64(v)).sum::<f64>() / t.numel() as f64
}

impl<S: Scalar> Parameterized<S> for Model<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.embedding);
        if let Some(e) = &self.expander {
            e.visit_params(f);
        }
        for layer in &self.layers {
            layer.attn.visit_params(f);
            layer.attn_path.visit_params(f);
            layer.mlp.visit_params(f);
            layer.mlp_path.visit_params(f);
        }
        self.final_norm.visit_params(f);
        if let Some(h) = &self.head {
            f(h);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.embedding);
        if let Some(e) = &mut self.expander {
            e.visit_params_mut(f);
        }
        for layer in &mut self.layers {
            layer.attn.visit_params_mut(f);
            layer.attn_path.visit_params_mut(f);
            layer.mlp.visit_params_mut(f);
            layer.mlp_path.visit_params_mut(f);
        }
        self.final_norm.visit_params_mut(f);
        if let Some(h) = &mut self.head {
            f(h);
        }
    }
}
