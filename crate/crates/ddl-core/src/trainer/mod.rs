//! Desk-scale training loop: deterministic byte-level batches, AdamW with
//! warmup + cosine schedule, global-norm clipping, periodic evaluation,
//! metrics CSV and resumable checkpoints.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;

pub use data::{Batch, BatchSampler, Corpus, BYTE_VOCAB};
pub use metrics::{MetricsRow, MetricsWriter};
pub use optim::{lr_at, AdamConfig, AdamW};

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::param::{Binder, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Element type selection for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine floor as a fraction of the peak rate.
    pub min_lr_frac: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            seq_len: 128,
            lr: 1e-3,
            warmup_steps: 100,
            min_lr_frac: 0.1,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_interval: 200,
            eval_batches: 20,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("steps, batch_size and seq_len must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::Config("min_lr_frac must lie in [0, 1]".into()));
        }
        if self.eval_batches == 0 {
            return Err(Error::Config("eval_batches must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_beta: Vec<f64>,
}

/// Forward, backward, clip, decoupled AdamW update. Gradients for a
/// parameter bound more than once in the graph accumulate by name.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut AdamW<S>,
    batch: &Batch,
    lr: f64,
    grad_clip: f64,
    step: usize,
) -> Result<StepStats> {
    let tape: Tape<S> = Tape::new();
    let mut binder = Binder::new(&tape);
    let (loss, mean_beta) =
        model.loss(&mut binder, &batch.inputs, &batch.targets, batch.batch_size, batch.seq_len)?;
    let loss_value = loss.item().to_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { step, layer: first_non_finite(model, &binder) });
    }
    loss.backward();

    let mut grads: HashMap<String, Vec<S>> = HashMap::new();
    for (name, g) in binder.grads() {
        match grads.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                grads.insert(name, g);
            }
        }
    }
    if let Some(bad) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss { step, layer: Some(bad.0.clone()) });
    }

    let order = model.param_names();
    let grad_norm = AdamW::clip_global_norm(&mut grads, &order, grad_clip);
    opt.update(model, &grads, lr);
    Ok(StepStats { loss: loss_value, grad_norm, mean_beta })
}

fn first_non_finite<S: Scalar>(model: &Model<S>, binder: &Binder<S>) -> Option<String> {
    for (name, t) in &binder.bound {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Some(name.clone());
        }
    }
    let mut bad = None;
    model.visit_params(&mut |p| {
        if bad.is_none() && p.data.iter().any(|v| !v.is_finite()) {
            bad = Some(p.name.clone());
        }
    });
    bad
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub loss: f64,
    pub perplexity: f64,
    pub mean_beta: Vec<f64>,
}

/// Mean token cross-entropy over a fixed number of validation batches drawn
/// from a dedicated stream, so every evaluation sees the same data.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    val: &[u8],
    batches: usize,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut sampler = BatchSampler::new(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut total = 0.0f64;
    let mut beta_acc: Vec<f64> = Vec::new();
    for _ in 0..batches {
        let b = sampler.sample(val, batch_size, seq_len)?;
        let tape: Tape<S> = Tape::new();
        let mut binder = Binder::new(&tape);
        let (loss, betas) =
            model.loss(&mut binder, &b.inputs, &b.targets, batch_size, seq_len)?;
        total += loss.item().to_f64();
        if beta_acc.is_empty() {
            beta_acc = betas;
        } else {
            for (a, b) in beta_acc.iter_mut().zip(betas) {
                *a += b;
            }
        }
    }
    for a in beta_acc.iter_mut() {
        *a /= batches as f64;
    }
    let loss = total / batches as f64;
    Ok(EvalReport { loss, perplexity: loss.exp(), mean_beta: beta_acc })
}

/// End-of-run summary.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_perplexity: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Full training run. `resume_from` restores model, optimizer, step counter
/// and sampler stream; otherwise everything derives from the seeds in the
/// configs. Writes `metrics.csv` and `checkpoint.ddl` under `out_dir`.
pub fn run_training<S: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    out_dir: &Path,
    resume_from: Option<&Path>,
    quiet: bool,
) -> Result<TrainSummary> {
    cfg.validate()?;
    model_cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let model_seed = cfg.seed;
    let (mut model, mut opt, mut sampler, start_step) = match resume_from {
        Some(path) => {
            let state = checkpoint::load::<S>(path)?;
            let sampler = BatchSampler::restore(state.rng_seed, state.rng_word_pos);
            (state.model, state.opt, sampler, state.step)
        }
        None => {
            let model: Model<S> = Model::new(model_cfg, model_seed)?;
            let opt = AdamW::new(&model, cfg.adam());
            (model, opt, BatchSampler::new(cfg.seed), 0)
        }
    };

    let mut writer = MetricsWriter::create(&out_dir.join("metrics.csv"), model.cfg.n_layers)?;
    let mut last_train_loss = f64::NAN;
    let mut last_val = f64::NAN;
    let started = Instant::now();

    for step in start_step..cfg.steps {
        let step_started = Instant::now();
        let lr = lr_at(step, cfg.steps, cfg.warmup_steps, cfg.lr, cfg.min_lr_frac);
        let batch = sampler.sample(corpus.train(), cfg.batch_size, cfg.seq_len)?;
        let stats = train_step(&mut model, &mut opt, &batch, lr, cfg.grad_clip, step)?;
        last_train_loss = stats.loss;

        let is_eval = cfg.eval_interval > 0
            && ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps);
        let val_loss = if is_eval {
            let report = evaluate(
                &model,
                corpus.validation(),
                cfg.eval_batches,
                cfg.batch_size,
                cfg.seq_len,
                cfg.seed,
            )?;
            last_val = report.loss;
            Some(report.loss)
        } else {
            None
        };

        writer.append(&MetricsRow {
            step,
            train_loss: stats.loss,
            val_loss,
            lr,
            grad_norm: stats.grad_norm,
            mean_beta: stats.mean_beta,
            wall_ms: step_started.elapsed().as_secs_f64() * 1e3,
        })?;

        if !quiet && (step % 100 == 0 || step + 1 == cfg.steps) {
            let val_str = val_loss.map(|v| format!(" val {v:.4}")).unwrap_or_default();
            eprintln!(
                "step {step:>5}  loss {:.4}{val_str}  lr {lr:.2e}  grad_norm {:.3}  {:.1}s",
                stats.loss,
                stats.grad_norm,
                started.elapsed().as_secs_f64()
            );
        }
    }
    writer.flush()?;

    let ckpt = out_dir.join("checkpoint.ddl");
    checkpoint::save(
        &ckpt,
        &model,
        &cfg,
        &opt,
        cfg.steps,
        model_seed,
        sampler.seed(),
        sampler.word_pos(),
    )?;

    Ok(TrainSummary {
        steps_run: cfg.steps - start_step,
        final_train_loss: last_train_loss,
        final_val_loss: last_val,
        final_perplexity: last_val.exp(),
        metrics_path: writer.path().to_path_buf(),
        checkpoint_path: ckpt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ResidualMode;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            d: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 256,
            seq_len: 16,
            residual_mode: ResidualMode::Ddl,
            ..ModelConfig::default()
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            steps: 12,
            batch_size: 4,
            seq_len: 16,
            warmup_steps: 4,
            eval_interval: 6,
            eval_batches: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn synthetic_corpus() -> Corpus {
        let text: Vec<u8> = (0..6000).map(|i| b"the quick brown fox. "[i % 21]).collect();
        Corpus::from_bytes(text).unwrap()
    }

    #[test]
    fn loss_decreases_on_tiny_run() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synthetic_corpus();
        let cfg = TrainConfig { steps: 30, ..tiny_train_cfg() };
        let summary =
            run_training::<f32>(&tiny_model_cfg(), &cfg, &corpus, dir.path(), None, true).unwrap();
        assert!(summary.final_train_loss.is_finite());
        // Highly regular corpus: the model must beat uniform quickly.
        assert!(
            summary.final_train_loss < (256.0f64).ln(),
            "loss {} did not drop below uniform",
            summary.final_train_loss
        );
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let corpus = synthetic_corpus();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny_train_cfg();
        run_training::<f32>(&tiny_model_cfg(), &cfg, &corpus, d1.path(), None, true).unwrap();
        run_training::<f32>(&tiny_model_cfg(), &cfg, &corpus, d2.path(), None, true).unwrap();
        let a = std::fs::read_to_string(d1.path().join("metrics.csv")).unwrap();
        let b = std::fs::read_to_string(d2.path().join("metrics.csv")).unwrap();
        let strip = |text: &str| {
            text.lines().map(metrics::strip_wall_ms).collect::<Vec<_>>().join("\n")
        };
        assert_eq!(strip(&a), strip(&b), "metrics differ despite identical seeds");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = synthetic_corpus();
        let straight = tempfile::tempdir().unwrap();
        let split_a = tempfile::tempdir().unwrap();
        let split_b = tempfile::tempdir().unwrap();

        let full = TrainConfig { steps: 10, eval_interval: 5, ..tiny_train_cfg() };
        let s1 =
            run_training::<f32>(&tiny_model_cfg(), &full, &corpus, straight.path(), None, true)
                .unwrap();

        let half = TrainConfig { steps: 5, ..full.clone() };
        run_training::<f32>(&tiny_model_cfg(), &half, &corpus, split_a.path(), None, true).unwrap();
        // Resume from the half checkpoint with the full step budget.
        let ckpt = split_a.path().join("checkpoint.ddl");
        let s2 =
            run_training::<f32>(&tiny_model_cfg(), &full, &corpus, split_b.path(), Some(&ckpt), true)
                .unwrap();

        assert!(
            (s1.final_train_loss - s2.final_train_loss).abs() < 1e-6,
            "resumed loss {} differs from straight-through {}",
            s2.final_train_loss,
            s1.final_train_loss
        );
    }

    #[test]
    fn beta_stays_strictly_inside_range_during_training() {
        let corpus = synthetic_corpus();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 15, ..tiny_train_cfg() };
        run_training::<f32>(&tiny_model_cfg(), &cfg, &corpus, dir.path(), None, true).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            for beta in &cols[5..7] {
                let b: f64 = beta.parse().unwrap();
                assert!(b > 0.0 && b < 2.0, "mean beta {b} left (0,2)");
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let corpus = synthetic_corpus();
        let model: Model<f32> = Model::new(&tiny_model_cfg(), 5).unwrap();
        let a = evaluate(&model, corpus.validation(), 3, 2, 16, 9).unwrap();
        let b = evaluate(&model, corpus.validation(), 3, 2, 16, 9).unwrap();
        assert_eq!(a.loss, b.loss, "same seed and data must give bit-identical loss");
        assert!((a.perplexity - a.loss.exp()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let corpus = synthetic_corpus();
        let mut model: Model<f32> = Model::new(&tiny_model_cfg(), 5).unwrap();
        // Poison one weight so the forward pass produces NaN.
        model.visit_params_mut(&mut |p| {
            if p.name == "layer0.attn.w_q" {
                p.data[0] = f32::NAN;
            }
        });
        let mut opt = AdamW::new(&model, AdamConfig::default());
        let mut sampler = BatchSampler::new(3);
        let batch = sampler.sample(corpus.train(), 2, 16).unwrap();
        let err = train_step(&mut model, &mut opt, &batch, 1e-3, 1.0, 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 7"), "{msg}");
        assert!(msg.contains("layer0"), "diagnostic should name a layer: {msg}");
    }
}
