//! The `ddl` command line: verification (`check`), operator analysis
//! (`spectrum`), training (`train`) and checkpoint evaluation (`eval`).
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 runtime abort. `DDL_SEED` serves as the `--seed` fallback.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::backbone::{Model, ModelConfig, ResidualMode};
use crate::block::MapMode;
use crate::delta::{DeltaOperatorView, UnitDirection};
use crate::error::Error;
use crate::expansion::Variant;
use crate::scalar::Scalar;
use crate::trainer::{self, checkpoint, Corpus, Precision, TrainConfig};
use crate::verify::{self, CheckReport};

/// Bundled default corpus (deterministic generated text, ~1 MiB).
pub const BUNDLED_CORPUS: &[u8] =
    include_bytes!(concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt"));

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ddl",
    about = "Gated rank-1 residual operators: verification suite, spectral analysis, and a byte-level training harness",
    version
)]
pub struct Cli {
    /// Seed for all randomized behavior (env fallback: DDL_SEED).
    #[arg(long, global = true, env = "DDL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = library default). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the verification suite and print a JSON-lines report.
    Check(CheckArgs),
    /// Print the closed-form spectrum of one operator instance.
    Spectrum(SpectrumArgs),
    /// Train a byte-level model on the bundled (or given) corpus.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint: validation loss, perplexity, gate summary.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Reduced seed counts for a quick pass.
    #[arg(long)]
    pub fast: bool,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub beta: f64,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub dv: usize,
    /// Whitespace-separated raw direction (d entries); random unit direction
    /// from the seed when absent.
    #[arg(long)]
    pub k_file: Option<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Residual rule: baseline or ddl.
    #[arg(long)]
    pub residual_mode: Option<ResidualMode>,
    /// Value channels per feature (d_v).
    #[arg(long)]
    pub dv: Option<usize>,
    /// Expanded-state variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub map_mode: Option<MapMode>,
    /// Time-axis readout conv kernel (config: ddl.state_shortconv_kernel_size).
    #[arg(long)]
    pub state_kernel: Option<usize>,
    /// Embedding conv kernel (config: ddl.input_embed_shortconv_kernel_size).
    #[arg(long)]
    pub embed_kernel: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Training corpus (bundled corpus when absent).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for metrics.csv and checkpoint.ddl.
    #[arg(long, default_value = "ddl-out")]
    pub out: PathBuf,
    /// Resume from a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to evaluate on (bundled corpus when absent).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Parse `args` and run. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        // Ignore failure: the global pool can only be built once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let result = match cli.command {
        Command::Check(args) => cmd_check(&args, cli.seed),
        Command::Spectrum(args) => cmd_spectrum(&args, cli.seed),
        Command::Train(args) => cmd_train(&args, cli.seed),
        Command::Eval(args) => cmd_eval(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ChannelKernelSize { .. } | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

// ── check ────────────────────────────────────────────────────────────

pub fn cmd_check(args: &CheckArgs, seed: u64) -> crate::Result<i32> {
    let reports = run_checks(args.fast, seed);
    let mut all_pass = true;
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
        all_pass &= r.pass;
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// The full verification battery. `fast` shrinks seed counts.
pub fn run_checks(fast: bool, seed: u64) -> Vec<CheckReport> {
    let n_seeds = if fast { 5 } else { 50 };
    let seeds: Vec<u64> = (0..n_seeds).map(|i| seed.wrapping_add(i)).collect();
    let dims = [2usize, 4, 16, 64];
    let betas = [0.0, 0.25, 0.5, 1.0, 1.5, 2.0];

    let mut reports = verify::check_spectrum_suite(&seeds, &dims, &betas);
    reports.push(verify::check_eigen_multiset(seed, 16, 1.5));
    reports.push(verify::check_eigen_multiset(seed.wrapping_add(1), 8, 0.7));

    let rollouts = if fast { 10 } else { 100 };
    let dims_iso: Vec<(usize, usize)> =
        (0..rollouts).map(|i| (2 + (i % 7), 1 + (i % 5))).collect();
    reports.push(verify::check_deltanet_isomorphism(10, &dims_iso, seed));

    let trials = if fast { 100 } else { 1000 };
    reports.push(verify::check_projected_dynamics(trials, seed));

    if fast {
        reports.push(verify::check_model_gradients(1, Variant::Baseline, MapMode::KMap, seed));
        reports.push(verify::check_model_gradients(4, Variant::Baseline, MapMode::KMap, seed));
    } else {
        reports.extend(verify::check_gradients(seed));
    }
    reports
}

// ── spectrum ─────────────────────────────────────────────────────────

fn regime_label(beta: f64) -> &'static str {
    if beta == 0.0 {
        "identity"
    } else if beta == 1.0 {
        "projection"
    } else if beta < 1.0 {
        "contraction"
    } else {
        "reflection-like"
    }
}

pub fn cmd_spectrum(args: &SpectrumArgs, seed: u64) -> crate::Result<i32> {
    if args.d == 0 {
        return Err(Error::Config("--d must be at least 1".into()));
    }
    if args.dv == 0 {
        return Err(Error::Config("--dv must be at least 1".into()));
    }
    if !(0.0..=2.0).contains(&args.beta) {
        return Err(Error::Config(format!("--beta must lie in [0, 2], got {}", args.beta)));
    }
    let k = match &args.k_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let raw: Vec<f64> = text
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Config(format!("bad k entry `{t}`: {e}"))))
                .collect::<crate::Result<_>>()?;
            if raw.len() != args.d {
                return Err(Error::Config(format!(
                    "k file holds {} entries, expected d = {}",
                    raw.len(),
                    args.d
                )));
            }
            UnitDirection::new(&raw, 0.0)?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            verify::random_unit_direction(&mut rng, args.d)
        }
    };
    let op = DeltaOperatorView::new(k, args.beta);
    let spectrum = op.spectrum();
    let (spatial_det, lifted_det) = op.determinant(args.dv);
    let (sv_fixed, sv_mult, sv_gated) = op.singular_values();

    println!("delta operator  d={} d_v={} beta={}", args.d, args.dv, args.beta);
    println!("eigenvalue {:>8}  multiplicity {}  (complement of k)", spectrum.fixed_eigenvalue, spectrum.fixed_multiplicity);
    println!("eigenvalue {:>8}  multiplicity 1  (along k)", spectrum.gated_eigenvalue);
    println!("spatial determinant: {spatial_det}");
    println!("lifted determinant (d_v={}): {lifted_det}", args.dv);
    println!("singular values: {sv_fixed} x{sv_mult}, {sv_gated}");
    println!("regime: {}", regime_label(args.beta));
    if args.dv % 2 == 1 && args.beta > 1.0 && spatial_det != 0.0 {
        println!("orientation: flips (d_v odd, beta > 1)");
    } else {
        println!("orientation: preserved");
    }

    // Numeric oracle on the dense form keeps the printout honest.
    if args.d <= 256 {
        let report = verify::check_eigen_multiset(seed, args.d, args.beta);
        println!("dense-oracle max deviation: {:.3e} ({})", report.max_dev, if report.pass { "ok" } else { "FAIL" });
        if !report.pass {
            return Ok(EXIT_CHECK_FAILED);
        }
    }

    if let Some(csv) = &args.csv {
        let mut text = String::from("quantity,value\n");
        text.push_str(&format!("d,{}\n", args.d));
        text.push_str(&format!("d_v,{}\n", args.dv));
        text.push_str(&format!("beta,{}\n", args.beta));
        text.push_str(&format!("eigenvalue_fixed,{}\n", spectrum.fixed_eigenvalue));
        text.push_str(&format!("eigenvalue_fixed_multiplicity,{}\n", spectrum.fixed_multiplicity));
        text.push_str(&format!("eigenvalue_gated,{}\n", spectrum.gated_eigenvalue));
        text.push_str(&format!("spatial_determinant,{spatial_det}\n"));
        text.push_str(&format!("lifted_determinant,{lifted_det}\n"));
        text.push_str(&format!("singular_value_bulk,{sv_fixed}\n"));
        text.push_str(&format!("singular_value_gated,{sv_gated}\n"));
        text.push_str(&format!("regime,{}\n", regime_label(args.beta)));
        std::fs::write(csv, text)?;
    }
    Ok(EXIT_OK)
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

/// Merge the config file (when given) with command-line overrides.
pub fn resolve_train_config(args: &TrainArgs, seed: u64) -> crate::Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(m) = file.model {
            model = m;
        }
        if let Some(t) = file.train {
            train = t;
        }
    }
    if let Some(mode) = args.residual_mode {
        model.residual_mode = mode;
    }
    if let Some(dv) = args.dv {
        model.ddl.d_v = dv;
        if dv > 1 {
            model.residual_mode = ResidualMode::Ddl;
        }
    }
    if let Some(v) = args.variant {
        model.ddl.variant = v;
    }
    if let Some(m) = args.map_mode {
        model.ddl.map_mode = m;
    }
    if let Some(k) = args.state_kernel {
        model.ddl.state_shortconv_kernel_size = k;
    }
    if let Some(k) = args.embed_kernel {
        model.ddl.input_embed_shortconv_kernel_size = k;
    }
    if let Some(s) = args.steps {
        train.steps = s;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(t) = args.seq_len {
        train.seq_len = t;
        model.seq_len = t;
    }
    if let Some(lr) = args.lr {
        train.lr = lr;
    }
    if let Some(p) = args.precision {
        train.precision = p;
    }
    if train.seq_len > model.seq_len {
        return Err(Error::Config(format!(
            "train.seq_len {} exceeds model.seq_len {}",
            train.seq_len, model.seq_len
        )));
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn load_corpus(data: &Option<PathBuf>) -> crate::Result<Corpus> {
    match data {
        Some(path) => Corpus::load(path),
        None => Corpus::from_bytes(BUNDLED_CORPUS.to_vec()),
    }
}

pub fn cmd_train(args: &TrainArgs, seed: u64) -> crate::Result<i32> {
    let (model_cfg, train_cfg) = resolve_train_config(args, seed)?;
    let corpus = load_corpus(&args.data)?;
    let summary = match train_cfg.precision {
        Precision::F32 => trainer::run_training::<f32>(
            &model_cfg,
            &train_cfg,
            &corpus,
            &args.out,
            args.resume.as_deref(),
            args.quiet,
        )?,
        Precision::F64 => trainer::run_training::<f64>(
            &model_cfg,
            &train_cfg,
            &corpus,
            &args.out,
            args.resume.as_deref(),
            args.quiet,
        )?,
    };
    println!(
        "final: train_loss {:.6} val_loss {:.6} perplexity {:.4}",
        summary.final_train_loss, summary.final_val_loss, summary.final_perplexity
    );
    println!("metrics: {}", summary.metrics_path.display());
    println!("checkpoint: {}", summary.checkpoint_path.display());
    Ok(EXIT_OK)
}

// ── eval ─────────────────────────────────────────────────────────────

pub fn cmd_eval(args: &EvalArgs) -> crate::Result<i32> {
    // Probe the stored dtype, then load with the matching element type.
    match checkpoint::load::<f32>(&args.checkpoint) {
        Ok(state) => eval_loaded(state, args),
        Err(Error::CheckpointFormat(msg)) if msg.contains("dtype mismatch") => {
            let state = checkpoint::load::<f64>(&args.checkpoint)?;
            eval_loaded(state, args)
        }
        Err(e) => Err(e),
    }
}

fn eval_loaded<S: Scalar>(
    state: checkpoint::CheckpointState<S>,
    args: &EvalArgs,
) -> crate::Result<i32> {
    let corpus = load_corpus(&args.data)?;
    let report = eval_model(&state.model, &state.train, &corpus)?;
    println!("val_loss {:.6}", report.loss);
    println!("perplexity {:.4}", report.perplexity);
    if report.mean_beta.is_empty() {
        println!("gates: none (additive residual)");
    } else {
        for (l, b) in report.mean_beta.iter().enumerate() {
            println!("mean_beta layer {l}: {b:.6}");
        }
    }
    Ok(EXIT_OK)
}

pub fn eval_model<S: Scalar>(
    model: &Model<S>,
    train: &TrainConfig,
    corpus: &Corpus,
) -> crate::Result<trainer::EvalReport> {
    trainer::evaluate(
        model,
        corpus.validation(),
        train.eval_batches,
        train.batch_size,
        train.seq_len,
        train.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_all_pass() {
        let reports = run_checks(true, 0);
        for r in &reports {
            assert!(r.pass, "{} failed: max_dev {}", r.check, r.max_dev);
        }
        // Determinism: the same seed yields byte-identical serialized reports.
        let again = run_checks(true, 0);
        let a: Vec<String> = reports.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        let b: Vec<String> = again.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn regime_labels() {
        assert_eq!(regime_label(0.0), "identity");
        assert_eq!(regime_label(0.5), "contraction");
        assert_eq!(regime_label(1.0), "projection");
        assert_eq!(regime_label(1.25), "reflection-like");
        assert_eq!(regime_label(2.0), "reflection-like");
    }

    #[test]
    fn train_config_merging() {
        let args = TrainArgs {
            config: None,
            residual_mode: None,
            dv: Some(4),
            variant: Some(Variant::Cc),
            map_mode: None,
            state_kernel: Some(4),
            embed_kernel: None,
            steps: Some(10),
            batch_size: None,
            seq_len: Some(32),
            lr: None,
            precision: None,
            data: None,
            out: PathBuf::from("x"),
            resume: None,
            quiet: true,
        };
        let (model, train) = resolve_train_config(&args, 7).unwrap();
        assert_eq!(model.ddl.d_v, 4);
        assert_eq!(model.residual_mode, ResidualMode::Ddl);
        assert_eq!(model.ddl.variant, Variant::Cc);
        assert_eq!(train.steps, 10);
        assert_eq!(train.seq_len, 32);
        assert_eq!(train.seed, 7);
    }

    #[test]
    fn cc_kernel_mismatch_rejected_before_training() {
        let args = TrainArgs {
            config: None,
            residual_mode: Some(ResidualMode::Ddl),
            dv: Some(4),
            variant: Some(Variant::Cc),
            map_mode: None,
            state_kernel: Some(3),
            embed_kernel: None,
            steps: None,
            batch_size: None,
            seq_len: None,
            lr: None,
            precision: None,
            data: None,
            out: PathBuf::from("x"),
            resume: None,
            quiet: true,
        };
        let err = resolve_train_config(&args, 0).unwrap_err();
        assert_eq!(exit_code_for(&err), EXIT_USAGE, "{err}");
    }

    #[test]
    fn bundled_corpus_is_large_and_splits() {
        let corpus = Corpus::from_bytes(BUNDLED_CORPUS.to_vec()).unwrap();
        assert!(corpus.len() >= 1_000_000, "bundled corpus too small: {}", corpus.len());
        assert_eq!(corpus.validation().len(), corpus.len() / 20);
    }
}
