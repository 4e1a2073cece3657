//! Independent oracle suite: every closed-form property of the operator gets
//! an executable check against a route that does not share code with the
//! implementation (dense linear algebra via nalgebra, hand-rolled
//! recurrences, central finite differences).
//!
//! Every check is deterministic given its seed and reports one JSON-able
//! record with the maximum observed deviation.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{DdlConfig, Model, ModelConfig, ResidualMode};
use crate::block::MapMode;
use crate::delta::{
    delta_update, orthonormal_complement, DeltaOperatorView, StateMatrix, UnitDirection,
};
use crate::expansion::Variant;
use crate::param::Parameterized;
use crate::tensor::{Tape, Tensor};

/// Threshold for exact algebraic identities evaluated in f64.
pub const TOL_ALGEBRAIC: f64 = 1e-12;
/// Threshold for closed-form eigen-action checks.
pub const TOL_EIGEN_ACTION: f64 = 1e-10;
/// Threshold for numeric eigendecomposition / SVD oracles.
pub const TOL_EIGEN_NUMERIC: f64 = 1e-9;
/// Threshold for finite-difference gradient checks.
pub const TOL_GRADIENT: f64 = 1e-5;

/// One machine-readable check outcome, serialized as a JSON line.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub seed: u64,
    pub params: serde_json::Value,
    pub max_dev: f64,
    pub pass: bool,
}

impl CheckReport {
    fn new(check: &str, seed: u64, params: serde_json::Value, max_dev: f64, tol: f64) -> Self {
        CheckReport { check: check.to_string(), seed, params, max_dev, pass: max_dev <= tol }
    }
}

/// Gaussian direction normalized to the unit sphere.
pub fn random_unit_direction(rng: &mut ChaCha8Rng, d: usize) -> UnitDirection<f64> {
    loop {
        let raw: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        if raw.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
            return UnitDirection::new(&raw, 0.0).expect("nonzero by construction");
        }
    }
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; enough for test-vector generation.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn dense_to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

// ── Spectrum suite ───────────────────────────────────────────────────

/// Eigen-action, involution, idempotence, singular-value and determinant
/// invariants of the operator, over every (seed, d, beta) combination.
pub fn check_spectrum_suite(seeds: &[u64], dims: &[usize], betas: &[f64]) -> Vec<CheckReport> {
    let mut eigen_action = Worst::new();
    let mut involution = Worst::new();
    let mut idempotence = Worst::new();
    let mut singular = Worst::new();
    let mut determinant = Worst::new();

    for &seed in seeds {
        for &d in dims {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((d as u64) << 32));
            let k = random_unit_direction(&mut rng, d);

            for &beta in betas {
                let op = DeltaOperatorView::new(k.clone(), beta);
                let at = |dev: f64| (dev, seed, d, beta);

                // Closed-form eigen-action: A k = (1-beta) k, A u = u on the complement.
                let ak = op.apply(&StateMatrix::new(k.as_slice().to_vec(), d, 1)).unwrap();
                let mut dev = max_dev(
                    ak.as_slice(),
                    &k.as_slice().iter().map(|v| (1.0 - beta) * v).collect::<Vec<_>>(),
                );
                for u in orthonormal_complement(k.as_slice()) {
                    let au = op.apply(&StateMatrix::new(u.clone(), d, 1)).unwrap();
                    dev = dev.max(max_dev(au.as_slice(), &u));
                }
                eigen_action.update(at(dev));

                // Determinant of the dense form vs 1 - beta (LU oracle).
                let dense = op.dense().unwrap();
                let det_dev = (dense_to_na(&dense).lu().determinant() - (1.0 - beta)).abs();
                determinant.update(at(det_dev));

                // Singular values of the dense form: {1 x (d-1), |1-beta|}.
                let mut sv =
                    dense_to_na(&dense).svd(false, false).singular_values.as_slice().to_vec();
                sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let mut expected = vec![1.0; d - 1];
                expected.push((1.0 - beta).abs());
                expected.sort_by(|a, b| b.partial_cmp(a).unwrap());
                singular.update(at(max_dev(&sv, &expected)));
            }

            // Involution at beta = 2 (A^2 = I), dense and twice-applied.
            let refl = DeltaOperatorView::new(k.clone(), 2.0);
            let a = dense_to_na(&refl.dense().unwrap());
            let aa = &a * &a;
            let mut dev = 0.0f64;
            for i in 0..d {
                for j in 0..d {
                    let want = if i == j { 1.0 } else { 0.0 };
                    dev = dev.max((aa[(i, j)] - want).abs());
                }
            }
            let x = StateMatrix::new((0..d).map(|_| standard_normal(&mut rng)).collect(), d, 1);
            let twice = refl.apply(&refl.apply(&x).unwrap()).unwrap();
            dev = dev.max(max_dev(twice.as_slice(), x.as_slice()));
            involution.update((dev, seed, d, 2.0));

            // Projector idempotence at beta = 1 (A^2 = A).
            let proj = DeltaOperatorView::new(k.clone(), 1.0);
            let p = dense_to_na(&proj.dense().unwrap());
            let pp = &p * &p;
            let mut dev = 0.0f64;
            for i in 0..d {
                for j in 0..d {
                    dev = dev.max((pp[(i, j)] - p[(i, j)]).abs());
                }
            }
            idempotence.update((dev, seed, d, 1.0));
        }
    }

    let meta = |w: &Worst| {
        serde_json::json!({
            "dims": dims, "betas": betas, "n_seeds": seeds.len(),
            "worst": {"seed": w.seed, "d": w.d, "beta": w.beta},
        })
    };
    vec![
        CheckReport::new(
            "spectrum_eigen_action",
            seeds[0],
            meta(&eigen_action),
            eigen_action.dev,
            TOL_EIGEN_ACTION,
        ),
        CheckReport::new(
            "spectrum_involution",
            seeds[0],
            meta(&involution),
            involution.dev,
            TOL_EIGEN_ACTION,
        ),
        CheckReport::new(
            "spectrum_idempotence",
            seeds[0],
            meta(&idempotence),
            idempotence.dev,
            TOL_EIGEN_ACTION,
        ),
        CheckReport::new(
            "spectrum_singular_values",
            seeds[0],
            meta(&singular),
            singular.dev,
            TOL_EIGEN_NUMERIC,
        ),
        CheckReport::new(
            "spectrum_determinant",
            seeds[0],
            meta(&determinant),
            determinant.dev,
            TOL_EIGEN_ACTION,
        ),
    ]
}

/// Numeric eigendecomposition oracle: the eigenvalue multiset of the dense
/// symmetric form matches the closed-form spectrum.
pub fn check_eigen_multiset(seed: u64, d: usize, beta: f64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = random_unit_direction(&mut rng, d);
    let op = DeltaOperatorView::new(k, beta);
    let mut eigvals =
        dense_to_na(&op.dense().unwrap()).symmetric_eigen().eigenvalues.as_slice().to_vec();
    eigvals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let s = op.spectrum();
    let mut expected = vec![s.fixed_eigenvalue; s.fixed_multiplicity];
    expected.push(s.gated_eigenvalue);
    expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let dev = max_dev(&eigvals, &expected);
    CheckReport::new(
        "eigen_multiset",
        seed,
        serde_json::json!({"d": d, "beta": beta}),
        dev,
        TOL_EIGEN_NUMERIC,
    )
}

// ── DeltaNet correspondence ──────────────────────────────────────────

/// Depth-iteration of the additive delta update equals (i) the
/// erase-then-write recurrence `S_t = (I - b k k^T) S_{t-1} + b k v^T`
/// evaluated with dense matrices, and (ii) the transposed right-mult form
/// `M_t = M_{t-1} + b (v - M_{t-1} k) k^T` under `S_t = M_t^T`, state for
/// state along the whole rollout.
pub fn check_deltanet_isomorphism(depth: usize, dims: &[(usize, usize)], seed: u64) -> CheckReport {
    let mut dev = 0.0f64;
    for (ci, &(d, d_v)) in dims.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64) << 40));
        let s0: Vec<f64> = (0..d * d_v).map(|_| standard_normal(&mut rng)).collect();
        let mut route_a = StateMatrix::new(s0.clone(), d, d_v);
        let mut route_b = DMatrix::from_row_slice(d, d_v, &s0);
        let mut route_c = DMatrix::from_row_slice(d, d_v, &s0).transpose(); // M = S^T
        for _ in 0..depth {
            let beta: f64 = rng.gen_range(0.0..2.0);
            let k = random_unit_direction(&mut rng, d);
            let v: Vec<f64> = (0..d_v).map(|_| standard_normal(&mut rng)).collect();

            route_a = delta_update(&route_a, &k, beta, &v).unwrap();

            let kv = DMatrix::from_row_slice(d, 1, k.as_slice());
            let vv = DMatrix::from_row_slice(1, d_v, &v);
            let a = DMatrix::identity(d, d) - beta * &kv * kv.transpose();
            route_b = a * route_b + beta * &kv * &vv;

            // Right-multiplication delta rule on M (d_v x d).
            let pred = &route_c * &kv; // (d_v, 1)
            let corr = vv.transpose() - pred;
            route_c += beta * corr * kv.transpose();

            for i in 0..d {
                for j in 0..d_v {
                    let x = route_a.as_slice()[i * d_v + j];
                    dev = dev.max((x - route_b[(i, j)]).abs());
                    dev = dev.max((x - route_c[(j, i)]).abs());
                }
            }
        }
    }
    CheckReport::new(
        "deltanet_isomorphism",
        seed,
        serde_json::json!({"depth": depth, "dims": dims}),
        dev,
        TOL_ALGEBRAIC,
    )
}

// ── Projected dynamics ───────────────────────────────────────────────

pub(crate) type UpdateFn =
    dyn Fn(&StateMatrix<f64>, &UnitDirection<f64>, f64, &[f64]) -> StateMatrix<f64>;

/// Core of the projected-dynamics check, parameterized over the update under
/// test so a deliberately broken update is detectable.
pub(crate) fn projected_dynamics_dev(update: &UpdateFn, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dev = 0.0f64;
    for trial in 0..trials {
        let d = rng.gen_range(2..12);
        let d_v = rng.gen_range(1..6);
        // Hit the exact overwrite and reflection points on a schedule.
        let beta = match trial % 4 {
            0 => 1.0,
            1 => 2.0,
            _ => rng.gen_range(0.0..2.0),
        };
        let k = random_unit_direction(&mut rng, d);
        let x =
            StateMatrix::new((0..d * d_v).map(|_| standard_normal(&mut rng)).collect(), d, d_v);
        let v: Vec<f64> = (0..d_v).map(|_| standard_normal(&mut rng)).collect();
        let y = update(&x, &k, beta, &v);
        for j in 0..d_v {
            let before: f64 = k.as_slice().iter().zip(x.column(j)).map(|(a, b)| a * b).sum();
            let after: f64 = k.as_slice().iter().zip(y.column(j)).map(|(a, b)| a * b).sum();
            dev = dev.max(((1.0 - beta) * before + beta * v[j] - after).abs());
        }
    }
    dev
}

/// `k^T X' = (1-beta) k^T X + beta v^T` on random instances, including exact
/// overwrite at beta = 1.
pub fn check_projected_dynamics(trials: usize, seed: u64) -> CheckReport {
    let dev =
        projected_dynamics_dev(&|x, k, b, v| delta_update(x, k, b, v).unwrap(), trials, seed);
    CheckReport::new(
        "projected_dynamics",
        seed,
        serde_json::json!({"trials": trials}),
        dev,
        TOL_ALGEBRAIC,
    )
}

// ── Model gradient checks ────────────────────────────────────────────

/// Finite-difference check over every parameter group of a two-layer model
/// (`d = 8`, `T = 4`) for the requested state width and variant, in f64.
pub fn check_model_gradients(
    d_v: usize,
    variant: Variant,
    map_mode: MapMode,
    seed: u64,
) -> CheckReport {
    let cfg = ModelConfig {
        d: 8,
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
        vocab_size: 24,
        seq_len: 4,
        residual_mode: ResidualMode::Ddl,
        ddl: DdlConfig {
            d_v,
            variant,
            map_mode,
            state_shortconv_kernel_size: if variant.uses_channel_compression() { d_v } else { 3 },
            input_embed_shortconv_kernel_size: 3,
            beta_init: 0.9,
            ..DdlConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut model: Model<f64> = Model::new(&cfg, seed).expect("valid config");
    // Nonzero gate weights so the gate path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    model.visit_params_mut(&mut |p| {
        if p.name.contains(".gate.w") {
            p.data = (0..p.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        }
    });
    let (batch, seq) = (1usize, 4usize);
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();

    // Analytic gradients, accumulated by name.
    let tape: Tape<f64> = Tape::new();
    let mut binder = crate::param::Binder::new(&tape);
    let (loss, _) = model.loss(&mut binder, &tokens, &targets, batch, seq).expect("forward");
    loss.backward();
    let mut analytic: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    for (name, g) in binder.grads() {
        match analytic.get_mut(&name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                analytic.insert(name, g);
            }
        }
    }

    // Central differences, every entry of every group. The step balances
    // truncation against roundoff: embedding entries sit at ~2e-2, and the
    // normalization layers give the loss a third derivative of order
    // 1/scale^3 there, so 1e-5 would leave visible h^2 truncation error.
    let h = 1e-6;
    let names = model.param_names();
    let mut max_err = 0.0f64;
    let mut worst = String::new();
    for name in &names {
        let n = {
            let mut n = 0;
            model.visit_params(&mut |p| {
                if &p.name == name {
                    n = p.numel();
                }
            });
            n
        };
        let ga = &analytic[name];
        for e in 0..n {
            let nudge = |model: &mut Model<f64>, delta: f64| {
                model.visit_params_mut(&mut |p| {
                    if &p.name == name {
                        p.data[e] += delta;
                    }
                });
            };
            nudge(&mut model, h);
            let up = model.loss_value(&tokens, &targets, batch, seq).expect("fd forward");
            nudge(&mut model, -2.0 * h);
            let down = model.loss_value(&tokens, &targets, batch, seq).expect("fd forward");
            nudge(&mut model, h);
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(ga[e], fd);
            if err > max_err {
                max_err = err;
                worst = format!("{name}[{e}]");
            }
        }
    }
    CheckReport::new(
        "model_gradients",
        seed,
        serde_json::json!({
            "d_v": d_v, "variant": variant, "map_mode": map_mode, "worst": worst,
        }),
        max_err,
        TOL_GRADIENT,
    )
}

/// The gradient sweep the full `check` command runs: both map modes at
/// `d_v = 1`, all four variants at `d_v = 4`.
pub fn check_gradients(seed: u64) -> Vec<CheckReport> {
    let mut reports = vec![
        check_model_gradients(1, Variant::Baseline, MapMode::KMap, seed),
        check_model_gradients(1, Variant::Baseline, MapMode::VMap, seed),
    ];
    for variant in [Variant::Baseline, Variant::Ec, Variant::Cc, Variant::CcEc] {
        reports.push(check_model_gradients(4, variant, MapMode::KMap, seed));
    }
    reports.push(check_model_gradients(4, Variant::Baseline, MapMode::VMap, seed));
    reports
}

// ── Finite-difference gradient harness ───────────────────────────────

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst deviation.
    pub worst: (usize, usize),
}

/// Relative error with a unit floor: `|a-b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// of step `h` for every element of every input.
pub fn gradcheck(
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    inputs: &[(Vec<f64>, Vec<usize>)],
    h: f64,
) -> GradCheck {
    let tape: Tape<f64> = Tape::new();
    let leaves: Vec<Tensor<f64>> =
        inputs.iter().map(|(data, shape)| tape.leaf(data.clone(), shape)).collect();
    let loss = f(&leaves);
    assert_eq!(loss.numel(), 1, "gradcheck: loss must be scalar");
    loss.backward();
    let analytic: Vec<Vec<f64>> =
        leaves.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();

    let eval = |perturbed: &[(Vec<f64>, Vec<usize>)]| -> f64 {
        let ts: Vec<Tensor<f64>> =
            perturbed.iter().map(|(d, s)| Tensor::from_vec(d.clone(), s)).collect();
        f(&ts).item()
    };

    let mut check = GradCheck { max_rel_err: 0.0, worst: (0, 0) };
    let mut work: Vec<(Vec<f64>, Vec<usize>)> = inputs.to_vec();
    for idx in 0..inputs.len() {
        for e in 0..inputs[idx].0.len() {
            let orig = work[idx].0[e];
            work[idx].0[e] = orig + h;
            let up = eval(&work);
            work[idx].0[e] = orig - h;
            let down = eval(&work);
            work[idx].0[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(analytic[idx][e], fd);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst = (idx, e);
            }
        }
    }
    check
}

// ── helpers ──────────────────────────────────────────────────────────

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Worst {
    dev: f64,
    seed: u64,
    d: usize,
    beta: f64,
}

impl Worst {
    fn new() -> Self {
        Worst { dev: 0.0, seed: 0, d: 0, beta: 0.0 }
    }

    fn update(&mut self, (dev, seed, d, beta): (f64, u64, usize, f64)) {
        if dev > self.dev {
            *self = Worst { dev, seed, d, beta };
        }
    }
}
