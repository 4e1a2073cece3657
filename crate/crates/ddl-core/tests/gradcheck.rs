//! Finite-difference oracle over the whole differentiable op suite.
//!
//! Every op's reverse-mode gradient is compared against central finite
//! differences (step 1e-5) in f64, across random seeds and shapes up to 8x8.
//! The loss is always `sum(op_output * fixed_random_weights)` so upstream
//! gradients are non-trivial.

use ddl_core::delta::{delta_update_graph, normalize_direction_graph};
use ddl_core::tensor::{ops::rms_norm, Tensor};
use ddl_core::verify::gradcheck;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(rand_vec(rng, n, -1.0, 1.0), shape)
}

/// Weighted-sum loss so every output element receives a distinct gradient.
fn weighted(out: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    out.mul(w).sum_all()
}

struct Case {
    name: &'static str,
    run: Box<dyn Fn(u64) -> f64>,
}

fn case(name: &'static str, run: impl Fn(u64) -> f64 + 'static) -> Case {
    Case { name, run: Box::new(run) }
}

fn op_cases() -> Vec<Case> {
    vec![
        case("add_broadcast", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs =
                vec![(rand_vec(&mut r, 6, -2.0, 2.0), vec![2, 3]), (rand_vec(&mut r, 3, -2.0, 2.0), vec![3])];
            let w = weights(&mut r, &[2, 3]);
            gradcheck(move |xs| weighted(&xs[0].add(&xs[1]), &w), &inputs, H).max_rel_err
        }),
        case("sub_scalar_operand", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs =
                vec![(rand_vec(&mut r, 4, -2.0, 2.0), vec![4]), (rand_vec(&mut r, 1, -2.0, 2.0), vec![])];
            let w = weights(&mut r, &[4]);
            gradcheck(move |xs| weighted(&xs[0].sub(&xs[1]), &w), &inputs, H).max_rel_err
        }),
        case("mul_broadcast", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                (rand_vec(&mut r, 8, -2.0, 2.0), vec![2, 4]),
                (rand_vec(&mut r, 2, -2.0, 2.0), vec![2, 1]),
            ];
            let w = weights(&mut r, &[2, 4]);
            gradcheck(move |xs| weighted(&xs[0].mul(&xs[1]), &w), &inputs, H).max_rel_err
        }),
        case("maximum_no_ties", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            // Keep operands separated so finite differences stay one-sided.
            let a: Vec<f64> = rand_vec(&mut r, 6, -2.0, 2.0);
            let b: Vec<f64> =
                a.iter().map(|&x| x + if r.gen_bool(0.5) { 0.5 } else { -0.5 }).collect();
            let inputs = vec![(a, vec![6]), (b, vec![6])];
            let w = weights(&mut r, &[6]);
            gradcheck(move |xs| weighted(&xs[0].maximum(&xs[1]), &w), &inputs, H).max_rel_err
        }),
        case("unary_chain", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 5, -1.5, 1.5), vec![5])];
            let w = weights(&mut r, &[5]);
            gradcheck(
                move |xs| weighted(&xs[0].tanh().sigmoid().exp(), &w),
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("silu_neg_scale", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 7, -2.0, 2.0), vec![7])];
            let w = weights(&mut r, &[7]);
            gradcheck(
                move |xs| weighted(&xs[0].silu().neg().mul_scalar(1.7).add_scalar(0.3), &w),
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("sqrt_rsqrt_positive", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 6, 0.5, 3.0), vec![6])];
            let w = weights(&mut r, &[6]);
            gradcheck(move |xs| weighted(&xs[0].sqrt().add(&xs[0].rsqrt()), &w), &inputs, H)
                .max_rel_err
        }),
        case("matmul_2d", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                (rand_vec(&mut r, 12, -1.0, 1.0), vec![3, 4]),
                (rand_vec(&mut r, 8, -1.0, 1.0), vec![4, 2]),
            ];
            let w = weights(&mut r, &[3, 2]);
            gradcheck(move |xs| weighted(&xs[0].matmul(&xs[1]), &w), &inputs, H).max_rel_err
        }),
        case("matmul_folded", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                (rand_vec(&mut r, 24, -1.0, 1.0), vec![2, 3, 4]),
                (rand_vec(&mut r, 20, -1.0, 1.0), vec![4, 5]),
            ];
            let w = weights(&mut r, &[2, 3, 5]);
            gradcheck(move |xs| weighted(&xs[0].matmul(&xs[1]), &w), &inputs, H).max_rel_err
        }),
        case("matmul_batched", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                (rand_vec(&mut r, 24, -1.0, 1.0), vec![2, 3, 4]),
                (rand_vec(&mut r, 16, -1.0, 1.0), vec![2, 4, 2]),
            ];
            let w = weights(&mut r, &[2, 3, 2]);
            gradcheck(move |xs| weighted(&xs[0].matmul(&xs[1]), &w), &inputs, H).max_rel_err
        }),
        case("swap_axes", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 24, -1.0, 1.0), vec![2, 3, 4])];
            let w = weights(&mut r, &[4, 3, 2]);
            gradcheck(move |xs| weighted(&xs[0].swap_axes(0, 2), &w), &inputs, H).max_rel_err
        }),
        case("reshape_slice_concat", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 12, -1.0, 1.0), vec![3, 4])];
            let w = weights(&mut r, &[3, 4]);
            gradcheck(
                move |xs| {
                    let a = xs[0].slice_axis(1, 0, 2);
                    let b = xs[0].slice_axis(1, 2, 4);
                    weighted(&Tensor::concat(1, &[&b, &a]).reshape(&[3, 4]), &w)
                },
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("broadcast_to", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 4, -1.0, 1.0), vec![1, 4])];
            let w = weights(&mut r, &[3, 4]);
            gradcheck(move |xs| weighted(&xs[0].broadcast_to(&[3, 4]), &w), &inputs, H).max_rel_err
        }),
        case("reductions", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 24, -1.0, 1.0), vec![2, 3, 4])];
            let w0 = weights(&mut r, &[3, 4]);
            let w1 = weights(&mut r, &[2, 1, 4]);
            gradcheck(
                move |xs| {
                    let a = weighted(&xs[0].sum_axis(0, false), &w0);
                    let b = weighted(&xs[0].mean_axis(1, true), &w1);
                    a.add(&b).add(&xs[0].mean_all())
                },
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("softmax_last_axis", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 12, -2.0, 2.0), vec![3, 4])];
            let w = weights(&mut r, &[3, 4]);
            gradcheck(move |xs| weighted(&xs[0].softmax_axis(1), &w), &inputs, H).max_rel_err
        }),
        case("softmax_middle_axis", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 24, -2.0, 2.0), vec![2, 3, 4])];
            let w = weights(&mut r, &[2, 3, 4]);
            gradcheck(move |xs| weighted(&xs[0].softmax_axis(1), &w), &inputs, H).max_rel_err
        }),
        case("embedding_rows", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 10, -1.0, 1.0), vec![5, 2])];
            let ids: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let w = weights(&mut r, &[4, 2]);
            gradcheck(
                move |xs| weighted(&Tensor::embedding(&xs[0], &ids, &[4]), &w),
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("cross_entropy", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 20, -2.0, 2.0), vec![4, 5])];
            let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            gradcheck(
                move |xs| Tensor::cross_entropy_mean(&xs[0], &targets),
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("gate_single", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                (rand_vec(&mut r, 12, -1.0, 1.0), vec![3, 4]),
                (rand_vec(&mut r, 4, -1.0, 1.0), vec![4]),
                (rand_vec(&mut r, 1, -1.0, 1.0), vec![1]),
            ];
            let w = weights(&mut r, &[3]);
            gradcheck(
                move |xs| weighted(&Tensor::gate_single(&xs[0], &xs[1], &xs[2]), &w),
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("gate_two_layer", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                (rand_vec(&mut r, 8, -1.0, 1.0), vec![2, 4]),
                (rand_vec(&mut r, 12, -1.0, 1.0), vec![4, 3]),
                (rand_vec(&mut r, 3, -1.0, 1.0), vec![3]),
                (rand_vec(&mut r, 3, -1.0, 1.0), vec![3]),
                (rand_vec(&mut r, 1, -1.0, 1.0), vec![1]),
            ];
            let w = weights(&mut r, &[2]);
            gradcheck(
                move |xs| {
                    weighted(&Tensor::gate_two_layer(&xs[0], &xs[1], &xs[2], &xs[3], &xs[4]), &w)
                },
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("rms_norm_composite", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                (rand_vec(&mut r, 12, -2.0, 2.0), vec![3, 4]),
                (rand_vec(&mut r, 4, 0.5, 1.5), vec![4]),
            ];
            let w = weights(&mut r, &[3, 4]);
            gradcheck(move |xs| weighted(&rms_norm(&xs[0], &xs[1], 1e-6), &w), &inputs, H)
                .max_rel_err
        }),
        case("normalize_direction", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 12, 0.2, 2.0), vec![2, 6])];
            let w = weights(&mut r, &[2, 6]);
            gradcheck(
                move |xs| weighted(&normalize_direction_graph(&xs[0], 1e-6).unwrap(), &w),
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("delta_update_graph", |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            // x (2,4,3), k (2,4), beta (2,), v (2,3)
            let inputs = vec![
                (rand_vec(&mut r, 24, -1.0, 1.0), vec![2, 4, 3]),
                (rand_vec(&mut r, 8, -1.0, 1.0), vec![2, 4]),
                (rand_vec(&mut r, 2, 0.2, 1.8), vec![2]),
                (rand_vec(&mut r, 6, -1.0, 1.0), vec![2, 3]),
            ];
            let w = weights(&mut r, &[2, 4, 3]);
            gradcheck(
                move |xs| {
                    let k = normalize_direction_graph(&xs[1], 1e-6).unwrap();
                    weighted(&delta_update_graph(&xs[0], &k, &xs[2], &xs[3]), &w)
                },
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("shared_subexpression", |seed| {
            // Fan-out: gradient through a shared node equals the unshared rewrite.
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![(rand_vec(&mut r, 5, -1.0, 1.0), vec![5])];
            let w = weights(&mut r, &[5]);
            gradcheck(
                move |xs| {
                    let shared = xs[0].tanh();
                    weighted(&shared.mul(&shared).add(&shared), &w)
                },
                &inputs,
                H,
            )
            .max_rel_err
        }),
        case("composite_random_graph", |seed| {
            // The spec's composite example: random 5-element inputs through a
            // mixed graph.
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                (rand_vec(&mut r, 5, -1.0, 1.0), vec![5]),
                (rand_vec(&mut r, 5, -1.0, 1.0), vec![5]),
            ];
            gradcheck(
                move |xs| {
                    let prod = xs[0].sigmoid().mul(&xs[1].tanh());
                    let mix = prod.add(&xs[0].mul(&xs[1]).mul_scalar(0.5));
                    mix.mul(&mix).sum_all()
                },
                &inputs,
                H,
            )
            .max_rel_err
        }),
    ]
}

#[test]
fn every_op_matches_central_differences() {
    // 25 op cases x 5 seeds = 125 randomized checks.
    let cases = op_cases();
    assert!(cases.len() * 5 >= 100, "need at least 100 seeded checks");
    let mut failures = Vec::new();
    for c in &cases {
        for seed in 0..5u64 {
            let err = (c.run)(seed * 7919 + 13);
            if err >= TOL {
                failures.push(format!("{} (seed {seed}): rel err {err:.3e}", c.name));
            }
        }
    }
    assert!(failures.is_empty(), "finite-difference mismatches:\n{}", failures.join("\n"));
}

#[test]
fn shared_graph_equals_unshared_rewrite() {
    // Gradient accumulation correctness: loss via a shared node equals the
    // same loss with the subexpression recomputed.
    for seed in 0..10u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = rand_vec(&mut r, 6, -1.0, 1.0);

        let tape = ddl_core::Tape::<f64>::new();
        let x = tape.leaf(data.clone(), &[6]);
        let shared = x.tanh();
        shared.mul(&shared).sum_all().backward();
        let g_shared = x.grad().unwrap();

        let tape2 = ddl_core::Tape::<f64>::new();
        let y = tape2.leaf(data, &[6]);
        y.tanh().mul(&y.tanh()).sum_all().backward();
        let g_unshared = y.grad().unwrap();

        for (a, b) in g_shared.iter().zip(&g_unshared) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }
}
