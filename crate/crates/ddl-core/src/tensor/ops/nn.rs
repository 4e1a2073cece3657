//! Structured operations for network layers: softmax, embedding lookup,
//! fused cross-entropy, RMS normalization, and the fused sigmoid gate.
//!
//! The gate kernels run their logit arithmetic in f64 no matter the model
//! precision; only the recorded result is rounded back to the element type.

use std::rc::Rc;

use rayon::prelude::*;

use super::{build_vec, record_result};
use crate::scalar::Scalar;
use crate::tensor::shape::split_at_axis;
use crate::tensor::{check_finite, result_tape, Tensor};

impl<S: Scalar> Tensor<S> {
    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax_axis(&self, axis: usize) -> Tensor<S> {
        check_finite("softmax_axis", &[self]);
        let (_outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data_rc();
        let mut out = vec![S::zero(); x.len()];
        let block = len * inner;
        let xs: &[S] = &x;
        out.par_chunks_mut(block).enumerate().for_each(|(o, chunk)| {
            for i in 0..inner {
                let at = |a: usize| o * block + a * inner + i;
                let mut max = xs[at(0)];
                for a in 1..len {
                    if xs[at(a)] > max {
                        max = xs[at(a)];
                    }
                }
                let mut denom = S::zero();
                for a in 0..len {
                    let e = (xs[at(a)] - max).exp();
                    chunk[a * inner + i] = e;
                    denom += e;
                }
                let inv = denom.recip();
                for a in 0..len {
                    chunk[a * inner + i] *= inv;
                }
            }
        });
        let tape = result_tape("softmax_axis", &[self]);
        let x_id = self.node_id();
        record_result(tape, out, self.shape().to_vec(), |out_rc| {
            let y = Rc::clone(out_rc);
            Box::new(move |g, sink| {
                if let Some(id) = x_id {
                    let ys: &[S] = &y;
                    let mut dx = vec![S::zero(); g.len()];
                    dx.par_chunks_mut(block).enumerate().for_each(|(o, chunk)| {
                        for i in 0..inner {
                            let at = |a: usize| o * block + a * inner + i;
                            let mut dot = S::zero();
                            for a in 0..len {
                                dot += g[at(a)] * ys[at(a)];
                            }
                            for a in 0..len {
                                chunk[a * inner + i] = ys[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    });
                    sink.accumulate(id, dx);
                }
            })
        })
    }

    /// Row gather: `out[..., :] = table[ids[...], :]`.
    pub fn embedding(table: &Tensor<S>, ids: &[usize], batch_shape: &[usize]) -> Tensor<S> {
        assert_eq!(table.ndim(), 2, "embedding: table must be rank 2, got {:?}", table.shape());
        assert_eq!(
            ids.len(),
            crate::tensor::shape::numel(batch_shape),
            "embedding: {} ids do not fill batch shape {batch_shape:?}",
            ids.len()
        );
        let (vocab, dim) = (table.shape()[0], table.shape()[1]);
        for &t in ids {
            assert!(t < vocab, "embedding: id {t} out of vocabulary range {vocab}");
        }
        let tdata = table.data_rc();
        let out = {
            let td: &[S] = &tdata;
            build_vec(ids.len() * dim, |i| td[ids[i / dim] * dim + i % dim])
        };
        let mut out_shape = batch_shape.to_vec();
        out_shape.push(dim);
        let tape = result_tape("embedding", &[table]);
        let t_id = table.node_id();
        let ids_owned: Vec<usize> = ids.to_vec();
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = t_id {
                    let mut dt = vec![S::zero(); vocab * dim];
                    for (row, &tok) in ids_owned.iter().enumerate() {
                        let src = row * dim;
                        let dst = tok * dim;
                        for j in 0..dim {
                            dt[dst + j] += g[src + j];
                        }
                    }
                    sink.accumulate(id, dt);
                }
            })
        })
    }

    /// Mean token cross-entropy of `(rows, vocab)` logits against target ids.
    /// Log-sum-exp and the mean accumulate in f64.
    pub fn cross_entropy_mean(logits: &Tensor<S>, targets: &[usize]) -> Tensor<S> {
        check_finite("cross_entropy_mean", &[logits]);
        assert_eq!(logits.ndim(), 2, "cross_entropy_mean: logits must be rank 2, got {:?}", logits.shape());
        let (rows, vocab) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(targets.len(), rows, "cross_entropy_mean: {} targets for {rows} rows", targets.len());
        for &t in targets {
            assert!(t < vocab, "cross_entropy_mean: target {t} out of vocabulary range {vocab}");
        }
        let x = logits.data_rc();
        let mut probs = vec![S::zero(); rows * vocab];
        let xs: &[S] = &x;
        let losses: Vec<f64> = probs
            .par_chunks_mut(vocab)
            .enumerate()
            .map(|(r, prow)| {
                let row = &xs[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(S::neg_infinity(), S::max).to_f64();
                let mut denom = 0.0f64;
                for (slot, &v) in prow.iter_mut().zip(row) {
                    let e = (v.to_f64() - max).exp();
                    *slot = S::from_f64(e);
                    denom += e;
                }
                let inv = S::from_f64(1.0 / denom);
                for slot in prow.iter_mut() {
                    *slot = *slot * inv;
                }
                denom.ln() - (row[targets[r]].to_f64() - max)
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / rows as f64;
        let tape = result_tape("cross_entropy_mean", &[logits]);
        let x_id = logits.node_id();
        let targets_owned: Vec<usize> = targets.to_vec();
        let probs_rc = Rc::new(probs);
        record_result(tape, vec![S::from_f64(mean)], vec![], |_| {
            let probs = Rc::clone(&probs_rc);
            Box::new(move |g, sink| {
                if let Some(id) = x_id {
                    let ps: &[S] = &probs;
                    let tg: &[usize] = &targets_owned;
                    let scale = g[0] * S::from_f64(1.0 / rows as f64);
                    let dx = build_vec(rows * vocab, |i| {
                        let (r, j) = (i / vocab, i % vocab);
                        let indicator = if j == tg[r] { S::one() } else { S::zero() };
                        (ps[i] - indicator) * scale
                    });
                    sink.accumulate(id, dx);
                }
            })
        })
    }

    /// Fused `2 * sigmoid(w . ctx + b)` over the last axis of `ctx`, clamped
    /// to the open interval (0, 2) at the element precision. All arithmetic
    /// runs in f64.
    pub fn gate_single(ctx: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        check_finite("gate_single", &[ctx, w, b]);
        let d = *ctx.shape().last().expect("gate_single: ctx must have rank >= 1");
        assert_eq!(w.shape(), &[d], "gate_single: weight shape {:?} does not match context width {d}", w.shape());
        assert_eq!(b.numel(), 1, "gate_single: bias must be a single scalar");
        let rows = ctx.numel() / d;
        let (cd, wd, bd) = (ctx.data_rc(), w.data_rc(), b.data_rc());
        let logits: Vec<f64> = (0..rows)
            .map(|r| {
                let mut acc = 0.0f64;
                for j in 0..d {
                    acc += cd[r * d + j].to_f64() * wd[j].to_f64();
                }
                acc + bd[0].to_f64()
            })
            .collect();
        let out: Vec<S> = logits.iter().map(|&l| clamp_gate::<S>(l)).collect();
        let out_shape = ctx.shape()[..ctx.ndim() - 1].to_vec();
        let tape = result_tape("gate_single", &[ctx, w, b]);
        let (c_id, w_id, b_id) = (ctx.node_id(), w.node_id(), b.node_id());
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                // d beta / d logit = 2 sigma (1 - sigma), evaluated in f64.
                let dlogit: Vec<f64> = logits
                    .iter()
                    .zip(g)
                    .map(|(&l, &gi)| {
                        let s = sigmoid_f64(l);
                        gi.to_f64() * 2.0 * s * (1.0 - s)
                    })
                    .collect();
                if let Some(id) = c_id {
                    let ws: &[S] = &wd;
                    let dc = build_vec(rows * d, |i| {
                        S::from_f64(dlogit[i / d] * ws[i % d].to_f64())
                    });
                    sink.accumulate(id, dc);
                }
                if let Some(id) = w_id {
                    let mut dw = vec![0.0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dw[j] += dlogit[r] * cd[r * d + j].to_f64();
                        }
                    }
                    sink.accumulate(id, dw.iter().map(|&v| S::from_f64(v)).collect());
                }
                if let Some(id) = b_id {
                    sink.accumulate(id, vec![S::from_f64(dlogit.iter().sum())]);
                }
            })
        })
    }

    /// Fused `2 * sigmoid(w2 . tanh(ctx @ w1 + b1) + b2)`, f64 throughout.
    pub fn gate_two_layer(
        ctx: &Tensor<S>,
        w1: &Tensor<S>,
        b1: &Tensor<S>,
        w2: &Tensor<S>,
        b2: &Tensor<S>,
    ) -> Tensor<S> {
        check_finite("gate_two_layer", &[ctx, w1, b1, w2, b2]);
        let d = *ctx.shape().last().expect("gate_two_layer: ctx must have rank >= 1");
        assert_eq!(w1.ndim(), 2, "gate_two_layer: w1 must be rank 2");
        assert_eq!(w1.shape()[0], d, "gate_two_layer: w1 shape {:?} does not match context width {d}", w1.shape());
        let hidden = w1.shape()[1];
        assert_eq!(b1.shape(), &[hidden], "gate_two_layer: b1 shape {:?} vs hidden {hidden}", b1.shape());
        assert_eq!(w2.shape(), &[hidden], "gate_two_layer: w2 shape {:?} vs hidden {hidden}", w2.shape());
        assert_eq!(b2.numel(), 1, "gate_two_layer: b2 must be a single scalar");
        let rows = ctx.numel() / d;
        let (cd, w1d, b1d, w2d, b2d) =
            (ctx.data_rc(), w1.data_rc(), b1.data_rc(), w2.data_rc(), b2.data_rc());
        let mut hidden_acts = vec![0.0f64; rows * hidden];
        let mut logits = vec![0.0f64; rows];
        for r in 0..rows {
            let mut logit = b2d[0].to_f64();
            for h in 0..hidden {
                let mut pre = b1d[h].to_f64();
                for j in 0..d {
                    pre += cd[r * d + j].to_f64() * w1d[j * hidden + h].to_f64();
                }
                let act = pre.tanh();
                hidden_acts[r * hidden + h] = act;
                logit += act * w2d[h].to_f64();
            }
            logits[r] = logit;
        }
        let out: Vec<S> = logits.iter().map(|&l| clamp_gate::<S>(l)).collect();
        let out_shape = ctx.shape()[..ctx.ndim() - 1].to_vec();
        let tape = result_tape("gate_two_layer", &[ctx, w1, b1, w2, b2]);
        let ids = [ctx.node_id(), w1.node_id(), b1.node_id(), w2.node_id(), b2.node_id()];
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                let mut dc = vec![0.0f64; rows * d];
                let mut dw1 = vec![0.0f64; d * hidden];
                let mut db1 = vec![0.0f64; hidden];
                let mut dw2 = vec![0.0f64; hidden];
                let mut db2 = 0.0f64;
                for r in 0..rows {
                    let s = sigmoid_f64(logits[r]);
                    let dlogit = g[r].to_f64() * 2.0 * s * (1.0 - s);
                    db2 += dlogit;
                    for h in 0..hidden {
                        let act = hidden_acts[r * hidden + h];
                        dw2[h] += dlogit * act;
                        let dpre = dlogit * w2d[h].to_f64() * (1.0 - act * act);
                        db1[h] += dpre;
                        for j in 0..d {
                            dw1[j * hidden + h] += dpre * cd[r * d + j].to_f64();
                            dc[r * d + j] += dpre * w1d[j * hidden + h].to_f64();
                        }
                    }
                }
                let emit = |v: &[f64]| v.iter().map(|&x| S::from_f64(x)).collect::<Vec<S>>();
                if let Some(id) = ids[0] {
                    sink.accumulate(id, emit(&dc));
                }
                if let Some(id) = ids[1] {
                    sink.accumulate(id, emit(&dw1));
                }
                if let Some(id) = ids[2] {
                    sink.accumulate(id, emit(&db1));
                }
                if let Some(id) = ids[3] {
                    sink.accumulate(id, emit(&dw2));
                }
                if let Some(id) = ids[4] {
                    sink.accumulate(id, vec![S::from_f64(db2)]);
                }
            })
        })
    }
}

/// RMS normalization over the last axis with a learned per-feature scale:
/// `x * rsqrt(mean(x^2) + eps) * scale`. Composed from primitives, so its
/// gradient follows from the recorded rules.
pub fn rms_norm<S: Scalar>(x: &Tensor<S>, scale: &Tensor<S>, eps: f64) -> Tensor<S> {
    let last = x.ndim() - 1;
    let inv = x.mul(x).mean_axis(last, true).add_scalar(S::from_f64(eps)).rsqrt();
    x.mul(&inv).mul(scale)
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Round `2 * sigmoid(logit)` to the element type, then clamp into the open
/// interval (0, 2): saturated logits may otherwise round to the endpoints.
fn clamp_gate<S: Scalar>(logit: f64) -> S {
    let beta = S::from_f64(2.0 * sigmoid_f64(logit));
    let two = S::from_f64(2.0);
    let hi = two - two * S::epsilon();
    let lo = S::min_positive_value();
    beta.max(lo).min(hi)
}
