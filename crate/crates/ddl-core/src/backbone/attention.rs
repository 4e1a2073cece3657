//! Causal multi-head attention with rotary position embedding and RMS
//! query/key normalization.

use crate::block::RMS_NORM_EPS;
use crate::param::{Binder, Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{ops::rms_norm, Tensor};

/// Large negative logit for masked positions; exp underflows to exactly 0,
/// so causality is exact after softmax.
const MASK_VALUE: f64 = -1e9;

/// Precomputed rotary tables for `(seq_len, head_dim / 2)`.
#[derive(Debug, Clone)]
pub struct RopeCache<S: Scalar> {
    cos: Vec<S>,
    sin: Vec<S>,
    seq_len: usize,
    half: usize,
}

impl<S: Scalar> RopeCache<S> {
    pub fn new(seq_len: usize, head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "head_dim must be even, got {head_dim}");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for pos in 0..seq_len {
            for i in 0..half {
                let theta = pos as f64 / base.powf(2.0 * i as f64 / head_dim as f64);
                cos.push(S::from_f64(theta.cos()));
                sin.push(S::from_f64(theta.sin()));
            }
        }
        RopeCache { cos, sin, seq_len, half }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Tables truncated to `seq` positions, shaped for broadcasting over
    /// `(batch, heads, seq, half)`.
    fn tables(&self, seq: usize) -> (Tensor<S>, Tensor<S>) {
        let n = seq * self.half;
        let cos = Tensor::from_vec(self.cos[..n].to_vec(), &[1, 1, seq, self.half]);
        let sin = Tensor::from_vec(self.sin[..n].to_vec(), &[1, 1, seq, self.half]);
        (cos, sin)
    }
}

/// Rotate pairs `(x_i, x_{i+half})` by the cached position angles.
fn apply_rotary<S: Scalar>(x: &Tensor<S>, cos: &Tensor<S>, sin: &Tensor<S>) -> Tensor<S> {
    let hd = *x.shape().last().unwrap();
    let half = hd / 2;
    let x1 = x.slice_axis(3, 0, half);
    let x2 = x.slice_axis(3, half, hd);
    let out1 = x1.mul(cos).sub(&x2.mul(sin));
    let out2 = x1.mul(sin).add(&x2.mul(cos));
    Tensor::concat(3, &[&out1, &out2])
}

/// Lower-triangular causal mask `(1, 1, seq, seq)`.
fn causal_mask<S: Scalar>(seq: usize) -> Tensor<S> {
    let mut m = vec![S::zero(); seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            m[i * seq + j] = S::from_f64(MASK_VALUE);
        }
    }
    Tensor::from_vec(m, &[1, 1, seq, seq])
}

#[derive(Debug, Clone)]
pub struct Attention<S: Scalar> {
    pub n_heads: usize,
    pub head_dim: usize,
    w_q: Param<S>,
    w_k: Param<S>,
    w_v: Param<S>,
    w_o: Param<S>,
    q_scale: Param<S>,
    k_scale: Param<S>,
}

impl<S: Scalar> Attention<S> {
    pub fn new(prefix: &str, d: usize, n_heads: usize, head_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let width = n_heads * head_dim;
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = 1.0 / (width as f64).sqrt();
        Attention {
            n_heads,
            head_dim,
            w_q: Param::gaussian(format!("{prefix}.w_q"), &[d, width], std_in, rng, true),
            w_k: Param::gaussian(format!("{prefix}.w_k"), &[d, width], std_in, rng, true),
            w_v: Param::gaussian(format!("{prefix}.w_v"), &[d, width], std_in, rng, true),
            w_o: Param::gaussian(format!("{prefix}.w_o"), &[width, d], std_out, rng, true),
            q_scale: Param::full(format!("{prefix}.q_scale"), &[head_dim], S::one(), false),
            k_scale: Param::full(format!("{prefix}.k_scale"), &[head_dim], S::one(), false),
        }
    }

    pub fn forward(&self, binder: &mut Binder<S>, x: &Tensor<S>, rope: &RopeCache<S>) -> Tensor<S> {
        self.forward_parts(binder, x, rope).0
    }

    /// Returns `(output, attention probabilities (batch, heads, seq, seq))`.
    pub fn forward_parts(
        &self,
        binder: &mut Binder<S>,
        x: &Tensor<S>,
        rope: &RopeCache<S>,
    ) -> (Tensor<S>, Tensor<S>) {
        assert_eq!(x.ndim(), 3, "attention expects (batch, seq, d), got {:?}", x.shape());
        let (b, t, _d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(
            t <= rope.seq_len(),
            "sequence overflow: seq {t} exceeds configured seq_len {}",
            rope.seq_len()
        );
        let (h, hd) = (self.n_heads, self.head_dim);

        let split = |p: &Param<S>, binder: &mut Binder<S>| {
            let w = binder.bind(p);
            x.matmul(&w).reshape(&[b, t, h, hd]).swap_axes(1, 2) // (B,H,T,hd)
        };
        let q = split(&self.w_q, binder);
        let k = split(&self.w_k, binder);
        let v = split(&self.w_v, binder);

        // RMS query/key normalization, then rotary rotation.
        let qs = binder.bind(&self.q_scale);
        let ks = binder.bind(&self.k_scale);
        let q = rms_norm(&q, &qs, RMS_NORM_EPS);
        let k = rms_norm(&k, &ks, RMS_NORM_EPS);
        let (cos, sin) = rope.tables(t);
        let q = apply_rotary(&q, &cos, &sin);
        let k = apply_rotary(&k, &cos, &sin);

        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let scores = q.matmul(&k.swap_axes(2, 3)).mul_scalar(scale).add(&causal_mask(t));
        let probs = scores.softmax_axis(3);
        let mixed = probs.matmul(&v).swap_axes(1, 2).reshape(&[b, t, h * hd]);
        let w_o = binder.bind(&self.w_o);
        (mixed.matmul(&w_o), probs)
    }
}

impl<S: Scalar> Parameterized<S> for Attention<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
        f(&self.w_o);
        f(&self.q_scale);
        f(&self.k_scale);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_o);
        f(&mut self.q_scale);
        f(&mut self.k_scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn single_token_softmax_is_trivial() {
        let mut r = rng();
        let attn: Attention<f64> = Attention::new("a", 8, 2, 4, &mut r);
        let rope = RopeCache::new(16, 4, 10_000.0);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let x = Tensor::from_vec((0..8).map(|_| r.gen_range(-1.0..1.0)).collect(), &[1, 1, 8]);
        let (_, probs) = attn.forward_parts(&mut binder, &x, &rope);
        assert_eq!(probs.shape(), &[1, 2, 1, 1]);
        for &p in probs.data() {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut r = rng();
        let mut attn: Attention<f64> = Attention::new("a", 8, 2, 4, &mut r);
        attn.w_v.data = vec![0.0; 8 * 8];
        attn.w_o.data = attn.w_o.data.clone();
        let rope = RopeCache::new(16, 4, 10_000.0);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let x = Tensor::from_vec((0..24).map(|_| r.gen_range(-1.0..1.0)).collect(), &[1, 3, 8]);
        let out = attn.forward(&mut binder, &x, &rope);
        for &v in out.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng();
        let attn: Attention<f64> = Attention::new("a", 8, 2, 4, &mut r);
        let rope = RopeCache::new(16, 4, 10_000.0);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let x = Tensor::from_vec((0..2 * 5 * 8).map(|_| r.gen_range(-1.0..1.0)).collect(), &[2, 5, 8]);
        let (_, probs) = attn.forward_parts(&mut binder, &x, &rope);
        let sums = probs.sum_axis(3, false);
        for &s in sums.data() {
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn matches_naive_double_loop_oracle() {
        // d=8, heads=2, T=3 against an O(T^2) per-head reference.
        let mut r = rng();
        let attn: Attention<f64> = Attention::new("a", 8, 2, 4, &mut r);
        let rope = RopeCache::new(8, 4, 10_000.0);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let (b, t, d, h, hd) = (1usize, 3usize, 8usize, 2usize, 4usize);
        let x = Tensor::from_vec((0..t * d).map(|_| r.gen_range(-1.0..1.0)).collect(), &[b, t, d]);
        let out = attn.forward(&mut binder, &x, &rope);

        // Naive reference, recomputing every piece with plain loops.
        let matv = |w: &[f64], vin: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            let mut o = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    o[j] += vin[i] * w[i * cols + j];
                }
            }
            o
        };
        let norm = |v: &mut [f64]| {
            let ms = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
            let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
            for a in v.iter_mut() {
                *a *= inv;
            }
        };
        let rot = |v: &mut [f64], pos: usize| {
            for i in 0..hd / 2 {
                let theta = pos as f64 / 10_000.0f64.powf(2.0 * i as f64 / hd as f64);
                let (c, s) = (theta.cos(), theta.sin());
                let (a, bb) = (v[i], v[i + hd / 2]);
                v[i] = a * c - bb * s;
                v[i + hd / 2] = a * s + bb * c;
            }
        };
        let mut want = vec![0.0; t * d];
        let mut mixed_all = vec![0.0; t * h * hd];
        for head in 0..h {
            // Per-token q, k, v for this head.
            let mut qs = Vec::new();
            let mut ks_ = Vec::new();
            let mut vs = Vec::new();
            for ti in 0..t {
                let xr = &x.data()[ti * d..(ti + 1) * d];
                let qfull = matv(&attn.w_q.data, xr, d, h * hd);
                let kfull = matv(&attn.w_k.data, xr, d, h * hd);
                let vfull = matv(&attn.w_v.data, xr, d, h * hd);
                let mut q = qfull[head * hd..(head + 1) * hd].to_vec();
                let mut k = kfull[head * hd..(head + 1) * hd].to_vec();
                norm(&mut q);
                norm(&mut k);
                rot(&mut q, ti);
                rot(&mut k, ti);
                qs.push(q);
                ks_.push(k);
                vs.push(vfull[head * hd..(head + 1) * hd].to_vec());
            }
            for ti in 0..t {
                let mut logits = Vec::new();
                for tj in 0..=ti {
                    let dot: f64 = qs[ti].iter().zip(&ks_[tj]).map(|(a, b)| a * b).sum();
                    logits.push(dot / (hd as f64).sqrt());
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..hd {
                    let mut acc = 0.0;
                    for tj in 0..=ti {
                        acc += exps[tj] / z * vs[tj][j];
                    }
                    mixed_all[ti * h * hd + head * hd + j] = acc;
                }
            }
        }
        for ti in 0..t {
            let o = matv(&attn.w_o.data, &mixed_all[ti * h * hd..(ti + 1) * h * hd], h * hd, d);
            want[ti * d..(ti + 1) * d].copy_from_slice(&o);
        }
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn causal_mask_no_lookahead() {
        let mut r = rng();
        let attn: Attention<f64> = Attention::new("a", 8, 2, 4, &mut r);
        let rope = RopeCache::new(8, 4, 10_000.0);
        let run = |xd: Vec<f64>| {
            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            attn.forward(&mut binder, &Tensor::from_vec(xd, &[1, 4, 8]), &rope)
        };
        let base: Vec<f64> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
        let out_a = run(base.clone());
        let mut bumped = base.clone();
        for v in bumped[3 * 8..4 * 8].iter_mut() {
            *v += 1.0;
        }
        let out_b = run(bumped);
        for ti in 0..3 {
            for j in 0..8 {
                assert_eq!(
                    out_a.data()[ti * 8 + j],
                    out_b.data()[ti * 8 + j],
                    "token {ti} saw the future"
                );
            }
        }
    }

    #[test]
    #[should_panic(expected = "sequence overflow")]
    fn sequence_overflow_rejected() {
        let mut r = rng();
        let attn: Attention<f64> = Attention::new("a", 8, 2, 4, &mut r);
        let rope = RopeCache::new(2, 4, 10_000.0);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let x: Tensor<f64> = Tensor::zeros(&[1, 3, 8]);
        let _ = attn.forward(&mut binder, &x, &rope);
    }
}
