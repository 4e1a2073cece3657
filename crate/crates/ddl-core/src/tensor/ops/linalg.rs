//! Matrix products. Two supported forms:
//!
//!   - `(..., m, k) @ (k, n)`: leading axes fold into rows, one dense gemm;
//!   - `(B..., m, k) @ (B..., k, n)`: equal leading axes, one gemm per batch.

use rayon::prelude::*;

use super::record_result;
use crate::scalar::Scalar;
use crate::tensor::{check_finite, result_tape, Tensor};

fn transpose_mat<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

impl<S: Scalar> Tensor<S> {
    pub fn matmul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        check_finite("matmul", &[self, rhs]);
        assert!(
            self.ndim() >= 2 && rhs.ndim() >= 2,
            "matmul: operands must have rank >= 2, got {:?} and {:?}",
            self.shape(),
            rhs.shape()
        );
        let (m, k) = (self.shape()[self.ndim() - 2], self.shape()[self.ndim() - 1]);
        let (k2, n) = (rhs.shape()[rhs.ndim() - 2], rhs.shape()[rhs.ndim() - 1]);
        assert_eq!(
            k,
            k2,
            "matmul: inner dimensions disagree for shapes {:?} and {:?}",
            self.shape(),
            rhs.shape()
        );
        if rhs.ndim() == 2 {
            self.matmul_folded(rhs, m, k, n)
        } else {
            assert_eq!(
                self.shape()[..self.ndim() - 2],
                rhs.shape()[..rhs.ndim() - 2],
                "matmul: batch axes disagree for shapes {:?} and {:?}",
                self.shape(),
                rhs.shape()
            );
            self.matmul_batched(rhs, m, k, n)
        }
    }

    /// `(..., m, k) @ (k, n)` via a single gemm over folded rows.
    fn matmul_folded(&self, rhs: &Tensor<S>, m: usize, k: usize, n: usize) -> Tensor<S> {
        let rows: usize = self.shape()[..self.ndim() - 1].iter().product();
        let a = self.data_rc();
        let b = rhs.data_rc();
        let mut out = vec![S::zero(); rows * n];
        S::gemm(rows, k, n, &a, &b, &mut out);
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let tape = result_tape("matmul", &[self, rhs]);
        let (a_id, b_id) = (self.node_id(), rhs.node_id());
        let _ = m;
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = a_id {
                    // dA = g @ B^T
                    let bt = transpose_mat(&b, k, n);
                    let mut da = vec![S::zero(); rows * k];
                    S::gemm(rows, n, k, g, &bt, &mut da);
                    sink.accumulate(id, da);
                }
                if let Some(id) = b_id {
                    // dB = A^T @ g
                    let at = transpose_mat(&a, rows, k);
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(k, rows, n, &at, g, &mut db);
                    sink.accumulate(id, db);
                }
            })
        })
    }

    /// `(B..., m, k) @ (B..., k, n)` with one gemm per batch element.
    fn matmul_batched(&self, rhs: &Tensor<S>, m: usize, k: usize, n: usize) -> Tensor<S> {
        let batch: usize = self.shape()[..self.ndim() - 2].iter().product();
        let a = self.data_rc();
        let b = rhs.data_rc();
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (ad, bd): (&[S], &[S]) = (&a, &b);
            out.par_chunks_mut(m * n).enumerate().for_each(|(bi, chunk)| {
                S::gemm(m, k, n, &ad[bi * m * k..(bi + 1) * m * k], &bd[bi * k * n..(bi + 1) * k * n], chunk);
            });
        }
        let mut out_shape = self.shape().to_vec();
        let nd = out_shape.len();
        out_shape[nd - 1] = n;
        let tape = result_tape("matmul", &[self, rhs]);
        let (a_id, b_id) = (self.node_id(), rhs.node_id());
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = a_id {
                    let bd: &[S] = &b;
                    let mut da = vec![S::zero(); batch * m * k];
                    da.par_chunks_mut(m * k).enumerate().for_each(|(bi, chunk)| {
                        let bt = transpose_mat(&bd[bi * k * n..(bi + 1) * k * n], k, n);
                        S::gemm(m, n, k, &g[bi * m * n..(bi + 1) * m * n], &bt, chunk);
                    });
                    sink.accumulate(id, da);
                }
                if let Some(id) = b_id {
                    let ad: &[S] = &a;
                    let mut db = vec![S::zero(); batch * k * n];
                    db.par_chunks_mut(k * n).enumerate().for_each(|(bi, chunk)| {
                        let at = transpose_mat(&ad[bi * m * k..(bi + 1) * m * k], m, k);
                        S::gemm(k, m, n, &at, &g[bi * m * n..(bi + 1) * m * n], chunk);
                    });
                    sink.accumulate(id, db);
                }
            })
        })
    }

    /// Dot product of two equal-length rank-1 tensors, as a rank-0 tensor.
    pub fn dot(&self, rhs: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.ndim(), 1, "dot: lhs must be rank 1, got {:?}", self.shape());
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "dot: shapes {:?} and {:?} disagree",
            self.shape(),
            rhs.shape()
        );
        self.mul(rhs).sum_all()
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] @ [[1],[1]] = [[3],[7]]
        let a: Tensor<f64> = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::from_vec(vec![1.0, 1.0], &[2, 1]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_gradients() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2]);
        let b = tape.leaf(vec![3.0, 4.0], &[2, 1]);
        let loss = a.matmul(&b).sum_all();
        loss.backward();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn batched_matches_loop() {
        let a: Tensor<f64> =
            Tensor::from_vec((0..12).map(|v| v as f64 * 0.5 - 2.0).collect(), &[2, 2, 3]);
        let b = Tensor::from_vec((0..18).map(|v| v as f64 * 0.25 - 1.0).collect(), &[2, 3, 3]);
        let c = a.matmul(&b);
        for bi in 0..2 {
            for r in 0..2 {
                for col in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += a.data()[bi * 6 + r * 3 + k] * b.data()[bi * 9 + k * 3 + col];
                    }
                    assert!((c.data()[bi * 6 + r * 3 + col] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_mismatch() {
        let a: Tensor<f64> = Tensor::zeros(&[2, 3]);
        let b: Tensor<f64> = Tensor::zeros(&[4, 5]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn matmul_associativity_small() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng| {
                Tensor::<f64>::from_vec((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[4, 4])
            };
            let a = rand_mat(&mut rng);
            let b = rand_mat(&mut rng);
            let c = rand_mat(&mut rng);
            let left = a.matmul(&b).matmul(&c);
            let right = a.matmul(&b.matmul(&c));
            for (l, r) in left.data().iter().zip(right.data()) {
                assert!((l - r).abs() < 1e-12, "associativity violated: {l} vs {r}");
            }
        }
    }
}
