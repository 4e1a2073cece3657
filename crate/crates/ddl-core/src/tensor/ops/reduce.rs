//! Reductions over an axis or the whole tensor.

use super::{build_vec, record_result};
use crate::scalar::Scalar;
use crate::tensor::shape::split_at_axis;
use crate::tensor::{check_finite, result_tape, Tensor};

impl<S: Scalar> Tensor<S> {
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor<S> {
        self.reduce_axis("sum_axis", axis, keepdim, false)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor<S> {
        self.reduce_axis("mean_axis", axis, keepdim, true)
    }

    fn reduce_axis(&self, name: &'static str, axis: usize, keepdim: bool, mean: bool) -> Tensor<S> {
        check_finite(name, &[self]);
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let scale = if mean { S::from_f64(1.0 / len as f64) } else { S::one() };
        let x = self.data_rc();
        let xs: &[S] = &x;
        let out = build_vec(outer * inner, |oi| {
            let (o, i) = (oi / inner, oi % inner);
            let mut acc = S::zero();
            let base = o * len * inner + i;
            for a in 0..len {
                acc += xs[base + a * inner];
            }
            acc * scale
        });
        let mut out_shape = self.shape().to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let tape = result_tape(name, &[self]);
        let x_id = self.node_id();
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = x_id {
                    let dx = build_vec(outer * len * inner, |idx| {
                        let o = idx / (len * inner);
                        let i = idx % inner;
                        g[o * inner + i] * scale
                    });
                    sink.accumulate(id, dx);
                }
            })
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        check_finite("sum_all", &[self]);
        let total: S = self.data().iter().copied().sum();
        let tape = result_tape("sum_all", &[self]);
        let x_id = self.node_id();
        let n = self.numel();
        record_result(tape, vec![total], vec![], |_| {
            Box::new(move |g, sink| {
                if let Some(id) = x_id {
                    sink.accumulate(id, vec![g[0]; n]);
                }
            })
        })
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_f64(self.numel() as f64);
        self.sum_all().mul_scalar(n.recip())
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn sum_over_axis_of_ones() {
        // 3×4 ones, axis 1 → [4,4,4]
        let x: Tensor<f64> = Tensor::full(&[3, 4], 1.0);
        let s = x.sum_axis(1, false);
        assert_eq!(s.shape(), &[3]);
        assert_eq!(s.data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn mean_axis_keepdim() {
        let x: Tensor<f64> = Tensor::from_vec(vec![1.0, 3.0, 5.0, 7.0], &[2, 2]);
        let m = x.mean_axis(1, true);
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.data(), &[2.0, 6.0]);
    }

    #[test]
    fn sum_axis_gradient_broadcasts_back() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let loss = x.sum_axis(0, false).mul(&Tensor::from_vec(vec![10.0, 1.0], &[2])).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![10.0, 1.0, 10.0, 1.0]);
    }
}
