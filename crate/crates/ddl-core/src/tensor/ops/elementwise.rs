//! Elementwise binary/unary operations with NumPy-style broadcasting.

use std::rc::Rc;

use super::{build_vec, materialize_broadcast, record_result, reduce_to_shape, zip_broadcast};
use crate::scalar::Scalar;
use crate::tensor::{check_finite, result_tape, Tensor};

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, rhs: &Tensor<S>) -> Tensor<S> {
        check_finite("add", &[self, rhs]);
        let (out, out_shape) = zip_broadcast("add", self, rhs, |a, b| a + b);
        let tape = result_tape("add", &[self, rhs]);
        let (a_id, b_id) = (self.node_id(), rhs.node_id());
        let (a_sh, b_sh, o_sh) = (self.shape().to_vec(), rhs.shape().to_vec(), out_shape.clone());
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = a_id {
                    sink.accumulate(id, reduce_to_shape(g, &o_sh, &a_sh));
                }
                if let Some(id) = b_id {
                    sink.accumulate(id, reduce_to_shape(g, &o_sh, &b_sh));
                }
            })
        })
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Tensor<S> {
        check_finite("sub", &[self, rhs]);
        let (out, out_shape) = zip_broadcast("sub", self, rhs, |a, b| a - b);
        let tape = result_tape("sub", &[self, rhs]);
        let (a_id, b_id) = (self.node_id(), rhs.node_id());
        let (a_sh, b_sh, o_sh) = (self.shape().to_vec(), rhs.shape().to_vec(), out_shape.clone());
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = a_id {
                    sink.accumulate(id, reduce_to_shape(g, &o_sh, &a_sh));
                }
                if let Some(id) = b_id {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    sink.accumulate(id, reduce_to_shape(&neg, &o_sh, &b_sh));
                }
            })
        })
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        check_finite("mul", &[self, rhs]);
        let (out, out_shape) = zip_broadcast("mul", self, rhs, |a, b| a * b);
        let tape = result_tape("mul", &[self, rhs]);
        let (a_id, b_id) = (self.node_id(), rhs.node_id());
        let (a_sh, b_sh, o_sh) = (self.shape().to_vec(), rhs.shape().to_vec(), out_shape.clone());
        let (a_data, b_data) = (self.data_rc(), rhs.data_rc());
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = a_id {
                    let b_full = materialize_broadcast(&b_data, &b_sh, &o_sh);
                    let prod = build_vec(g.len(), |i| g[i] * b_full[i]);
                    sink.accumulate(id, reduce_to_shape(&prod, &o_sh, &a_sh));
                }
                if let Some(id) = b_id {
                    let a_full = materialize_broadcast(&a_data, &a_sh, &o_sh);
                    let prod = build_vec(g.len(), |i| g[i] * a_full[i]);
                    sink.accumulate(id, reduce_to_shape(&prod, &o_sh, &b_sh));
                }
            })
        })
    }

    /// Elementwise maximum. Gradient routes to the left operand on ties.
    pub fn maximum(&self, rhs: &Tensor<S>) -> Tensor<S> {
        check_finite("maximum", &[self, rhs]);
        let (out, out_shape) = zip_broadcast("maximum", self, rhs, |a, b| if a >= b { a } else { b });
        let tape = result_tape("maximum", &[self, rhs]);
        let (a_id, b_id) = (self.node_id(), rhs.node_id());
        let (a_sh, b_sh, o_sh) = (self.shape().to_vec(), rhs.shape().to_vec(), out_shape.clone());
        let (a_data, b_data) = (self.data_rc(), rhs.data_rc());
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                let a_full = materialize_broadcast(&a_data, &a_sh, &o_sh);
                let b_full = materialize_broadcast(&b_data, &b_sh, &o_sh);
                if let Some(id) = a_id {
                    let masked =
                        build_vec(g.len(), |i| if a_full[i] >= b_full[i] { g[i] } else { S::zero() });
                    sink.accumulate(id, reduce_to_shape(&masked, &o_sh, &a_sh));
                }
                if let Some(id) = b_id {
                    let masked =
                        build_vec(g.len(), |i| if a_full[i] >= b_full[i] { S::zero() } else { g[i] });
                    sink.accumulate(id, reduce_to_shape(&masked, &o_sh, &b_sh));
                }
            })
        })
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        self.unary_op("add_scalar", move |x| x + c, move |_, _| S::one())
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        self.unary_op("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor<S> {
        self.unary_op("neg", |x| -x, |_, _| -S::one())
    }

    pub fn sqrt(&self) -> Tensor<S> {
        self.unary_op("sqrt", |x| x.sqrt(), |_, y| S::from_f64(0.5) / y)
    }

    pub fn rsqrt(&self) -> Tensor<S> {
        self.unary_op("rsqrt", |x| x.sqrt().recip(), |_, y| S::from_f64(-0.5) * y * y * y)
    }

    pub fn exp(&self) -> Tensor<S> {
        self.unary_op("exp", |x| x.exp(), |_, y| y)
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.unary_op("tanh", |x| x.tanh(), |_, y| S::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary_op("sigmoid", sigmoid_stable, |_, y| y * (S::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<S> {
        self.unary_op(
            "silu",
            |x| x * sigmoid_stable(x),
            |x, _| {
                let s = sigmoid_stable(x);
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    fn unary_op(
        &self,
        name: &'static str,
        fwd: impl Fn(S) -> S + Sync,
        dydx: impl Fn(S, S) -> S + Sync + 'static,
    ) -> Tensor<S> {
        check_finite(name, &[self]);
        let x = self.data_rc();
        let out = {
            let xs: &[S] = &x;
            build_vec(xs.len(), |i| fwd(xs[i]))
        };
        let tape = result_tape(name, &[self]);
        let x_id = self.node_id();
        let out_shape = self.shape().to_vec();
        record_result(tape, out, out_shape, |out_rc| {
            let y = Rc::clone(out_rc);
            Box::new(move |g, sink| {
                if let Some(id) = x_id {
                    let (xs, ys): (&[S], &[S]) = (&x, &y);
                    sink.accumulate(id, build_vec(g.len(), |i| g[i] * dydx(xs[i], ys[i])));
                }
            })
        })
    }
}

#[inline]
pub(crate) fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tensor;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x: Tensor<f64> = Tensor::scalar(0.0);
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn broadcast_add_row() {
        let a: Tensor<f64> = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[3]);
        let c = a.add(&b);
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    #[should_panic(expected = "shapes [2, 3] and [4] are not broadcast-compatible")]
    fn add_shape_mismatch_names_both() {
        let a: Tensor<f64> = Tensor::zeros(&[2, 3]);
        let b: Tensor<f64> = Tensor::zeros(&[4]);
        let _ = a.add(&b);
    }

    #[test]
    fn square_gradient() {
        let tape = crate::tensor::Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3]);
        let loss = x.mul(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape: crate::tensor::Tape<f64> = crate::tensor::Tape::new();
        let w = tape.leaf(vec![0.0], &[1]);
        let loss = w.sigmoid().sum_all();
        loss.backward();
        assert!((w.grad().unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = x*x + x  →  d/dx = 2x + 1
        let tape = crate::tensor::Tape::new();
        let x = tape.leaf(vec![3.0], &[1]);
        let loss = x.mul(&x).add(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }
}
