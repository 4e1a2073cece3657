//! Shape-changing operations: reshape, axis swap, slice, concat, broadcast.

use super::{build_vec, materialize_broadcast, record_result, reduce_to_shape};
use crate::scalar::Scalar;
use crate::tensor::shape::{self, split_at_axis};
use crate::tensor::{check_finite, result_tape, Tensor};

impl<S: Scalar> Tensor<S> {
    /// Reinterpret the contiguous data under a new shape. No copy.
    pub fn reshape(&self, new_shape: &[usize]) -> Tensor<S> {
        assert_eq!(
            self.numel(),
            shape::numel(new_shape),
            "reshape: cannot view shape {:?} as {:?}",
            self.shape(),
            new_shape
        );
        match self.tape().cloned() {
            None => Tensor::from_rc(self.data_rc(), new_shape.to_vec()),
            Some(tp) => {
                let x_id = self.node_id();
                let backward = Box::new(move |g: &[S], sink: &mut crate::tensor::tape::GradSink<S>| {
                    if let Some(id) = x_id {
                        sink.accumulate(id, g.to_vec());
                    }
                });
                let id = tp.push_node(self.numel(), Some(backward));
                Tensor::attached(self.data_rc(), new_shape.to_vec(), tp, id)
            }
        }
    }

    /// Insert a length-1 axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Tensor<S> {
        let mut s = self.shape().to_vec();
        assert!(axis <= s.len(), "unsqueeze: axis {axis} out of range for shape {s:?}");
        s.insert(axis, 1);
        self.reshape(&s)
    }

    /// Materialized transpose of axes `ax0` and `ax1`.
    pub fn swap_axes(&self, ax0: usize, ax1: usize) -> Tensor<S> {
        check_finite("swap_axes", &[self]);
        let nd = self.ndim();
        assert!(ax0 < nd && ax1 < nd, "swap_axes: axes ({ax0},{ax1}) out of range for shape {:?}", self.shape());
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(ax0, ax1);
        let in_strides = shape::contiguous_strides(self.shape());
        let mut read_strides = in_strides.clone();
        read_strides.swap(ax0, ax1);
        let x = self.data_rc();
        let out = gather_strided(&x, &out_shape, &read_strides);
        let tape = result_tape("swap_axes", &[self]);
        let x_id = self.node_id();
        let in_shape = self.shape().to_vec();
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = x_id {
                    // Transposing the gradient back is the same stride trick.
                    let mut g_shape = in_shape.clone();
                    g_shape.swap(ax0, ax1);
                    let mut read = shape::contiguous_strides(&g_shape);
                    read.swap(ax0, ax1);
                    sink.accumulate(id, gather_strided(g, &in_shape, &read));
                }
            })
        })
    }

    /// Copy of the half-open range `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor<S> {
        check_finite("slice_axis", &[self]);
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        assert!(
            start <= end && end <= len,
            "slice_axis: range {start}..{end} out of bounds for axis {axis} of shape {:?}",
            self.shape()
        );
        let span = end - start;
        let x = self.data_rc();
        let out = {
            let xs: &[S] = &x;
            build_vec(outer * span * inner, |idx| {
                let o = idx / (span * inner);
                let rest = idx % (span * inner);
                let a = rest / inner;
                let i = rest % inner;
                xs[(o * len + start + a) * inner + i]
            })
        };
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = span;
        let tape = result_tape("slice_axis", &[self]);
        let x_id = self.node_id();
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                if let Some(id) = x_id {
                    let mut dx = vec![S::zero(); outer * len * inner];
                    for o in 0..outer {
                        for a in 0..span {
                            let src = (o * span + a) * inner;
                            let dst = (o * len + start + a) * inner;
                            dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                        }
                    }
                    sink.accumulate(id, dx);
                }
            })
        })
    }

    /// Concatenate along `axis`. All other axes must match.
    pub fn concat(axis: usize, parts: &[&Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty(), "concat: no inputs");
        check_finite("concat", parts);
        let first = parts[0].shape();
        let mut total = 0;
        for p in parts {
            assert_eq!(p.ndim(), first.len(), "concat: rank mismatch {:?} vs {:?}", p.shape(), first);
            for (ax, (&a, &b)) in p.shape().iter().zip(first.iter()).enumerate() {
                assert!(
                    ax == axis || a == b,
                    "concat: shapes {:?} and {:?} differ outside axis {axis}",
                    p.shape(),
                    first
                );
            }
            total += p.shape()[axis];
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let spans: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut out = vec![S::zero(); outer * total * inner];
        let mut offset = 0;
        for (p, &span) in parts.iter().zip(&spans) {
            let pd = p.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * span * inner;
                out[dst..dst + span * inner].copy_from_slice(&pd[src..src + span * inner]);
            }
            offset += span;
        }
        let tape = result_tape("concat", &parts.iter().copied().collect::<Vec<_>>());
        let ids: Vec<Option<usize>> = parts.iter().map(|p| p.node_id()).collect();
        record_result(tape, out, out_shape, |_| {
            Box::new(move |g, sink| {
                let mut offset = 0;
                for (&id, &span) in ids.iter().zip(&spans) {
                    if let Some(id) = id {
                        let mut dp = vec![S::zero(); outer * span * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * span * inner;
                            dp[dst..dst + span * inner].copy_from_slice(&g[src..src + span * inner]);
                        }
                        sink.accumulate(id, dp);
                    }
                    offset += span;
                }
            })
        })
    }

    /// Materialized broadcast to a larger shape.
    pub fn broadcast_to(&self, out_shape: &[usize]) -> Tensor<S> {
        check_finite("broadcast_to", &[self]);
        let check = shape::broadcast_shapes("broadcast_to", self.shape(), out_shape);
        assert_eq!(check, out_shape, "broadcast_to: {:?} does not broadcast to {:?}", self.shape(), out_shape);
        let out = materialize_broadcast(self.data(), self.shape(), out_shape);
        let tape = result_tape("broadcast_to", &[self]);
        let x_id = self.node_id();
        let (in_sh, out_sh) = (self.shape().to_vec(), out_shape.to_vec());
        record_result(tape, out, out_shape.to_vec(), |_| {
            Box::new(move |g, sink| {
                if let Some(id) = x_id {
                    sink.accumulate(id, reduce_to_shape(g, &out_sh, &in_sh));
                }
            })
        })
    }
}

fn gather_strided<S: Scalar>(src: &[S], out_shape: &[usize], read_strides: &[usize]) -> Vec<S> {
    let offsets: Vec<usize> = shape::StrideWalker::new(out_shape, read_strides).collect();
    build_vec(offsets.len(), |i| src[offsets[i]])
}
