//! Tensor operations: forward kernels plus their recorded backward rules.

mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod structural;

pub use nn::rms_norm;

use std::rc::Rc;

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::shape::{self, broadcast_strides, StrideWalker};
use crate::tensor::tape::{BackwardFn, Tape};
use crate::tensor::Tensor;

const PAR_THRESHOLD: usize = 1 << 15;
const PAR_CHUNK: usize = 1 << 13;

/// Fill a length-`n` vector from an index function, in parallel when large.
/// Each element is produced independently, so the result does not depend on
/// the thread count.
pub(crate) fn build_vec<S: Scalar>(n: usize, f: impl Fn(usize) -> S + Sync) -> Vec<S> {
    if n < PAR_THRESHOLD {
        return (0..n).map(f).collect();
    }
    let mut v = vec![S::zero(); n];
    v.par_chunks_mut(PAR_CHUNK).enumerate().for_each(|(ci, chunk)| {
        let base = ci * PAR_CHUNK;
        for (j, slot) in chunk.iter_mut().enumerate() {
            *slot = f(base + j);
        }
    });
    v
}

/// How one operand of a broadcast operation is read at each output index.
enum ReadPlan {
    /// Same shape as the output.
    Direct,
    /// Single element.
    Scalar,
    /// Leading axes broadcast: element `i % period`.
    Tile(usize),
    /// Trailing axes broadcast: element `i / inner`.
    Repeat(usize),
    /// General case: precomputed strided offsets.
    Offsets(Vec<usize>),
}

impl ReadPlan {
    fn build(shape_in: &[usize], out_shape: &[usize]) -> ReadPlan {
        let n_in = shape::numel(shape_in);
        let n_out = shape::numel(out_shape);
        if n_in == 1 {
            return ReadPlan::Scalar;
        }
        if shape_in == out_shape {
            return ReadPlan::Direct;
        }
        // Pad to output rank.
        let pad = out_shape.len() - shape_in.len();
        let padded: Vec<usize> =
            (0..out_shape.len()).map(|i| if i < pad { 1 } else { shape_in[i - pad] }).collect();
        let first_real = padded.iter().position(|&d| d != 1).unwrap();
        let last_real = padded.iter().rposition(|&d| d != 1).unwrap();
        if padded[first_real..] == out_shape[first_real..] {
            return ReadPlan::Tile(n_in);
        }
        if padded[..=last_real] == out_shape[..=last_real] {
            return ReadPlan::Repeat(n_out / n_in);
        }
        let strides = broadcast_strides(shape_in, out_shape);
        ReadPlan::Offsets(StrideWalker::new(out_shape, &strides).collect())
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            ReadPlan::Direct => i,
            ReadPlan::Scalar => 0,
            ReadPlan::Tile(period) => i % period,
            ReadPlan::Repeat(inner) => i / inner,
            ReadPlan::Offsets(offs) => offs[i],
        }
    }
}

/// Elementwise combine with broadcasting. Returns output data and shape.
pub(crate) fn zip_broadcast<S: Scalar>(
    op: &str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S + Sync,
) -> (Vec<S>, Vec<usize>) {
    let out_shape = shape::broadcast_shapes(op, a.shape(), b.shape());
    let n = shape::numel(&out_shape);
    let pa = ReadPlan::build(a.shape(), &out_shape);
    let pb = ReadPlan::build(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let out = build_vec(n, |i| f(ad[pa.index(i)], bd[pb.index(i)]));
    (out, out_shape)
}

/// Materialize `data` (of `shape_in`) broadcast to `out_shape`.
pub(crate) fn materialize_broadcast<S: Scalar>(
    data: &[S],
    shape_in: &[usize],
    out_shape: &[usize],
) -> Vec<S> {
    let plan = ReadPlan::build(shape_in, out_shape);
    build_vec(shape::numel(out_shape), |i| data[plan.index(i)])
}

/// Sum a gradient of `from` shape down to `to` shape (VJP of broadcasting).
pub(crate) fn reduce_to_shape<S: Scalar>(g: &[S], from: &[usize], to: &[usize]) -> Vec<S> {
    if from == to {
        return g.to_vec();
    }
    let mut out = vec![S::zero(); shape::numel(to)];
    if out.len() == 1 {
        out[0] = g.iter().copied().sum();
        return out;
    }
    let plan = ReadPlan::build(to, from);
    match plan {
        ReadPlan::Direct => out.copy_from_slice(g),
        ReadPlan::Scalar => out[0] = g.iter().copied().sum(),
        ReadPlan::Tile(period) => {
            for (i, gi) in g.iter().enumerate() {
                out[i % period] += *gi;
            }
        }
        ReadPlan::Repeat(inner) => {
            for (chunk, slot) in g.chunks(inner).zip(out.iter_mut()) {
                *slot = chunk.iter().copied().sum();
            }
        }
        ReadPlan::Offsets(offs) => {
            for (gi, off) in g.iter().zip(offs) {
                out[off] += *gi;
            }
        }
    }
    out
}

/// Wrap freshly computed data as a tensor, recording `build_backward` on the
/// tape when one is present.
pub(crate) fn record_result<S: Scalar>(
    tape: Option<Tape<S>>,
    data: Vec<S>,
    out_shape: Vec<usize>,
    build_backward: impl FnOnce(&Rc<Vec<S>>) -> BackwardFn<S>,
) -> Tensor<S> {
    let rc = Rc::new(data);
    match tape {
        None => Tensor::from_rc(rc, out_shape),
        Some(tp) => {
            let backward = build_backward(&rc);
            let id = tp.push_node(rc.len(), Some(backward));
            Tensor::attached(rc, out_shape, tp, id)
        }
    }
}
