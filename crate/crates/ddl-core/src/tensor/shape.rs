//! Shape arithmetic: broadcasting, strides, axis decomposition.

/// Product of all axis lengths.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a contiguous tensor of the given shape.
pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// NumPy-style broadcast of two shapes. Panics with both shapes on mismatch.
pub fn broadcast_shapes(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            panic!("{op}: shapes {a:?} and {b:?} are not broadcast-compatible");
        };
    }
    out
}

/// Strides for reading a tensor of `shape` as if broadcast to `out_shape`
/// (stride 0 on broadcast axes). `shape` must broadcast to `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = contiguous_strides(shape);
    let pad = out_shape.len() - shape.len();
    let mut out = vec![0; out_shape.len()];
    for i in 0..out_shape.len() {
        if i < pad {
            out[i] = 0;
        } else if shape[i - pad] == 1 && out_shape[i] != 1 {
            out[i] = 0;
        } else {
            debug_assert_eq!(shape[i - pad], out_shape[i]);
            out[i] = strides[i - pad];
        }
    }
    out
}

/// Incremental multi-index walker: visits linear offsets of a strided view of
/// `shape` in row-major order without per-element div/mod.
pub struct StrideWalker<'a> {
    shape: &'a [usize],
    strides: &'a [usize],
    index: Vec<usize>,
    offset: usize,
    remaining: usize,
}

impl<'a> StrideWalker<'a> {
    pub fn new(shape: &'a [usize], strides: &'a [usize]) -> Self {
        StrideWalker {
            shape,
            strides,
            index: vec![0; shape.len()],
            offset: 0,
            remaining: numel(shape),
        }
    }
}

impl<'a> Iterator for StrideWalker<'a> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let current = self.offset;
        self.remaining -= 1;
        // Advance the odometer from the last axis.
        for ax in (0..self.shape.len()).rev() {
            self.index[ax] += 1;
            self.offset += self.strides[ax];
            if self.index[ax] < self.shape[ax] {
                break;
            }
            self.offset -= self.strides[ax] * self.shape[ax];
            self.index[ax] = 0;
        }
        Some(current)
    }
}

/// Split a shape at `axis` into (outer, len, inner) extents so that the linear
/// index of element (o, a, i) is `o * len * inner + a * inner + i`.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_basic() {
        assert_eq!(broadcast_shapes("t", &[2, 3], &[3]), vec![2, 3]);
        assert_eq!(broadcast_shapes("t", &[2, 1, 4], &[3, 1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shapes("t", &[], &[2, 2]), vec![2, 2]);
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn broadcast_mismatch_panics() {
        broadcast_shapes("t", &[2, 3], &[4]);
    }

    #[test]
    fn walker_matches_manual_strides() {
        // A [2,3] tensor right-aligns under [2,2,3]: the leading axis tiles.
        let shape = [2usize, 2, 3];
        let strides = broadcast_strides(&[2, 3], &shape);
        assert_eq!(strides, vec![0, 3, 1]);
        let offsets: Vec<usize> = StrideWalker::new(&shape, &strides).collect();
        assert_eq!(offsets, vec![0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn axis_split() {
        assert_eq!(split_at_axis(&[2, 3, 4], 1), (2, 3, 4));
        assert_eq!(split_at_axis(&[5], 0), (1, 5, 1));
    }
}
