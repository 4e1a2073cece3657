//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable shaped view of shared contiguous data. Any
//! operation whose operands include a tape-attached tensor records a backward
//! rule on that tape; pure-constant operands stay out of the gradient flow.
//! Precision is generic: f64 for verification, f32 for training.

pub mod ops;
pub mod shape;
pub mod tape;

use std::cell::Cell;
use std::rc::Rc;

use crate::scalar::Scalar;
pub use tape::Tape;

thread_local! {
    static DEBUG_NONFINITE: Cell<bool> = const { Cell::new(false) };
}

/// When enabled, every operation panics if an operand contains a non-finite
/// value. Off by default; a debugging aid for training blow-ups.
pub fn set_debug_nonfinite(enabled: bool) {
    DEBUG_NONFINITE.with(|f| f.set(enabled));
}

pub fn debug_nonfinite() -> bool {
    DEBUG_NONFINITE.with(|f| f.get())
}

struct NodeRef<S: Scalar> {
    tape: Tape<S>,
    id: usize,
}

impl<S: Scalar> Clone for NodeRef<S> {
    fn clone(&self) -> Self {
        NodeRef { tape: self.tape.clone(), id: self.id }
    }
}

/// Shaped, immutable, reference-counted array of scalars.
pub struct Tensor<S: Scalar> {
    data: Rc<Vec<S>>,
    shape: Vec<usize>,
    node: Option<NodeRef<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { data: Rc::clone(&self.data), shape: self.shape.clone(), node: self.node.clone() }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("attached", &self.node.is_some())
            .field("data", &self.data)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Detached tensor from owned data.
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape::numel(shape),
            "from_vec: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { data: Rc::new(data), shape: shape.to_vec(), node: None }
    }

    /// Rank-0 (scalar) detached tensor.
    pub fn scalar(value: S) -> Self {
        Tensor::from_vec(vec![value], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![S::zero(); shape::numel(shape)], shape)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Tensor::from_vec(vec![value; shape::numel(shape)], shape)
    }

    pub(crate) fn attached(data: Rc<Vec<S>>, shape: Vec<usize>, tape: Tape<S>, id: usize) -> Self {
        Tensor { data, shape, node: Some(NodeRef { tape, id }) }
    }

    pub(crate) fn from_rc(data: Rc<Vec<S>>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape::numel(&shape));
        Tensor { data, shape, node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<S>> {
        Rc::clone(&self.data)
    }

    /// Sole element of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item: tensor has {} elements", self.numel());
        self.data[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Same data, no tape participation. A detached tensor never receives
    /// gradient.
    pub fn detach(&self) -> Tensor<S> {
        Tensor { data: Rc::clone(&self.data), shape: self.shape.clone(), node: None }
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn tape(&self) -> Option<&Tape<S>> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Accumulated gradient for this tensor, if any flowed to it.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.as_ref().and_then(|n| n.tape.grad_of(n.id))
    }

    /// Run reverse-mode differentiation from this scalar loss. Every
    /// tape-attached ancestor's gradient then holds d(loss)/d(tensor);
    /// repeated calls accumulate until `Tape::reset_grads`.
    pub fn backward(&self) {
        let node = self.node.as_ref().expect("backward: loss is not attached to a tape");
        assert_eq!(self.numel(), 1, "backward: non-scalar loss rejected (numel {})", self.numel());
        node.tape.backward_from(node.id);
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| crate::scalar::Scalar::to_f64(*v)).collect()
    }
}

/// Resolve the tape a result should record on. Panics if operands live on two
/// different tapes.
pub(crate) fn result_tape<S: Scalar>(op: &str, inputs: &[&Tensor<S>]) -> Option<Tape<S>> {
    let mut found: Option<&Tape<S>> = None;
    for t in inputs {
        if let Some(tape) = t.tape() {
            match found {
                None => found = Some(tape),
                Some(existing) => {
                    assert!(existing.same_tape(tape), "{op}: operands recorded on different tapes");
                }
            }
        }
    }
    found.cloned()
}

pub(crate) fn check_finite<S: Scalar>(op: &str, inputs: &[&Tensor<S>]) {
    if !debug_nonfinite() {
        return;
    }
    for (i, t) in inputs.iter().enumerate() {
        if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
            panic!("{op}: non-finite value {} at flat index {pos} of operand {i}", t.data()[pos]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detach_drops_gradient_flow() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![2.0], &[1]);
        let d = x.detach();
        let y = d.mul(&d).sum_all();
        // y never touched the tape: backward on x-derived loss gives no grad to d.
        assert!(!y.is_attached());
        let loss = x.mul(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        assert_eq!(d.grad(), None);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![3.0], &[1]);
        let loss = x.mul(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        tape.reset_grads();
        assert_eq!(x.grad(), None);
    }

    #[test]
    #[should_panic(expected = "non-scalar loss rejected")]
    fn non_scalar_loss_rejected() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]);
        x.backward();
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn debug_flag_rejects_non_finite() {
        set_debug_nonfinite(true);
        let guard = scopeguard_reset();
        let a: Tensor<f64> = Tensor::from_vec(vec![1.0, f64::NAN], &[2]);
        let b = Tensor::from_vec(vec![1.0, 1.0], &[2]);
        let _ = a.add(&b);
        drop(guard);
    }

    struct ResetFlag;
    impl Drop for ResetFlag {
        fn drop(&mut self) {
            set_debug_nonfinite(false);
        }
    }
    fn scopeguard_reset() -> ResetFlag {
        ResetFlag
    }
}
