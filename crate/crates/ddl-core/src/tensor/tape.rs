//! Reverse-mode tape: one tape per forward pass, replayed in reverse.
//!
//! Every recorded node owns a boxed backward rule that receives the upstream
//! gradient and accumulates vector-Jacobian products into its inputs. Nodes
//! are created in topological order (inputs always exist before outputs), so
//! a single reverse sweep visits each node at most once and gradient fan-out
//! accumulates additively.

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Accumulates per-node gradients during one backward sweep.
pub struct GradSink<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> GradSink<S> {
    fn new(n: usize) -> Self {
        GradSink { grads: vec![None; n] }
    }

    /// Add `contribution` into node `id`'s gradient.
    pub fn accumulate(&mut self, id: usize, contribution: Vec<S>) {
        match &mut self.grads[id] {
            Some(g) => {
                debug_assert_eq!(g.len(), contribution.len(), "gradient length mismatch");
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &mut GradSink<S>)>;

struct Node<S: Scalar> {
    numel: usize,
    backward: Option<BackwardFn<S>>,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    // Persistent gradients: repeated backward calls accumulate here.
    grads: Vec<Option<Vec<S>>>,
}

/// A recording of one forward pass. Cheap to clone (shared handle).
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), grads: Vec::new() })),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push_node(&self, numel: usize, backward: Option<BackwardFn<S>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { numel, backward });
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    /// Register a leaf (no backward rule); its gradient is retrievable after
    /// `backward` runs on a descendant.
    pub fn leaf(&self, data: Vec<S>, shape: &[usize]) -> Tensor<S> {
        assert_eq!(
            data.len(),
            crate::tensor::shape::numel(shape),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let id = self.push_node(data.len(), None);
        Tensor::attached(Rc::new(data), shape.to_vec(), self.clone(), id)
    }

    /// Attach a detached tensor to this tape as a leaf.
    pub fn watch(&self, t: &Tensor<S>) -> Tensor<S> {
        assert!(!t.is_attached(), "watch: tensor is already attached to a tape");
        self.leaf(t.data().to_vec(), t.shape())
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Clear all accumulated gradients.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
    }

    pub(crate) fn grad_of(&self, id: usize) -> Option<Vec<S>> {
        self.inner.borrow().grads[id].clone()
    }

    /// Reverse sweep seeding `loss_id` with 1. The sweep runs on a fresh
    /// store and its result is added into the persistent per-node gradients,
    /// so repeated calls without `reset_grads` accumulate.
    pub(crate) fn backward_from(&self, loss_id: usize) {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.nodes[loss_id].numel, 1,
            "backward: non-scalar loss rejected (numel {})",
            inner.nodes[loss_id].numel
        );
        let n = inner.nodes.len();
        let mut sink = GradSink::new(n);
        sink.grads[loss_id] = Some(vec![S::one()]);
        for id in (0..=loss_id).rev() {
            if sink.grads[id].is_none() {
                continue;
            }
            if let Some(rule) = &inner.nodes[id].backward {
                let upstream = sink.grads[id].take().expect("checked above");
                rule(&upstream, &mut sink);
                sink.grads[id] = Some(upstream);
            }
        }
        drop(inner);
        let mut inner = self.inner.borrow_mut();
        for (slot, fresh) in inner.grads.iter_mut().zip(sink.grads) {
            if let Some(f) = fresh {
                match slot {
                    Some(g) => {
                        for (gi, fi) in g.iter_mut().zip(f) {
                            *gi += fi;
                        }
                    }
                    s @ None => *s = Some(f),
                }
            }
        }
    }
}
