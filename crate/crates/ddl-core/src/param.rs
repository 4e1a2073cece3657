//! Named trainable parameters and their per-step tape binding.
//!
//! Parameters live outside any tape as plain buffers. Each forward pass binds
//! them onto a fresh tape as leaves; after backward, gradients are collected
//! back by name. Weight decay applies only to parameters flagged `decay`
//! (matrices); biases and norm scales opt out.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::{shape, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub decay: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<S>, decay: bool) -> Self {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape::numel(shape),
            "param `{name}`: data length {} does not match shape {shape:?}",
            data.len()
        );
        Param { name, shape: shape.to_vec(), data, decay }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        Param::new(name, shape, vec![S::zero(); shape::numel(shape)], decay)
    }

    pub fn full(name: impl Into<String>, shape: &[usize], value: S, decay: bool) -> Self {
        Param::new(name, shape, vec![value; shape::numel(shape)], decay)
    }

    /// Gaussian init with the given standard deviation.
    pub fn gaussian(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
        decay: bool,
    ) -> Self {
        let data = (0..shape::numel(shape))
            .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Param::new(name, shape, data, decay)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Binds parameters onto one tape for a forward pass and remembers the
/// handles so gradients can be read back afterwards.
pub struct Binder<S: Scalar> {
    tape: Tape<S>,
    pub bound: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Binder<S> {
    pub fn new(tape: &Tape<S>) -> Self {
        Binder { tape: tape.clone(), bound: Vec::new() }
    }

    pub fn bind(&mut self, p: &Param<S>) -> Tensor<S> {
        let t = self.tape.leaf(p.data.clone(), &p.shape);
        self.bound.push((p.name.clone(), t.clone()));
        t
    }

    /// Gradient per bound parameter, zeros where none flowed.
    pub fn grads(&self) -> Vec<(String, Vec<S>)> {
        self.bound
            .iter()
            .map(|(name, t)| {
                (name.clone(), t.grad().unwrap_or_else(|| vec![S::zero(); t.numel()]))
            })
            .collect()
    }
}

/// Anything that owns parameters and can enumerate them in a stable order.
pub trait Parameterized<S: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }
}
