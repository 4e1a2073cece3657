//! The delta operator core.
//!
//! For a unit direction `k` and scalar gate `beta`, the operator
//! `A = I - beta * k k^T` rescales the `k`-component of its input by
//! `(1 - beta)` and fixes the orthogonal complement pointwise. Its spectrum
//! is `{1 (x d-1), 1 - beta}`, its determinant `1 - beta`, and applied to a
//! matrix state it broadcasts across value columns. The residual update
//! `X' = A X + beta k v^T` collapses to the additive rank-1 delta form
//! `X' = X + beta k (v^T - k^T X)`, whose projection along `k` obeys
//! `k^T X' = (1 - beta) k^T X + beta v^T`.
//!
//! Two layers live here:
//!
//! - plain-slice kernels ([`UnitDirection`], [`DeltaOperatorView`],
//!   [`StateMatrix`], [`delta_update`]) used as the reference path and by the
//!   verification suite — the fused apply touches no d×d intermediate and is
//!   bitwise identical column-by-column;
//! - tape composites ([`normalize_direction_graph`], [`delta_update_graph`])
//!   used inside differentiable blocks, batched over leading axes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest `d` for which the dense oracle form may be materialized.
pub const DENSE_ORACLE_MAX_D: usize = 1024;

// ── Unit direction ───────────────────────────────────────────────────

/// An (approximately) unit-norm direction in feature space.
#[derive(Debug, Clone)]
pub struct UnitDirection<S: Scalar> {
    k: Vec<S>,
    eps_k: S,
}

impl<S: Scalar> UnitDirection<S> {
    /// Normalize a raw direction. Uses the precision-friendly form: RMS
    /// normalization with epsilon `eps_k^2 / d` followed by a constant
    /// `1/sqrt(d)` scale, algebraically `k = k_tilde / sqrt(|k_tilde|^2 + eps_k^2)`.
    pub fn new(k_tilde: &[S], eps_k: S) -> Result<Self> {
        assert!(!k_tilde.is_empty(), "direction must have d >= 1");
        assert!(eps_k >= S::zero(), "eps_k must be non-negative");
        let d = k_tilde.len();
        let sum_sq: S = k_tilde.iter().map(|&v| v * v).sum();
        if sum_sq == S::zero() && eps_k == S::zero() {
            return Err(Error::ZeroDirection);
        }
        let d_s = S::from_f64(d as f64);
        let mean_sq = sum_sq / d_s;
        let inv_rms = (mean_sq + eps_k * eps_k / d_s).sqrt().recip();
        let k_scale = d_s.sqrt().recip();
        let k = k_tilde.iter().map(|&v| v * inv_rms * k_scale).collect();
        Ok(UnitDirection { k, eps_k })
    }

    /// Wrap an already-unit vector without renormalizing (exact test vectors
    /// such as canonical basis directions).
    pub fn from_unit(k: Vec<S>) -> Self {
        UnitDirection { k, eps_k: S::zero() }
    }

    pub fn dim(&self) -> usize {
        self.k.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.k
    }

    pub fn eps_k(&self) -> S {
        self.eps_k
    }

    pub fn norm(&self) -> S {
        self.k.iter().map(|&v| v * v).sum::<S>().sqrt()
    }
}

// ── Matrix state ─────────────────────────────────────────────────────

/// Hidden state `X` of shape `(d, d_v)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix<S: Scalar> {
    data: Vec<S>,
    d: usize,
    d_v: usize,
}

impl<S: Scalar> StateMatrix<S> {
    pub fn new(data: Vec<S>, d: usize, d_v: usize) -> Self {
        assert!(d_v >= 1, "d_v must be >= 1");
        assert_eq!(data.len(), d * d_v, "state data length {} != {d} x {d_v}", data.len());
        StateMatrix { data, d, d_v }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    /// Copy of value column `j` as a length-`d` vector.
    pub fn column(&self, j: usize) -> Vec<S> {
        assert!(j < self.d_v);
        (0..self.d).map(|i| self.data[i * self.d_v + j]).collect()
    }

    pub fn from_columns(cols: &[Vec<S>]) -> Self {
        let d_v = cols.len();
        let d = cols[0].len();
        let mut data = vec![S::zero(); d * d_v];
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), d);
            for i in 0..d {
                data[i * d_v + j] = col[i];
            }
        }
        StateMatrix::new(data, d, d_v)
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::from_vec(self.data.clone(), &[self.d, self.d_v])
    }
}

// ── The operator ─────────────────────────────────────────────────────

/// Closed-form spectrum of the operator.
#[derive(Debug, Clone)]
pub struct Spectrum<S: Scalar> {
    /// Eigenvalue 1, multiplicity d - 1, eigenspace = complement of `k`.
    pub fixed_eigenvalue: S,
    pub fixed_multiplicity: usize,
    /// Eigenvalue 1 - beta, multiplicity 1, eigenvector = `k`.
    pub gated_eigenvalue: S,
    pub gated_eigenvector: Vec<S>,
}

/// A view of `A = I - beta * k k^T`. Never materializes the d×d matrix in
/// the application path; the dense form exists only as an explicit oracle.
/// `beta` may take the exact endpoint values 0 and 2 here (the gate treats
/// them as saturated limits, the analysis API accepts them for testing).
#[derive(Debug, Clone)]
pub struct DeltaOperatorView<S: Scalar> {
    k: UnitDirection<S>,
    beta: S,
}

impl<S: Scalar> DeltaOperatorView<S> {
    pub fn new(k: UnitDirection<S>, beta: S) -> Self {
        DeltaOperatorView { k, beta }
    }

    pub fn d(&self) -> usize {
        self.k.dim()
    }

    pub fn beta(&self) -> S {
        self.beta
    }

    pub fn k(&self) -> &[S] {
        self.k.as_slice()
    }

    pub fn direction(&self) -> &UnitDirection<S> {
        &self.k
    }

    /// Fused application `A X = X - beta * k (k^T X)`: one `1 x d_v` row of
    /// projection coefficients, then a rank-1 correction. Column `j` of the
    /// result depends only on column `j` of the input, with the same
    /// summation order as a single-column call.
    pub fn apply(&self, x: &StateMatrix<S>) -> Result<StateMatrix<S>> {
        let d = self.d();
        if x.d() != d {
            return Err(Error::DimensionMismatch {
                op: "apply_operator",
                detail: format!("operator has d = {d}, state has d = {}", x.d()),
            });
        }
        let d_v = x.d_v();
        let k = self.k.as_slice();
        // r = k^T X, summed in row order per column.
        let mut r = vec![S::zero(); d_v];
        for i in 0..d {
            let ki = k[i];
            for j in 0..d_v {
                r[j] += ki * x.as_slice()[i * d_v + j];
            }
        }
        let mut out = x.as_slice().to_vec();
        for i in 0..d {
            let bk = self.beta * k[i];
            for j in 0..d_v {
                out[i * d_v + j] -= bk * r[j];
            }
        }
        Ok(StateMatrix::new(out, d, d_v))
    }

    /// Explicit `I - beta k k^T` (oracle only; refuses d above
    /// [`DENSE_ORACLE_MAX_D`]). Symmetric by construction.
    pub fn dense(&self) -> Result<Tensor<S>> {
        let d = self.d();
        if d > DENSE_ORACLE_MAX_D {
            return Err(Error::OversizeDense { d, max: DENSE_ORACLE_MAX_D });
        }
        let k = self.k.as_slice();
        let mut m = vec![S::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                let mut v = -self.beta * k[i] * k[j];
                if i == j {
                    v += S::one();
                }
                m[i * d + j] = v;
            }
        }
        Ok(Tensor::from_vec(m, &[d, d]))
    }

    /// Closed-form eigensystem: 1 with multiplicity d-1 on the complement of
    /// `k`, and 1 - beta on `k`.
    pub fn spectrum(&self) -> Spectrum<S> {
        Spectrum {
            fixed_eigenvalue: S::one(),
            fixed_multiplicity: self.d() - 1,
            gated_eigenvalue: S::one() - self.beta,
            gated_eigenvector: self.k.as_slice().to_vec(),
        }
    }

    /// `(det A, det of the lift to (d, d_v) states)` = `(1-beta, (1-beta)^d_v)`.
    pub fn determinant(&self, d_v: usize) -> (S, S) {
        let spatial = S::one() - self.beta;
        (spatial, spatial.powi(d_v as i32))
    }

    /// Singular values as a multiset: 1 with multiplicity d-1, plus |1-beta|.
    pub fn singular_values(&self) -> (S, usize, S) {
        (S::one(), self.d() - 1, (S::one() - self.beta).abs())
    }
}

/// Additive rank-1 delta update `X + beta * k (v^T - k^T X)`. Equal to
/// `apply(X) + beta * k v^T` up to rounding.
pub fn delta_update<S: Scalar>(
    x: &StateMatrix<S>,
    k: &UnitDirection<S>,
    beta: S,
    v: &[S],
) -> Result<StateMatrix<S>> {
    let d = k.dim();
    if x.d() != d || v.len() != x.d_v() {
        return Err(Error::DimensionMismatch {
            op: "delta_update",
            detail: format!(
                "k has d = {d}, state is {} x {}, v has {} entries",
                x.d(),
                x.d_v(),
                v.len()
            ),
        });
    }
    let d_v = x.d_v();
    let ks = k.as_slice();
    let mut r = vec![S::zero(); d_v];
    for i in 0..d {
        let ki = ks[i];
        for j in 0..d_v {
            r[j] += ki * x.as_slice()[i * d_v + j];
        }
    }
    let mut out = x.as_slice().to_vec();
    for i in 0..d {
        let bk = beta * ks[i];
        for j in 0..d_v {
            out[i * d_v + j] += bk * (v[j] - r[j]);
        }
    }
    Ok(StateMatrix::new(out, d, d_v))
}

/// Left-multiplication of a diagonal state: entry `(i, j)` of
/// `A diag(s)` is `s_i delta_ij - beta s_j k_i k_j`, exposing the feature
/// coupling the operator introduces.
pub fn diagonal_case<S: Scalar>(s: &[S], k: &UnitDirection<S>, beta: S) -> Tensor<S> {
    let d = s.len();
    assert_eq!(k.dim(), d, "diagonal_case: k has d = {}, s has d = {d}", k.dim());
    let ks = k.as_slice();
    let mut out = vec![S::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            let mut v = -beta * s[j] * ks[i] * ks[j];
            if i == j {
                v += s[i];
            }
            out[i * d + j] = v;
        }
    }
    Tensor::from_vec(out, &[d, d])
}

/// Orthonormal basis of the complement of `k`, by Gram-Schmidt over the
/// canonical vectors with the most-aligned one skipped. Two projection
/// passes keep the basis orthogonal to working precision.
pub fn orthonormal_complement<S: Scalar>(k: &[S]) -> Vec<Vec<S>> {
    let d = k.len();
    let skip = (0..d)
        .max_by(|&a, &b| k[a].abs().partial_cmp(&k[b].abs()).expect("finite direction"))
        .expect("d >= 1");
    let mut basis: Vec<Vec<S>> = Vec::with_capacity(d - 1);
    for i in (0..d).filter(|&i| i != skip) {
        let mut v = vec![S::zero(); d];
        v[i] = S::one();
        for _pass in 0..2 {
            let kv: S = k.iter().zip(&v).map(|(&a, &b)| a * b).sum();
            for (vj, &kj) in v.iter_mut().zip(k) {
                *vj -= kv * kj;
            }
            for u in &basis {
                let uv: S = u.iter().zip(&v).map(|(&a, &b)| a * b).sum();
                for (vj, &uj) in v.iter_mut().zip(u) {
                    *vj -= uv * uj;
                }
            }
        }
        let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
        for vj in v.iter_mut() {
            *vj /= norm;
        }
        basis.push(v);
    }
    basis
}

// ── Tape composites ──────────────────────────────────────────────────

/// Batched, differentiable direction normalization over the last axis, in
/// the same RMS-then-scale form as [`UnitDirection::new`]. With `eps_k = 0`
/// a zero row is an error.
pub fn normalize_direction_graph<S: Scalar>(k_tilde: &Tensor<S>, eps_k: f64) -> Result<Tensor<S>> {
    let d = *k_tilde.shape().last().expect("direction needs a last axis");
    if eps_k == 0.0 {
        let row_has_norm = k_tilde
            .data()
            .chunks(d)
            .all(|row| row.iter().any(|&v| v != S::zero()));
        if !row_has_norm {
            return Err(Error::ZeroDirection);
        }
    }
    let last = k_tilde.ndim() - 1;
    let eps_term = S::from_f64(eps_k * eps_k / d as f64);
    let inv_rms = k_tilde.mul(k_tilde).mean_axis(last, true).add_scalar(eps_term).rsqrt();
    let k_scale = S::from_f64(1.0 / (d as f64).sqrt());
    Ok(k_tilde.mul(&inv_rms).mul_scalar(k_scale))
}

/// Batched, differentiable delta update. Shapes: `x (..., d, d_v)`,
/// `k (..., d)`, `beta (...)`, `v (..., d_v)`.
pub fn delta_update_graph<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    beta: &Tensor<S>,
    v: &Tensor<S>,
) -> Tensor<S> {
    let nd = x.ndim();
    assert!(nd >= 2, "delta_update_graph: state must have rank >= 2, got {:?}", x.shape());
    let k_col = k.unsqueeze(k.ndim()); // (..., d, 1)
    let readout = k_col.mul(x).sum_axis(nd - 2, true); // k^T X -> (..., 1, d_v)
    let v_row = v.unsqueeze(v.ndim() - 1); // (..., 1, d_v)
    let correction = k_col.mul(&v_row.sub(&readout)); // (..., d, d_v)
    let beta_b = beta.unsqueeze(beta.ndim()).unsqueeze(beta.ndim() + 1); // (..., 1, 1)
    x.add(&beta_b.mul(&correction))
}
