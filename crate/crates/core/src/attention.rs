//! Single-head self-attention and its analytic parameter Jacobians.
//!
//! The forward map is `A(X) = softmax(X·W_Q·W_Kᵀ·Xᵀ)·X·W_V` with the softmax
//! taken row-wise and no `1/√d` temperature. Derivatives are taken with respect
//! to `vec(W_Q)`, `vec(W_K)`, `vec(W_V)` (column-major), each block being
//! `dN × dD`:
//!
//! ```text
//! ∂A/∂W_Q = (W_Vᵀ Xᵀ ⊗ I_N) · Λ_S · (X W_K ⊗ X)
//! ∂A/∂W_K = (W_Vᵀ Xᵀ ⊗ I_N) · Λ_S · (X ⊗ X W_Q) · T_{Dd}
//! ∂A/∂W_V = I_d ⊗ S X
//! ```
//!
//! where `Λ_S = ∂vec(S)/∂vec(M)` is the `N² × N²` derivative of the row-wise
//! softmax at `M = X W_Q W_Kᵀ Xᵀ` (see [`softmax_rows_jacobian`]).

use serde::{Deserialize, Serialize};

use crate::conditioning::CorrectionSet;
use crate::error::{Error, Result};
use crate::linalg::{commutation_matrix, kron, unvec, vec, Matrix};

/// Dense Jacobians are only materialized while `N·d` and `D·d` stay below this.
pub const JACOBIAN_DIM_CAP: usize = 512;

/// Query, key and value projections of one head, each `D × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() || w_q.shape() != w_v.shape() {
            return Err(Error::dim(format!(
                "W_Q {:?}, W_K {:?}, W_V {:?} must share a shape",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Model width `D`.
    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    /// Head width `d`.
    pub fn d_head(&self) -> usize {
        self.w_q.cols()
    }

    /// `(W_Q + C_Q, W_K + C_K, W_V + C_V)`.
    pub fn corrected(&self, c: &CorrectionSet) -> Result<AttentionParams> {
        Ok(AttentionParams {
            w_q: self.w_q.add(c.c_q())?,
            w_k: self.w_k.add(c.c_k())?,
            w_v: self.w_v.add(c.c_v())?,
        })
    }

    pub fn get(&self, which: Projection) -> &Matrix {
        match which {
            Projection::Query => &self.w_q,
            Projection::Key => &self.w_k,
            Projection::Value => &self.w_v,
        }
    }

    pub fn get_mut(&mut self, which: Projection) -> &mut Matrix {
        match which {
            Projection::Query => &mut self.w_q,
            Projection::Key => &mut self.w_k,
            Projection::Value => &mut self.w_v,
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d_model() {
            return Err(Error::dim(format!(
                "input has {} columns, projections expect D = {}",
                x.cols(),
                self.d_model()
            )));
        }
        Ok(())
    }
}

/// Which projection a derivative is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn letter(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        }
    }
}

/// The three analytic blocks and their vertical stack `[A_Q; A_K; A_V]`.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub a_q: Matrix,
    pub a_k: Matrix,
    pub a_v: Matrix,
    pub stacked: Matrix,
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = m.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    Matrix::from_raw(r, c, out)
}

/// `Λ(z) = Diag(z) − z·zᵀ`, the softmax derivative at probability vector `z`.
pub fn lambda_op(z: &[f64]) -> Result<Matrix> {
    let n = z.len();
    Matrix::from_fn(n, n, |i, j| {
        let diag = if i == j { z[i] } else { 0.0 };
        diag - z[i] * z[j]
    })
}

/// `∂vec(softmax_rows(M))/∂vec(M)` for square `M`, an `N² × N²` matrix.
///
/// Row `i` of `S` only depends on row `i` of `M`, through `Λ(s_i)`; under
/// column-major vec, entry `(i, j)` sits at index `j·N + i`, so
/// `J[j·N + i, l·N + i] = Λ(s_i)[j, l]` and all cross-row entries vanish.
pub fn softmax_rows_jacobian(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::dim(format!(
            "softmax Jacobian needs a square input, got {:?}",
            m.shape()
        )));
    }
    let s = softmax_rows(m);
    let size = n * n;
    let mut out = Matrix::zeros(size, size)?;
    for i in 0..n {
        let lam = lambda_op(s.row(i))?;
        for j in 0..n {
            for l in 0..n {
                out[(j * n + i, l * n + i)] = lam[(j, l)];
            }
        }
    }
    Ok(out)
}

/// Attention logits `X·W_Q·W_Kᵀ·Xᵀ`.
pub fn attention_scores(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    p.check_input(x)?;
    let q = x.matmul(&p.w_q)?;
    let k = x.matmul(&p.w_k)?;
    q.matmul_t(&k)
}

/// `softmax(X W̃_Q W̃_Kᵀ Xᵀ)·X·W̃_V`, with `W̃ = W + C` when corrections are given.
pub fn attention_forward(x: &Matrix, p: &AttentionParams, c: Option<&CorrectionSet>) -> Result<Matrix> {
    p.check_input(x)?;
    let corrected;
    let p = match c {
        Some(c) => {
            if c.shape() != p.w_q.shape() {
                return Err(Error::dim(format!(
                    "corrections {:?} do not match projections {:?}",
                    c.shape(),
                    p.w_q.shape()
                )));
            }
            corrected = p.corrected(c)?;
            &corrected
        }
        None => p,
    };
    let s = softmax_rows(&attention_scores(x, p)?);
    s.matmul(&x.matmul(&p.w_v)?)
}

fn check_jacobian_size(x: &Matrix, p: &AttentionParams) -> Result<()> {
    p.check_input(x)?;
    let (n, dm, dh) = (x.rows(), p.d_model(), p.d_head());
    if n * dh > JACOBIAN_DIM_CAP || dm * dh > JACOBIAN_DIM_CAP {
        return Err(Error::dim(format!(
            "dense Jacobian for N={n}, D={dm}, d={dh} exceeds the N·d, D·d <= {JACOBIAN_DIM_CAP} cap"
        )));
    }
    Ok(())
}

/// `(W_Vᵀ Xᵀ ⊗ I_N)·Λ_S`, shared by the query and key blocks.
fn value_softmax_factor(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    let n = x.rows();
    let xv_t = x.matmul(&p.w_v)?.transpose();
    let left = kron(&xv_t, &Matrix::identity(n)?)?;
    let mid = softmax_rows_jacobian(&attention_scores(x, p)?)?;
    left.matmul(&mid)
}

/// `∂vec(A)/∂vec(W_Q)`.
pub fn jacobian_wq(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    check_jacobian_size(x, p)?;
    let right = kron(&x.matmul(&p.w_k)?, x)?;
    value_softmax_factor(x, p)?.matmul(&right)
}

/// `∂vec(A)/∂vec(W_K)`; the commutation factor is applied as a column permutation.
pub fn jacobian_wk(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    check_jacobian_size(x, p)?;
    let right = kron(x, &x.matmul(&p.w_q)?)?;
    let t = commutation_matrix(p.d_model(), p.d_head())?;
    t.right_apply(&value_softmax_factor(x, p)?.matmul(&right)?)
}

/// `∂vec(A)/∂vec(W_V) = I_d ⊗ softmax(·)·X`.
pub fn jacobian_wv(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    check_jacobian_size(x, p)?;
    let sx = softmax_rows(&attention_scores(x, p)?).matmul(x)?;
    kron(&Matrix::identity(p.d_head())?, &sx)
}

/// All three blocks, stacked in Q, K, V order.
pub fn assemble_jacobian(x: &Matrix, p: &AttentionParams) -> Result<JacobianBlocks> {
    let a_q = jacobian_wq(x, p)?;
    let a_k = jacobian_wk(x, p)?;
    let a_v = jacobian_wv(x, p)?;
    let stacked = Matrix::vstack(&[&a_q, &a_k, &a_v])?;
    Ok(JacobianBlocks { a_q, a_k, a_v, stacked })
}

/// Central-difference Jacobian of `vec(attention_forward)` with respect to
/// `vec(W_which)`; column `j` perturbs the `j`-th column-major entry.
pub fn fd_jacobian(x: &Matrix, p: &AttentionParams, which: Projection, step: f64) -> Result<Matrix> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Constraint(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    p.check_input(x)?;
    let (dm, dh) = (p.d_model(), p.d_head());
    let out_len = x.rows() * dh;
    let mut jac = Matrix::zeros(out_len, dm * dh)?;
    let mut probe = p.clone();
    for col in 0..dm * dh {
        let (i, j) = (col % dm, col / dm);
        let base = p.get(which)[(i, j)];
        probe.get_mut(which)[(i, j)] = base + step;
        let plus = vec(&attention_forward(x, &probe, None)?);
        probe.get_mut(which)[(i, j)] = base - step;
        let minus = vec(&attention_forward(x, &probe, None)?);
        probe.get_mut(which)[(i, j)] = base;
        for r in 0..out_len {
            jac[(r, col)] = (plus[(r, 0)] - minus[(r, 0)]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Reshapes a `vec`-ordered column back into the `N × d` output layout.
pub fn unvec_output(v: &Matrix, n: usize, d: usize) -> Result<Matrix> {
    unvec(v.as_slice(), n, d)
}
