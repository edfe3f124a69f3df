//! Vectorization calculus: `vec`, Kronecker products and commutation matrices.
//!
//! `vec` is column-major stacking throughout the crate. Every Kronecker
//! formula in [`crate::attention`] assumes this convention, under which
//! `vec(A·C·B) = (Bᵀ ⊗ A)·vec(C)`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Largest dense Kronecker product (in entries) we are willing to allocate.
pub const KRON_MAX_ENTRIES: usize = 10_000_000;

/// Column-major stacking of `a` into an `(rows·cols) × 1` column.
pub fn vec(a: &Matrix) -> Matrix {
    let (r, c) = a.shape();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(a[(i, j)]);
        }
    }
    Matrix::from_raw(r * c, 1, out)
}

/// Inverse of [`vec`]: reshape a column-major slice into `rows × cols`.
pub fn unvec(values: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if values.len() != rows * cols {
        return Err(Error::dim(format!(
            "cannot unvec {} values into {rows}x{cols}",
            values.len()
        )));
    }
    Matrix::from_fn(rows, cols, |i, j| values[j * rows + i])
}

/// Kronecker product `a ⊗ b`: block `(i, j)` equals `a(i, j)·b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    let rows = m.checked_mul(p);
    let cols = n.checked_mul(q);
    let entries = rows.zip(cols).and_then(|(r, c)| r.checked_mul(c));
    match entries {
        Some(e) if e <= KRON_MAX_ENTRIES => {}
        _ => {
            return Err(Error::dim(format!(
                "kron of {m}x{n} and {p}x{q} exceeds the {KRON_MAX_ENTRIES}-entry cap"
            )))
        }
    }
    let (rows, cols) = (m * p, n * q);
    let mut out = vec![0.0; rows * cols];
    for i in 0..m {
        for j in 0..n {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..p {
                let dst = (i * p + k) * cols + j * q;
                for (o, &v) in out[dst..dst + q].iter_mut().zip(b.row(k)) {
                    *o = s * v;
                }
            }
        }
    }
    Matrix::from_computed(rows, cols, out, "kron")
}

/// The commutation matrix `T_{mn}`, stored as a permutation.
///
/// For every `m × n` matrix `A`, `T_{mn}·vec(A) = vec(Aᵀ)`. Row `r` of the
/// dense form has its single one in column `perm[r]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommutationMatrix {
    m: usize,
    n: usize,
    perm: Vec<usize>,
}

/// Builds `T_{mn}`.
pub fn commutation_matrix(m: usize, n: usize) -> Result<CommutationMatrix> {
    if m == 0 || n == 0 {
        return Err(Error::dim(format!("commutation matrix needs m, n >= 1, got {m}, {n}")));
    }
    // vec(Aᵀ)[i·n + j] = Aᵀ(j, i) = A(i, j) = vec(A)[j·m + i]
    let mut perm = vec![0; m * n];
    for i in 0..m {
        for j in 0..n {
            perm[i * n + j] = j * m + i;
        }
    }
    Ok(CommutationMatrix { m, n, perm })
}

impl CommutationMatrix {
    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    /// Size of the (square) dense form.
    pub fn size(&self) -> usize {
        self.perm.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// `T·v` for a column vector `v`.
    pub fn apply(&self, v: &Matrix) -> Result<Matrix> {
        if v.shape() != (self.size(), 1) {
            return Err(Error::dim(format!(
                "commutation {}x{} applied to {}x{}",
                self.size(),
                self.size(),
                v.rows(),
                v.cols()
            )));
        }
        let data = self.perm.iter().map(|&src| v[(src, 0)]).collect();
        Ok(Matrix::from_raw(self.size(), 1, data))
    }

    /// `M·T`, i.e. a column permutation of `M`: column `perm[r]` of the
    /// result is column `r` of `M`.
    pub fn right_apply(&self, mat: &Matrix) -> Result<Matrix> {
        if mat.cols() != self.size() {
            return Err(Error::dim(format!(
                "{}x{} times commutation {}x{}",
                mat.rows(),
                mat.cols(),
                self.size(),
                self.size()
            )));
        }
        let cols = mat.cols();
        let mut out = vec![0.0; mat.len()];
        for i in 0..mat.rows() {
            let src = mat.row(i);
            let dst = &mut out[i * cols..(i + 1) * cols];
            for (r, &c) in self.perm.iter().enumerate() {
                dst[c] = src[r];
            }
        }
        Ok(Matrix::from_raw(mat.rows(), cols, out))
    }

    /// The inverse permutation, which is `T_{nm}`.
    pub fn transpose(&self) -> CommutationMatrix {
        let mut inv = vec![0; self.perm.len()];
        for (r, &c) in self.perm.iter().enumerate() {
            inv[c] = r;
        }
        CommutationMatrix {
            m: self.n,
            n: self.m,
            perm: inv,
        }
    }

    /// Permutation composition: `self · other`.
    pub fn compose(&self, other: &CommutationMatrix) -> Result<Vec<usize>> {
        if self.size() != other.size() {
            return Err(Error::dim("composing commutation matrices of different sizes"));
        }
        // (A·B)[r, c] = Σ_k A[r,k] B[k,c]; A[r, pa[r]] = 1, B[k, pb[k]] = 1
        Ok(self.perm.iter().map(|&k| other.perm[k]).collect())
    }

    pub fn to_dense(&self) -> Matrix {
        let s = self.size();
        let mut out = vec![0.0; s * s];
        for (r, &c) in self.perm.iter().enumerate() {
            out[r * s + c] = 1.0;
        }
        Matrix::from_raw(s, s, out)
    }
}
