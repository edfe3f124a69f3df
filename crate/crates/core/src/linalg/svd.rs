//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of a working copy are orthogonalized by plane rotations applied in
//! a fixed cyclic order `(0,1), (0,2), …, (n-2,n-1)`; the result is therefore
//! bit-reproducible for a given input. Wide inputs are handled by factoring the
//! transpose.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Sweep cap before reporting non-convergence.
pub const MAX_SWEEPS: usize = 60;

/// Relative off-diagonal threshold (cosine between column pairs).
pub const ROTATION_TOL: f64 = 1e-14;

/// Full singular value decomposition `A = U·diag(s)·Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × m` orthogonal.
    pub u: Matrix,
    /// Non-increasing, non-negative, length `min(m, n)`.
    pub s: Vec<f64>,
    /// `n × n` orthogonal, stored transposed.
    pub vt: Matrix,
}

impl SvdResult {
    /// `U·diag(s)·Vᵀ` rebuilt as an `m × n` matrix.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let m = self.u.rows();
        let n = self.vt.rows();
        let mut us = Matrix::zeros(m, n)?;
        for i in 0..m {
            for (j, &s) in self.s.iter().enumerate() {
                us[(i, j)] = self.u[(i, j)] * s;
            }
        }
        us.matmul(&self.vt)
    }
}

/// Column-major working storage for the rotations.
struct Columns {
    len: usize,
    data: Vec<f64>,
}

impl Columns {
    fn from_matrix(a: &Matrix, transpose: bool) -> Self {
        let (r, c) = a.shape();
        if transpose {
            // columns of aᵀ are rows of a
            Self {
                len: c,
                data: a.as_slice().to_vec(),
            }
        } else {
            let mut data = Vec::with_capacity(r * c);
            for j in 0..c {
                for i in 0..r {
                    data.push(a[(i, j)]);
                }
            }
            Self { len: r, data }
        }
    }

    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { len: n, data }
    }

    /// Rescales by a power of two so the largest entry lies in `[1, 2)`; the
    /// factor is exact and returned so norms can be scaled back.
    fn normalize(&mut self) -> f64 {
        let max = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            return 1.0;
        }
        let exp = max.log2().floor() as i32;
        let down = 2f64.powi(-exp);
        if !down.is_finite() || down == 0.0 {
            return 1.0;
        }
        self.data.iter_mut().for_each(|v| *v *= down);
        2f64.powi(exp)
    }

    fn count(&self) -> usize {
        self.data.len() / self.len
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.len..(j + 1) * self.len]
    }

    fn pair_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let len = self.len;
        let (head, tail) = self.data.split_at_mut(q * len);
        (&mut head[p * len..(p + 1) * len], &mut tail[..len])
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let (xp, xq) = self.pair_mut(p, q);
        for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
            let (u, v) = (*a, *b);
            *a = c * u - s * v;
            *b = s * u + c * v;
        }
    }
}

/// Runs cyclic sweeps until every column pair is orthogonal to the threshold.
fn orthogonalize(work: &mut Columns, mut right: Option<&mut Columns>) -> Result<()> {
    let n = work.count();
    // the dot-product roundoff floor grows with the column length
    let tol = ROTATION_TOL.max(work.len as f64 * f64::EPSILON);
    // Columns below ε·‖A‖_F only carry singular values under the rank
    // tolerance; rotating them chases roundoff and never settles.
    let frob_sq: f64 = work.data.iter().map(|v| v * v).sum();
    let negligible = f64::EPSILON * f64::EPSILON * frob_sq;
    let mut residual = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (xp, xq) = (work.col(p), work.col(q));
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (a, b) in xp.iter().zip(xq) {
                    alpha += a * a;
                    beta += b * b;
                    gamma += a * b;
                }
                if alpha <= negligible || beta <= negligible || gamma == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(cosine);
                if cosine <= tol {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                work.rotate(p, q, c, s);
                if let Some(v) = right.as_deref_mut() {
                    v.rotate(p, q, c, s);
                }
                rotated = true;
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::NoConvergence {
        sweeps: MAX_SWEEPS,
        residual,
    })
}

fn column_norms(work: &Columns) -> Vec<f64> {
    (0..work.count())
        .map(|j| work.col(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Indices sorting `norms` in non-increasing order; ties keep column order.
fn descending_order(norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order
}

/// Singular values only, in non-increasing order.
///
/// Uses the same rotation sequence as [`svd`], so the values are
/// bit-identical to `svd(a).s`.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    let transpose = a.rows() < a.cols();
    let mut work = Columns::from_matrix(a, transpose);
    let scale = work.normalize();
    orthogonalize(&mut work, None)?;
    let norms = column_norms(&work);
    Ok(descending_order(&norms).into_iter().map(|j| norms[j] * scale).collect())
}

/// Full SVD of `a`.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let transpose = m < n;
    let mut work = Columns::from_matrix(a, transpose);
    let scale = work.normalize();
    let k = work.count();
    let tall = work.len;
    let mut right = Columns::identity(k);
    orthogonalize(&mut work, Some(&mut right))?;

    let norms = column_norms(&work);
    let order = descending_order(&norms);
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let cutoff = smax * tall as f64 * f64::EPSILON;

    // Left basis (tall × tall): normalized columns for the numerically
    // nonzero values, completed to an orthonormal basis.
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(tall);
    let mut slots: Vec<Option<Vec<f64>>> = Vec::with_capacity(tall);
    for (idx, &j) in order.iter().enumerate() {
        if s[idx] > cutoff && s[idx] > 0.0 {
            let col: Vec<f64> = work.col(j).iter().map(|v| v / s[idx]).collect();
            left.push(col.clone());
            slots.push(Some(col));
        } else {
            slots.push(None);
        }
    }
    slots.resize(tall, None);
    // Complete with the standard basis vector that keeps the most norm after
    // projecting out the basis so far (two passes of modified Gram-Schmidt).
    for slot in slots.iter_mut() {
        if slot.is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for candidate in 0..tall {
            let mut v = vec![0.0; tall];
            v[candidate] = 1.0;
            for _ in 0..2 {
                for u in &left {
                    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for (vi, ui) in v.iter_mut().zip(u) {
                        *vi -= proj * ui;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, v));
            }
        }
        let (norm, mut v) = best.expect("tall >= 1");
        v.iter_mut().for_each(|x| *x /= norm);
        left.push(v.clone());
        *slot = Some(v);
    }
    let left: Vec<Vec<f64>> = slots.into_iter().map(|c| c.expect("completed")).collect();
    let left_mat = Matrix::from_fn(tall, tall, |i, j| left[j][i])?;
    let right_mat = Matrix::from_fn(k, k, |i, j| right.col(order[j])[i])?;

    let (u, v) = if transpose {
        (right_mat, left_mat)
    } else {
        (left_mat, right_mat)
    };
    Ok(SvdResult {
        u,
        s: s.into_iter().map(|v| v * scale).collect(),
        vt: v.transpose(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthogonality_error(q: &Matrix) -> f64 {
        let qtq = q.t_matmul(q).unwrap();
        qtq.sub(&Matrix::identity(q.cols()).unwrap()).unwrap().frobenius_norm()
    }

    #[test]
    fn diagonal_input() {
        let a = Matrix::diag(&[3.0, 1.0]).unwrap();
        let r = svd(&a).unwrap();
        assert_eq!(r.s, vec![3.0, 1.0]);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r.u[(i, j)].abs() - expect).abs() < 1e-15);
                assert!((r.vt[(i, j)].abs() - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_matrix() {
        let a = Matrix::zeros(3, 2).unwrap();
        let r = svd(&a).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0]);
        assert!(orthogonality_error(&r.u) < 1e-12);
        assert!(orthogonality_error(&r.vt) < 1e-12);
    }

    #[test]
    fn wide_and_rank_deficient() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0, 8.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert_eq!(r.u.shape(), (2, 2));
        assert_eq!(r.vt.shape(), (4, 4));
        assert!(r.s[1] < 1e-14 * r.s[0]);
        let err = r.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm();
        assert!(err <= 1e-10 * a.frobenius_norm());
        assert!(orthogonality_error(&r.u) < 1e-10);
        assert!(orthogonality_error(&r.vt) < 1e-10);
    }

    #[test]
    fn extreme_dynamic_range_converges() {
        let a = Matrix::from_fn(6, 4, |i, j| {
            let mag = [1.0, 1e-80, 1e-150, 1e-160][j];
            mag * ((i * 5 + j * 3) as f64 * 0.7).sin()
        })
        .unwrap();
        let s = singular_values(&a).unwrap();
        assert!(s[0] > 0.5 && s[1] < 1e-70);
        let tiny = Matrix::from_fn(3, 2, |i, j| 1e-300 * (1.0 + i as f64 + 2.0 * j as f64)).unwrap();
        let scaled = tiny.scale(1e300).unwrap();
        let (a, b) = (singular_values(&tiny).unwrap(), singular_values(&scaled).unwrap());
        assert!((a[0] * 1e300 / b[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_random_completes_basis() {
        let a = Matrix::from_fn(24, 30, |i, j| {
            ((i * 31 + j * 17) as f64 * 0.37).sin() + 0.1 * (i as f64 - j as f64)
        })
        .unwrap();
        let r = svd(&a).unwrap();
        assert!(orthogonality_error(&r.u) < 1e-12);
        assert!(orthogonality_error(&r.vt) < 1e-12);
        let err = r.reconstruct().unwrap().sub(&a).unwrap().frobenius_norm();
        assert!(err <= 1e-12 * a.frobenius_norm());
    }

    #[test]
    fn values_path_is_bit_identical() {
        let a = Matrix::from_fn(5, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7 + 0.1 * j as f64).unwrap();
        assert_eq!(singular_values(&a).unwrap(), svd(&a).unwrap().s);
        let at = a.transpose();
        assert_eq!(singular_values(&at).unwrap(), svd(&at).unwrap().s);
    }
}
