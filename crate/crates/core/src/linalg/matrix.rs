use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix with an explicit shape.
///
/// Every constructor rejects NaN/Inf and zero-sized shapes; arithmetic that
/// could overflow checks its output and reports [`Error::NonFinite`].
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_shape(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::dim(format!("matrix shape must be positive, got {rows}x{cols}")));
    }
    Ok(())
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: entry {pos} is {}", data[pos])));
    }
    Ok(())
}

impl Matrix {
    /// Builds a matrix from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(rows, cols)?;
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "matrix construction")?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix whose data is already known to be finite and correctly sized.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    /// Like [`Matrix::from_raw`] but verifies finiteness of a computed result.
    pub(crate) fn from_computed(rows: usize, cols: usize, data: Vec<f64>, what: &str) -> Result<Self> {
        check_finite(&data, what)?;
        Ok(Self::from_raw(rows, cols, data))
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        check_shape(rows, cols)?;
        Ok(Self::from_raw(rows, cols, vec![0.0; rows * cols]))
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        Ok(m)
    }

    /// Rectangular identity: ones on the leading `min(rows, cols)` diagonal.
    pub fn eye(rows: usize, cols: usize) -> Result<Self> {
        let mut m = Self::zeros(rows, cols)?;
        for i in 0..rows.min(cols) {
            m[(i, i)] = 1.0;
        }
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * m);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != m {
                return Err(Error::dim(format!("row {i} has {} entries, expected {m}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(n, m, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        check_shape(rows, cols)?;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        let mut m = Self::zeros(n, n)?;
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        check_finite(&m.data, "diag")?;
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major entries.
    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i < self.rows && j < self.cols).then(|| self.data[i * self.cols + j])
    }

    /// Sets an entry; non-finite values are rejected.
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::dim(format!(
                "index ({i},{j}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("set ({i},{j}) to {value}")));
        }
        self.data[i * self.cols + j] = value;
        Ok(())
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_computed(n, m, out, "matmul")
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::dim(format!(
                "t_matmul {}x{}ᵀ by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (k, n, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &rhs.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_computed(n, m, out, "t_matmul")
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::dim(format!(
                "matmul_t {}x{} by {}x{}ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &rhs.data[j * k..(j + 1) * k];
                out[i * m + j] = dot(arow, brow);
            }
        }
        Matrix::from_computed(n, m, out, "matmul_t")
    }

    fn zip_with(&self, rhs: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(format!(
                "{op} of {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix::from_computed(self.rows, self.cols, data, op)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Result<Matrix> {
        let data = self.data.iter().map(|&a| a * alpha).collect();
        Matrix::from_computed(self.rows, self.cols, data, "scale")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Vertical concatenation.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let first = blocks.first().ok_or_else(|| Error::dim("vstack of no blocks"))?;
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::dim(format!("vstack column mismatch {} vs {cols}", b.cols)));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Horizontal concatenation.
    pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let first = blocks.first().ok_or_else(|| Error::dim("hstack of no blocks"))?;
        let rows = first.rows;
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::dim("hstack row mismatch"));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Copy of the column range `[start, start + width)`.
    pub fn col_slice(&self, start: usize, width: usize) -> Result<Matrix> {
        if width == 0 || start + width > self.cols {
            return Err(Error::dim(format!(
                "column slice {start}..{} of {} columns",
                start + width,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Ok(Matrix::from_raw(self.rows, width, data))
    }

    /// Max absolute entrywise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        (self.shape() == other.shape()).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
    }

    /// `‖self − other‖_F / max(‖other‖_F, floor)`; `None` on shape mismatch.
    pub fn rel_frobenius_diff(&self, other: &Matrix, floor: f64) -> Option<f64> {
        (self.shape() == other.shape()).then(|| {
            let diff: f64 = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            diff / other.frobenius_norm().max(floor)
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i},{j}) outside {}x{}",
            self.rows,
            self.cols
        );
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i},{j}) outside {}x{}",
            self.rows,
            self.cols
        );
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}
