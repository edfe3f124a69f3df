use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{singular_values, Matrix};

/// Safety factor on the scaled machine-epsilon rank tolerance.
pub const RANK_SAFETY: f64 = 16.0;

/// `τ = max(m, n)·σ_max·ε·16`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * f64::EPSILON * RANK_SAFETY
}

/// Label attached to a spectral snapshot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordTag {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

impl RecordTag {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn at(mut self, layer: usize, head: usize) -> Self {
        self.layer = Some(layer);
        self.head = Some(head);
        self
    }

    pub fn step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }
}

/// Singular-value summary of one matrix.
///
/// `kappa` is `+∞` when the smallest singular value is at or below the rank
/// tolerance; `kappa_effective` always divides by the smallest value above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRecord {
    #[serde(with = "crate::report::float")]
    pub sigma_min: f64,
    #[serde(with = "crate::report::float")]
    pub sigma_max: f64,
    #[serde(with = "crate::report::float")]
    pub kappa: f64,
    #[serde(with = "crate::report::float")]
    pub kappa_effective: f64,
    pub numerical_rank: usize,
    pub tag: RecordTag,
}

impl SpectralRecord {
    /// Builds the record from precomputed singular values of an `rows × cols` matrix.
    pub fn from_singular_values(rows: usize, cols: usize, s: &[f64], tag: RecordTag) -> Self {
        let sigma_max = s.first().copied().unwrap_or(0.0);
        let sigma_min = s.last().copied().unwrap_or(0.0);
        let tau = rank_tolerance(rows, cols, sigma_max);
        let numerical_rank = s.iter().filter(|&&v| v > tau).count();
        let kappa = if sigma_min > tau {
            sigma_max / sigma_min
        } else {
            f64::INFINITY
        };
        let kappa_effective = match s.iter().rev().find(|&&v| v > tau) {
            Some(&smallest) => sigma_max / smallest,
            None => f64::INFINITY,
        };
        Self {
            sigma_min,
            sigma_max,
            kappa,
            kappa_effective,
            numerical_rank,
            tag,
        }
    }

    pub fn is_full_rank(&self) -> bool {
        self.kappa.is_finite()
    }
}

/// Spectral snapshot of `a`.
pub fn spectral_record(a: &Matrix, tag: RecordTag) -> Result<SpectralRecord> {
    let s = singular_values(a)?;
    Ok(SpectralRecord::from_singular_values(a.rows(), a.cols(), &s, tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_perfectly_conditioned() {
        let r = spectral_record(&Matrix::identity(4).unwrap(), RecordTag::named("I4")).unwrap();
        assert_eq!((r.sigma_min, r.sigma_max, r.kappa), (1.0, 1.0, 1.0));
        assert_eq!(r.numerical_rank, 4);
    }

    #[test]
    fn diagonal_ratio() {
        let r = spectral_record(&Matrix::diag(&[10.0, 2.0]).unwrap(), RecordTag::default()).unwrap();
        assert_eq!(r.kappa, 5.0);
        assert_eq!(r.kappa_effective, 5.0);
    }

    #[test]
    fn singular_matrix_reports_infinite_kappa() {
        let a = Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.5]]).unwrap();
        let r = spectral_record(&a, RecordTag::default()).unwrap();
        assert!(r.kappa.is_infinite());
        assert_eq!(r.numerical_rank, 2);
        assert!((r.kappa_effective - 4.0).abs() < 1e-12);
        assert!(r.sigma_max >= r.sigma_min);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let r = spectral_record(&Matrix::zeros(2, 3).unwrap(), RecordTag::default()).unwrap();
        assert_eq!(r.numerical_rank, 0);
        assert!(r.kappa.is_infinite() && r.kappa_effective.is_infinite());
    }
}
