//! Upper bound on the condition number of the stacked attention Jacobian,
//!
//! ```text
//! κ(J) ≤ κ(X)³·κ(Λ_S)·κ(W_V)·(κ(W_Q) + κ(W_K)) + κ(X)·κ(S)
//! ```
//!
//! and aggregation of probe snapshots into per-step conditioning trajectories.
//!
//! `Λ_S` annihilates every per-row constant shift, so its raw condition number
//! is always infinite; both `Λ_S` and `S` enter the bound through their
//! effective condition numbers. Raw values are kept alongside for inspection.

use serde::{Deserialize, Serialize};

use crate::attention::{assemble_jacobian, attention_scores, softmax_rows, softmax_rows_jacobian, AttentionParams};
use crate::error::{Error, Result};
use crate::linalg::{spectral_record, Matrix, RecordTag, SpectralRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundComponents {
    #[serde(with = "crate::report::float")]
    pub kappa_x: f64,
    /// Effective κ of the softmax derivative `Λ_S`.
    #[serde(with = "crate::report::float")]
    pub kappa_lambda_softmax: f64,
    #[serde(with = "crate::report::float")]
    pub kappa_wq: f64,
    #[serde(with = "crate::report::float")]
    pub kappa_wk: f64,
    #[serde(with = "crate::report::float")]
    pub kappa_wv: f64,
    /// Effective κ of the attention matrix `S`.
    #[serde(with = "crate::report::float")]
    pub kappa_softmax: f64,
    #[serde(with = "crate::report::float")]
    pub kappa_lambda_softmax_raw: f64,
    #[serde(with = "crate::report::float")]
    pub kappa_softmax_raw: f64,
}

impl BoundComponents {
    /// The bound's arithmetic; the single place it is evaluated.
    pub fn bound(&self) -> f64 {
        self.kappa_x.powi(3) * self.kappa_lambda_softmax * self.kappa_wv * (self.kappa_wq + self.kappa_wk)
            + self.kappa_x * self.kappa_softmax
    }

    /// `(κ(W_Q) + κ(W_K))·κ(W_V)`, the part spectral corrections act on.
    pub fn weight_factor(&self) -> f64 {
        (self.kappa_wq + self.kappa_wk) * self.kappa_wv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(with = "crate::report::float")]
    pub kappa_j: f64,
    #[serde(with = "crate::report::float")]
    pub kappa_j_effective: f64,
    #[serde(with = "crate::report::float")]
    pub bound_value: f64,
    pub bound_components: BoundComponents,
    pub jacobian_rank: usize,
    pub full_rank: bool,
    /// `Some(κ(J) ≤ bound)` when the Jacobian has full rank and the bound is
    /// finite, `None` when the comparison is suppressed.
    pub bound_holds: Option<bool>,
    pub tag: RecordTag,
}

/// Evaluates every factor of the bound and the directly computed `κ(J)`.
pub fn evaluate_bound(x: &Matrix, p: &AttentionParams, tag: RecordTag) -> Result<BoundReport> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Constraint(format!("bound needs N >= 2 tokens, got {n}")));
    }
    let blocks = assemble_jacobian(x, p)?;
    let j_rec = spectral_record(&blocks.stacked, tag.clone())?;

    let scores = attention_scores(x, p)?;
    let lam = spectral_record(&softmax_rows_jacobian(&scores)?, RecordTag::named("lambda_softmax"))?;
    let soft = spectral_record(&softmax_rows(&scores), RecordTag::named("softmax"))?;
    let kappa = |m: &Matrix| spectral_record(m, RecordTag::default()).map(|r| r.kappa);

    let components = BoundComponents {
        kappa_x: kappa(x)?,
        kappa_lambda_softmax: lam.kappa_effective,
        kappa_wq: kappa(&p.w_q)?,
        kappa_wk: kappa(&p.w_k)?,
        kappa_wv: kappa(&p.w_v)?,
        kappa_softmax: soft.kappa_effective,
        kappa_lambda_softmax_raw: lam.kappa,
        kappa_softmax_raw: soft.kappa,
    };
    let bound_value = components.bound();
    let (rows, cols) = blocks.stacked.shape();
    let full_rank = j_rec.numerical_rank == rows.min(cols);
    let bound_holds = (full_rank && bound_value.is_finite()).then_some(j_rec.kappa <= bound_value);
    Ok(BoundReport {
        kappa_j: j_rec.kappa,
        kappa_j_effective: j_rec.kappa_effective,
        bound_value,
        bound_components: components,
        jacobian_rank: j_rec.numerical_rank,
        full_rank,
        bound_holds,
        tag,
    })
}

/// Spectra of one head's projections, raw and corrected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpectra {
    pub layer: usize,
    pub head: usize,
    /// `W_Q`, `W_K`, `W_V`.
    pub weights: [SpectralRecord; 3],
    /// `W_Q + C_Q`, `W_K + C_K`, `W_V + C_V` (equal to `weights` when unconditioned).
    pub corrected: [SpectralRecord; 3],
    /// Frobenius norms of `C_Q`, `C_K`, `C_V` (zero when unconditioned).
    #[serde(with = "float_array")]
    pub correction_norms: [f64; 3],
}

/// Everything measured at one probe step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSnapshot {
    pub step: usize,
    pub heads: Vec<HeadSpectra>,
    pub bounds: Vec<BoundReport>,
}

/// Means of one spectral quantity per role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleMeans {
    #[serde(with = "crate::report::float")]
    pub sigma_min: f64,
    #[serde(with = "crate::report::float")]
    pub sigma_max: f64,
    #[serde(with = "crate::report::float")]
    pub kappa: f64,
}

/// Per-step averages over all heads and layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Q, K, V.
    pub weights: [RoleMeans; 3],
    pub corrected: [RoleMeans; 3],
    #[serde(with = "float_array")]
    pub correction_norms: [f64; 3],
    #[serde(with = "crate::report::float")]
    pub kappa_j: f64,
    #[serde(with = "crate::report::float")]
    pub kappa_j_effective: f64,
    #[serde(with = "crate::report::float")]
    pub bound_value: f64,
    pub heads: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn role_means(records: &[&SpectralRecord]) -> RoleMeans {
    RoleMeans {
        sigma_min: mean(records.iter().map(|r| r.sigma_min)),
        sigma_max: mean(records.iter().map(|r| r.sigma_max)),
        kappa: mean(records.iter().map(|r| r.kappa)),
    }
}

/// Averages each probe snapshot over heads and layers (arithmetic means).
pub fn conditioning_trajectory(log: &[ProbeSnapshot]) -> Result<Vec<TrajectoryPoint>> {
    if log.is_empty() {
        return Err(Error::Empty("conditioning trajectory of an empty run log".into()));
    }
    log.iter()
        .map(|snap| {
            if snap.heads.is_empty() {
                return Err(Error::Empty(format!("probe at step {} has no heads", snap.step)));
            }
            let role = |pick: fn(&HeadSpectra) -> &[SpectralRecord; 3], r: usize| {
                let recs: Vec<&SpectralRecord> = snap.heads.iter().map(|h| &pick(h)[r]).collect();
                role_means(&recs)
            };
            let weights = [0, 1, 2].map(|r| role(|h| &h.weights, r));
            let corrected = [0, 1, 2].map(|r| role(|h| &h.corrected, r));
            let correction_norms = [0, 1, 2].map(|r| mean(snap.heads.iter().map(|h| h.correction_norms[r])));
            Ok(TrajectoryPoint {
                step: snap.step,
                weights,
                corrected,
                correction_norms,
                kappa_j: mean(snap.bounds.iter().map(|b| b.kappa_j)),
                kappa_j_effective: mean(snap.bounds.iter().map(|b| b.kappa_j_effective)),
                bound_value: mean(snap.bounds.iter().map(|b| b.bound_value)),
                heads: snap.heads.len(),
            })
        })
        .collect()
}

mod float_array {
    use serde::ser::SerializeTuple;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(3)?;
        for x in v {
            t.serialize_element(&Wrapped(*x))?;
        }
        t.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        let v: [Wrapped; 3] = Deserialize::deserialize(d)?;
        Ok(v.map(|w| w.0))
    }

    #[derive(serde::Serialize, serde::Deserialize)]
    struct Wrapped(#[serde(with = "crate::report::float")] f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(dm: usize, dh: usize) -> AttentionParams {
        let mk = |k: usize| Matrix::from_fn(dm, dh, |i, j| ((k * 31 + i * 7 + j * 3) as f64 * 0.37).sin()).unwrap();
        AttentionParams::new(mk(0), mk(1), mk(2)).unwrap()
    }

    #[test]
    fn identity_input_satisfies_bound() {
        let x = Matrix::identity(2).unwrap();
        let r = evaluate_bound(&x, &params(2, 2), RecordTag::named("id")).unwrap();
        assert!(r.bound_value.is_finite());
        assert_eq!(r.bound_value, r.bound_components.bound());
        if r.full_rank {
            assert_eq!(r.bound_holds, Some(true));
        }
        assert!(r.bound_components.kappa_lambda_softmax_raw.is_infinite());
    }

    #[test]
    fn single_token_is_rejected() {
        let x = Matrix::zeros(1, 2).unwrap();
        assert!(matches!(
            evaluate_bound(&x, &params(2, 2), RecordTag::default()),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn duplicate_rows_suppress_assertion() {
        let x = Matrix::from_rows(&[[0.5, -1.0, 0.2], [0.5, -1.0, 0.2], [0.5, -1.0, 0.2]]).unwrap();
        let r = evaluate_bound(&x, &params(3, 2), RecordTag::default()).unwrap();
        assert!(!r.full_rank);
        assert_eq!(r.bound_holds, None);
    }

    #[test]
    fn trajectory_of_single_head_equals_raw_records() {
        let rec = |v: f64| SpectralRecord::from_singular_values(2, 2, &[v, 1.0], RecordTag::default());
        let x = Matrix::identity(2).unwrap();
        let bound = evaluate_bound(&x, &params(2, 2), RecordTag::default()).unwrap();
        let snap = ProbeSnapshot {
            step: 3,
            heads: vec![HeadSpectra {
                layer: 0,
                head: 0,
                weights: [rec(2.0), rec(3.0), rec(4.0)],
                corrected: [rec(1.5), rec(1.5), rec(1.5)],
                correction_norms: [1.0, 2.0, 3.0],
            }],
            bounds: vec![bound.clone()],
        };
        let t = conditioning_trajectory(&[snap]).unwrap();
        assert_eq!(t[0].weights[2].kappa, 4.0);
        assert_eq!(t[0].corrected[0].sigma_max, 1.5);
        assert_eq!(t[0].correction_norms, [1.0, 2.0, 3.0]);
        assert_eq!(t[0].bound_value, bound.bound_value);
        assert_eq!(t[0].kappa_j_effective, bound.kappa_j_effective);
        assert!(conditioning_trajectory(&[]).is_err());
    }
}
