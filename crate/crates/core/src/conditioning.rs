//! Correction matrices that lower the condition number of `W_Q`, `W_K`, `W_V`.
//!
//! Two constructions are provided:
//!
//! * **SVD cap** — with `W = U·S·Vᵀ`, set `C = U·S̄·Vᵀ` where `S̄` carries
//!   `σ_max(W)` on its whole leading diagonal. Then `W + C = U·(S + S̄)·Vᵀ`
//!   has singular values `σ_i + σ_max`, so `κ(W + C) = 2σ_max/(σ_min + σ_max) ≤ 2`.
//! * **Diagonal shift** — `C = λ·I_k`, the rectangular identity scaled by a
//!   fixed `λ ≥ 2`. No SVD is needed; `κ(W + λI_k) < κ(W)` whenever
//!   `(σ_max + λ)/(λ − σ_min) ≤ σ_max/σ_min` (see [`shift_precondition_holds`]).
//!
//! Corrections are built once from the initial weights and never change
//! afterwards: [`CorrectionSet`] exposes no mutable access.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, Projection};
use crate::error::{Error, Result};
use crate::linalg::{spectral_record, svd, Matrix, RecordTag};

/// Smallest admissible diagonal shift.
pub const MIN_LAMBDA: f64 = 2.0;

/// Default diagonal shift.
pub const DEFAULT_LAMBDA: f64 = 10.0;

/// How a [`CorrectionSet`] was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CorrectionMode {
    SvdCap,
    DiagonalShift { lambda: f64 },
}

/// Conditioning applied by a model: none, or one of the correction modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Conditioning {
    Off,
    SvdCap,
    DiagonalShift { lambda: f64 },
}

impl Conditioning {
    pub fn correction_mode(self) -> Option<CorrectionMode> {
        match self {
            Conditioning::Off => None,
            Conditioning::SvdCap => Some(CorrectionMode::SvdCap),
            Conditioning::DiagonalShift { lambda } => Some(CorrectionMode::DiagonalShift { lambda }),
        }
    }

    /// Parses a mode name (`off`, `svd-cap`, `diag-shift`) with the shift to use.
    pub fn from_name(name: &str, lambda: f64) -> Result<Self> {
        match name.trim() {
            "off" | "none" => Ok(Conditioning::Off),
            "svd-cap" | "svd" => Ok(Conditioning::SvdCap),
            "diag-shift" | "diagonal-shift" | "shift" => {
                check_lambda(lambda)?;
                Ok(Conditioning::DiagonalShift { lambda })
            }
            other => Err(Error::Config(format!(
                "unknown conditioning mode {other:?} (expected off, svd-cap or diag-shift)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::Off => "off",
            Conditioning::SvdCap => "svd-cap",
            Conditioning::DiagonalShift { .. } => "diag-shift",
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Conditioning::DiagonalShift { lambda } => write!(f, "diag-shift({lambda})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    /// Accepts `off`, `svd-cap`, `diag-shift` (λ = 10) or `diag-shift:<λ>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((name, lam)) => {
                let lambda = lam
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad lambda in {s:?}")))?;
                Conditioning::from_name(name, lambda)
            }
            None => Conditioning::from_name(s, DEFAULT_LAMBDA),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= MIN_LAMBDA) {
        return Err(Error::Constraint(format!(
            "diagonal shift requires lambda >= 2, got {lambda}"
        )));
    }
    Ok(())
}

/// Diagnostic for the diagonal-shift hypothesis
/// `(σ_max + λ)/(λ − σ_min) ≤ σ_max/σ_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPrecondition {
    pub holds: bool,
    #[serde(with = "crate::report::float")]
    pub lhs: f64,
    #[serde(with = "crate::report::float")]
    pub rhs: f64,
    #[serde(with = "crate::report::float")]
    pub sigma_min: f64,
    #[serde(with = "crate::report::float")]
    pub sigma_max: f64,
    #[serde(with = "crate::report::float")]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// `C = U·S̄·Vᵀ` with `σ_max(w)` on every leading diagonal entry of `S̄`.
pub fn svd_cap_correction(w: &Matrix) -> Result<Matrix> {
    if w.is_zero() {
        return Err(Error::Degenerate("SVD-cap correction of an all-zero matrix".into()));
    }
    let f = svd(w)?;
    let (m, n) = w.shape();
    let k = m.min(n);
    let smax = f.s[0];
    let mut c = Matrix::zeros(m, n)?;
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += f.u[(i, t)] * f.vt[(t, j)];
            }
            c[(i, j)] = smax * acc;
        }
    }
    Ok(c)
}

/// `λ·I_k` of shape `(rows, cols)`, `k = min(rows, cols)`.
pub fn diag_shift_correction(shape: (usize, usize), lambda: f64) -> Result<Matrix> {
    check_lambda(lambda)?;
    Matrix::eye(shape.0, shape.1)?.scale(lambda)
}

/// Evaluates both sides of the diagonal-shift hypothesis for `w` and `λ`.
///
/// Never fails on degenerate input: when `λ ≤ σ_min` the left side is
/// undefined and the report says so.
pub fn shift_precondition_holds(w: &Matrix, lambda: f64) -> Result<ShiftPrecondition> {
    let rec = spectral_record(w, RecordTag::default())?;
    let (smin, smax) = (rec.sigma_min, rec.sigma_max);
    let rhs = rec.kappa;
    let mut report = ShiftPrecondition {
        holds: false,
        lhs: f64::NAN,
        rhs,
        sigma_min: smin,
        sigma_max: smax,
        lambda,
        reason: None,
    };
    if lambda.partial_cmp(&smin) != Some(std::cmp::Ordering::Greater) {
        report.reason = Some(format!("lambda {lambda} does not exceed sigma_min {smin}"));
        return Ok(report);
    }
    report.lhs = (smax + lambda) / (lambda - smin);
    report.holds = report.lhs <= rhs;
    if !report.holds {
        report.reason = Some("shifted ratio exceeds the current condition number".into());
    }
    Ok(report)
}

/// Frozen `(C_Q, C_K, C_V)` for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSet {
    c_q: Matrix,
    c_k: Matrix,
    c_v: Matrix,
    mode: CorrectionMode,
    diagnostics: Vec<(Projection, ShiftPrecondition)>,
}

impl CorrectionSet {
    pub fn c_q(&self) -> &Matrix {
        &self.c_q
    }

    pub fn c_k(&self) -> &Matrix {
        &self.c_k
    }

    pub fn c_v(&self) -> &Matrix {
        &self.c_v
    }

    pub fn get(&self, which: Projection) -> &Matrix {
        match which {
            Projection::Query => &self.c_q,
            Projection::Key => &self.c_k,
            Projection::Value => &self.c_v,
        }
    }

    pub fn mode(&self) -> CorrectionMode {
        self.mode
    }

    pub fn shape(&self) -> (usize, usize) {
        self.c_q.shape()
    }

    /// Always true: there is no way to mutate a constructed set.
    pub fn is_frozen(&self) -> bool {
        true
    }

    /// Diagonal-shift hypothesis reports recorded at construction (empty for SVD cap).
    pub fn diagnostics(&self) -> &[(Projection, ShiftPrecondition)] {
        &self.diagnostics
    }

    /// Raw bit patterns of all entries, for exact freeze comparisons.
    pub fn fingerprint(&self) -> Vec<u64> {
        [&self.c_q, &self.c_k, &self.c_v]
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn zeroed(d_model: usize, d_head: usize, mode: CorrectionMode) -> Self {
        let z = Matrix::zeros(d_model, d_head).unwrap();
        Self {
            c_q: z.clone(),
            c_k: z.clone(),
            c_v: z,
            mode,
            diagnostics: Vec::new(),
        }
    }
}

/// Builds the corrections for one head from its (initial) weights.
pub fn build_correction_set(p: &AttentionParams, mode: CorrectionMode) -> Result<CorrectionSet> {
    let shape = p.w_q.shape();
    match mode {
        CorrectionMode::SvdCap => Ok(CorrectionSet {
            c_q: svd_cap_correction(&p.w_q)?,
            c_k: svd_cap_correction(&p.w_k)?,
            c_v: svd_cap_correction(&p.w_v)?,
            mode,
            diagnostics: Vec::new(),
        }),
        CorrectionMode::DiagonalShift { lambda } => {
            let c = diag_shift_correction(shape, lambda)?;
            let diagnostics = Projection::ALL
                .iter()
                .map(|&which| Ok((which, shift_precondition_holds(p.get(which), lambda)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(CorrectionSet {
                c_q: c.clone(),
                c_k: c.clone(),
                c_v: c,
                mode,
                diagnostics,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::singular_values;

    fn kappa(m: &Matrix) -> f64 {
        spectral_record(m, RecordTag::default()).unwrap().kappa
    }

    #[test]
    fn svd_cap_on_diagonal() {
        let w = Matrix::diag(&[3.0, 1.0]).unwrap();
        let c = svd_cap_correction(&w).unwrap();
        assert!(c.max_abs_diff(&Matrix::diag(&[3.0, 3.0]).unwrap()).unwrap() < 1e-14);
        let k = kappa(&w.add(&c).unwrap());
        assert!((k - 1.5).abs() < 1e-14);
    }

    #[test]
    fn svd_cap_on_scaled_identity() {
        let w = Matrix::identity(3).unwrap().scale(0.7).unwrap();
        let c = svd_cap_correction(&w).unwrap();
        assert!(c.max_abs_diff(&w).unwrap() < 1e-15);
        assert!((kappa(&w.add(&c).unwrap()) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_cap_rejects_zero() {
        assert!(matches!(
            svd_cap_correction(&Matrix::zeros(3, 2).unwrap()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn svd_cap_has_flat_spectrum() {
        let w = Matrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin()).unwrap();
        let s = singular_values(&svd_cap_correction(&w).unwrap()).unwrap();
        assert!(s[0] - s[s.len() - 1] <= 1e-9 * s[0]);
    }

    #[test]
    fn diag_shift_shapes() {
        let c = diag_shift_correction((3, 2), 10.0).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[10.0, 0.0], [0.0, 10.0], [0.0, 0.0]]).unwrap());
        let c = diag_shift_correction((2, 2), 2.0).unwrap();
        assert_eq!(c, Matrix::identity(2).unwrap().scale(2.0).unwrap());
        let c = diag_shift_correction((2, 4), 10.0).unwrap();
        assert_eq!(c.row(0), &[10.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.row(1), &[0.0, 10.0, 0.0, 0.0]);
        assert!(matches!(diag_shift_correction((2, 2), 1.99), Err(Error::Constraint(_))));
        assert!(diag_shift_correction((2, 2), f64::NAN).is_err());
    }

    #[test]
    fn shift_precondition_examples() {
        let w = Matrix::diag(&[4.0, 1.0]).unwrap();
        let r = shift_precondition_holds(&w, 10.0).unwrap();
        assert!(r.holds);
        assert_eq!(r.lhs, 14.0 / 9.0);
        assert_eq!(r.rhs, 4.0);
        let shifted = w.add(&diag_shift_correction((2, 2), 10.0).unwrap()).unwrap();
        assert!((kappa(&shifted) - 14.0 / 11.0).abs() < 1e-14);

        let r = shift_precondition_holds(&Matrix::identity(2).unwrap(), 10.0).unwrap();
        assert!(!r.holds);
        assert_eq!(r.rhs, 1.0);
        assert!(r.lhs > 1.0);

        let r = shift_precondition_holds(&Matrix::diag(&[40.0, 20.0]).unwrap(), 10.0).unwrap();
        assert!(!r.holds && r.lhs.is_nan() && r.reason.is_some());
    }

    #[test]
    fn build_is_deterministic_and_shift_is_uniform() {
        let mk = |s: f64| Matrix::from_fn(4, 3, |i, j| ((i + 2 * j) as f64 * s).cos()).unwrap();
        let p = AttentionParams::new(mk(0.3), mk(0.5), mk(0.9)).unwrap();
        let a = build_correction_set(&p, CorrectionMode::SvdCap).unwrap();
        let b = build_correction_set(&p, CorrectionMode::SvdCap).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let shift = build_correction_set(&p, CorrectionMode::DiagonalShift { lambda: 10.0 }).unwrap();
        assert_eq!(shift.c_q(), shift.c_k());
        assert_eq!(shift.c_q(), shift.c_v());
        assert_eq!(shift.diagnostics().len(), 3);
        assert!(shift.is_frozen());
    }

    #[test]
    fn conditioning_parsing() {
        assert_eq!("off".parse::<Conditioning>().unwrap(), Conditioning::Off);
        assert_eq!("svd-cap".parse::<Conditioning>().unwrap(), Conditioning::SvdCap);
        assert_eq!(
            "diag-shift:6".parse::<Conditioning>().unwrap(),
            Conditioning::DiagonalShift { lambda: 6.0 }
        );
        assert_eq!(
            "diag-shift".parse::<Conditioning>().unwrap(),
            Conditioning::DiagonalShift { lambda: 10.0 }
        );
        assert!("diag-shift:1".parse::<Conditioning>().is_err());
        assert!("bogus".parse::<Conditioning>().is_err());
    }
}
