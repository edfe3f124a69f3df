//! Spectrally conditioned self-attention.
//!
//! * [`linalg`] — dense matrices, `vec`/Kronecker/commutation calculus, Jacobi SVD
//!   and condition-number records.
//! * [`attention`] — the self-attention map, its softmax derivative and the three
//!   analytic parameter Jacobians, plus a finite-difference oracle.
//! * [`conditioning`] — SVD-cap and diagonal-shift correction matrices.
//! * [`bounds`] — the Jacobian condition-number bound and trajectory aggregation.
//! * [`harness`] — a small trainable transformer with conditioned attention.
//! * [`io`] — matrix/config file formats and metrics writers.

pub mod attention;
pub mod bounds;
pub mod conditioning;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
