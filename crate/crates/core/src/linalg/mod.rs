//! Dense linear-algebra kernel.

mod kron;
mod matrix;
mod spectral;
mod svd;

pub use kron::{commutation_matrix, kron, unvec, vec, CommutationMatrix, KRON_MAX_ENTRIES};
pub use matrix::Matrix;
pub use spectral::{rank_tolerance, spectral_record, RecordTag, SpectralRecord, RANK_SAFETY};
pub use svd::{singular_values, svd, SvdResult, MAX_SWEEPS, ROTATION_TOL};
