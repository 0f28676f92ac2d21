//! Dense matrix arithmetic, SVD-based pseudo-inverses and projectors, and
//! the seeded random source used everywhere else.
//!
//! Everything here is 64-bit and row-major. Values are plain data: cloning a
//! [`Matrix`] is the only way to share-and-mutate.

mod matrix;
mod rng;
mod spd;
mod svd;

pub use matrix::{frobenius_norm, l2_norm, matmul, matrixize, vectorize, Matrix};
pub use rng::Rng;
pub use spd::{norm_1, spd_inverse};
pub use svd::{
    col_space_projector, pseudo_inverse, row_space_projector, svd, SvdResult, DEFAULT_RANK_TOL,
};
