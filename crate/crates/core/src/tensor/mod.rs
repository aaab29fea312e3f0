//! Dense linear algebra: column-major matrices, SVD, symmetric
//! eigendecomposition and seeded random sources.
//!
//! Decompositions are delegated to `faer` and products to
//! `matrixmultiply`; this module fixes the conventions on top of them
//! (descending order, deterministic singular-vector signs, PSD repair).

mod decomp;
mod matrix;
mod rng;

pub use decomp::{svd, sym_eig, SvdFactors, SymEig, PSD_CLAMP_RTOL, RANK_RTOL};
pub(crate) use matrix::gemm;
pub use matrix::{dot, norm, Matrix};
pub use rng::{gaussian_matrix, Rng};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("{op}: input contains NaN or infinity")]
    NonFiniteInput { op: &'static str },
    #[error("rows have different lengths")]
    Ragged,
    #[error("empty matrix")]
    Empty,
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max deviation {deviation:e})")]
    NotSymmetric { deviation: f64 },
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },
    #[error("{op} did not converge on a {rows}x{cols} matrix")]
    NoConvergence {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
}
