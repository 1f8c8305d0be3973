//! Numerical core of the spectral adaptation laboratory.
//!
//! The crate provides, bottom up:
//!
//! - [`matrix`]: dense row-major matrices and vectors with finiteness
//!   guarantees, projections, and Gram-Schmidt;
//! - [`svd`]: deterministic thin SVD with a fixed sign convention;
//! - [`adapters`]: singular-value scaling (SVF) and low-rank (LoRA)
//!   adapters composed on a shared frozen base matrix;
//! - [`probe`]: critical-index selection, spectral loading coefficients,
//!   skill-relevant sets, and index-set overlap diagnostics;
//! - [`theory`]: synthetic instances of the misaligned-task regime and
//!   numerical checks of the distributed-encoding claims;
//! - [`trainer`]: a two-phase training loop on a toy multilayer model,
//!   with orthogonality-constrained knowledge injection and baselines.
//!
//! Everything is seeded through [`seeding`]; no operation reads global
//! RNG state, the clock, or the environment.

pub mod adapters;
pub mod error;
pub mod matrix;
pub mod probe;
pub mod seeding;
pub mod svd;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::{frobenius_inner, orthonormalize_columns, project_onto_columns, DenseMatrix, RealVector};
pub use svd::{spectral_norm, svd, SvdFactors};
