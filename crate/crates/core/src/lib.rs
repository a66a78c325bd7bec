//! Stability analysis of small neural models with the first-order local
//! influence (FI) measure.
//!
//! The crate bundles a self-contained model zoo, the FI measure and its
//! competitors, Monte-Carlo sequence FI, perturbation and sparsification
//! harnesses, and influence-protected model merging.

pub mod autodiff;
pub mod error;
pub mod fi;
pub mod harness;
pub mod linalg;
pub mod merge;
pub mod reference;
pub mod seq;
pub mod zoo;

pub use error::{Error, Result};
