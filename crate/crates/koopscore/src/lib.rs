//! Koopman-spectral screening for echocardiographic cine sequences.
//!
//! The pipeline lifts preprocessed image sequences into a data-driven
//! observable dictionary, estimates a finite Koopman operator per view,
//! extracts spectral mode features, and combines them with clinical
//! covariates into a calibrated per-study risk value.

// ndarray-linalg needs a BLAS/LAPACK provider linked into the final
// artifact; referencing the crate here pulls in the system OpenBLAS.
use openblas_src as _;

pub mod edmd;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod risk;
pub mod sequence;
pub mod synth;

pub use error::{Error, Result};
