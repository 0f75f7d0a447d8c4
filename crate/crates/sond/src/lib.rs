//! Overlap-aware speaker diarization: power-set label encoding, the SOND
//! neural model with CI/CD scorers and a speaker-combining network,
//! spectral-clustering profile extraction, a conversation simulator, and a
//! collar-aware DER scorer.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pse;
pub mod sim;
pub mod train;

pub use error::{Result, SondError};
