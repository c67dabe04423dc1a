//! General approximate message passing over independent-entry measurement
//! ensembles, its scalar state-evolution predictor, and a finite-size
//! statistical verification harness for the predictor's guarantees.
//!
//! Layout follows the pipeline: [`stats`] (empirical moments and KS
//! distances), [`distributions`] (entry/signal/noise laws and the
//! Gaussian-expectation engine), [`ensembles`] (matrix generation),
//! [`denoisers`] (controlled entrywise functions), [`amp`] (the recursion
//! with Onsager corrections), [`state_evolution`] (the (σ_t², τ_t²)
//! recursion and observable predictions), and [`verification`] (projection,
//! conditioning, Gaussianity, and identity checks at finite size).

pub mod amp;
pub mod denoisers;
pub mod distributions;
pub mod ensembles;
pub mod error;
pub mod rng;
pub mod state_evolution;
pub mod stats;
pub mod verification;

pub use distributions::ScalarDistribution;
pub use error::{Error, Result};
