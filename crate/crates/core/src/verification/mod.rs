//! Finite-size statistical verification of the state-evolution guarantees:
//! least-squares projection of iterates onto their history, conditional
//! matrix resampling, Gaussianity and bilinear checks, inner-product
//! identities, controlled-observable comparisons, and moment-decay checks.

mod checks;
mod conditioning;
mod projection;
mod report;

pub use checks::*;
pub use conditioning::*;
pub use projection::*;
pub use report::*;
