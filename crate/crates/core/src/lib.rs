//! Products of positive random matrices: cone geometry, transfer operators,
//! rate functions and tilted sampling.

pub mod cone;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod harness;
pub mod rate;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod spline;

pub use cone::{hilbert_distance, PositiveMatrix, SimplexPoint};
pub use ensemble::{ConditionReport, EnsembleDoc, FiniteEnsemble, ScalarReference};
pub use error::{Error, Result};
pub use rng::RandomStream;
