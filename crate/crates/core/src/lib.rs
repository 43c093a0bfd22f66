//! Magnetic resonance fingerprinting reconstruction lab.
//!
//! Simulates two-pool fingerprints and dictionaries, forges synthetic
//! phantom acquisitions, reconstructs parametric maps by dictionary matching
//! and by a spatially regularized CNN built from a receptive-field and
//! parameter budget, and evaluates the results.

pub mod archgen;
pub mod container;
pub mod error;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod signal;
pub mod types;

pub use error::{Error, Result};
pub use types::{Fingerprint, MapKind, MrfImage, ParametricMaps, N_MAPS};
