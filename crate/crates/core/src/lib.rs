//! Longitudinal independent component analysis (L-ICA).
//!
//! A two-level hierarchical ICA model for repeated-measures signal data,
//! fitted by exact or subspace EM, with voxel-wise covariate-effect tests,
//! subpopulation map prediction, and a simulation harness.

pub mod cli;
pub mod config;
pub mod datamodel;
pub mod em;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod patterns;
pub mod predict;
pub mod preprocess;
pub mod report;
pub mod simgen;

pub use datamodel::{Contrast, IcMixture, LongitudinalDataset, ModelParams, MogParams};
pub use em::{fit, FitConfig, FitResult, PosteriorMoments};
pub use error::{LicaError, Result};
pub use patterns::PatternMode;
