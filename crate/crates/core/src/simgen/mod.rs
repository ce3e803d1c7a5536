//! Synthetic data, component matching and recovery metrics.

pub mod generate;
pub mod matching;
pub mod metrics;
pub mod scenario;

pub use generate::{generate, generate_reduced, grid_coords, GroundTruth};
pub use matching::{hungarian, match_components, Matching};
pub use metrics::{evaluate_recovery, recovery_metrics, RecoveryMetrics};
pub use scenario::{default_regions, Region, Scenario, TimeCourseSpec};
pub mod forward;

pub use forward::{random_covariates, random_instance, random_params, sample_from_model, Dims, LatentDraws};
pub mod calibrate;

pub use calibrate::{run_test_calibration, CalibrationConfig, CalibrationPoint, CalibrationTable, TestKind};
pub mod pipeline;

pub use pipeline::{active_alpha, fit_with_restarts, run_recovery, simulate_reduced, RecoveryRun};
