//! Split conformal prediction sets for multiclass classifier scores, and
//! three audits built on them: distribution shift between evaluation sets,
//! selective prediction by set size, and per-cohort calibration with
//! set-size disparity tests.
//!
//! Scores enter as tabular probability vectors (see [`io`]); the classifier
//! itself is out of the picture.

pub mod conformal;
pub mod error;
pub mod groups;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod selective;
pub mod shift;
pub mod synthgen;

pub use conformal::{
    calibrate, nonconformity, predict_batch, predict_batch_with, predict_set, predict_set_with,
    CalibrationModel, PredictOptions, PredictionSet, ScoreFn, ScoreRecord,
};
pub use error::{Error, Result};
pub use groups::{disparity_test, group_audit, group_calibrate, DisparityTest, GroupReport};
pub use metrics::{argmax_labels, coverage_audit, weighted_kappa, AuditReport, KappaResult, Weighting};
pub use selective::{filter_by_set_size, sweep, FilterSweep, Partition};
pub use shift::{alpha_sweep, diff_audits, AlphaSweep, ShiftDiff};
pub use synthgen::{coverage_experiment, generate, generate_trial, CoverageExperiment, SynthConfig};

/// Crate version, stamped into every JSON report.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
