//! Synthetic stand-ins for two adaptive science workflows.
//!
//! Expanded ensemble ([`build_ee_workflow`]) runs independent members that
//! each alternate simulation and analysis until their running estimate
//! settles. Markov state modelling ([`build_msm_workflow`]) runs one
//! pipeline that keeps adding simulation batches until enough samples exist.
//!
//! The simulation kernels draw pseudo-random samples instead of running
//! molecular dynamics, so every result can be replayed by an independent
//! generator. Tasks share data only through files under the workflow's
//! shared data directory; see [`files`].

mod ee;
pub mod files;
mod msm;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::PolicyBindings;
use crate::exec::KernelRegistry;
use crate::model::Workflow;

pub use ee::{
    asynchrony_witness, build_ee_workflow, AnalysisMode, AsynchronyWitness, Drift, EeConfig, EnsembleMemberState,
    EE_POLICY,
};
pub use msm::{build_msm_workflow, msm_expected_iterations, msm_totals, MsmConfig, MSM_POLICY};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DriverError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "threshold of {threshold} samples needs {needed} iterations at {per_iteration} samples each, \
         above the bound of {iterations_max}"
    )]
    Unreachable {
        threshold: u64,
        per_iteration: u64,
        needed: u64,
        iterations_max: u32,
    },
}

/// When a member or model counts as done.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvergenceCriterion {
    /// The last `window` changes of the estimate are all below `tolerance`.
    RunningMeanDelta { tolerance: f64, window: u32 },
    /// At least `threshold` samples were collected.
    CumulativeSampleCount { threshold: u64 },
}

impl ConvergenceCriterion {
    pub fn validate(&self) -> Result<(), DriverError> {
        match *self {
            Self::RunningMeanDelta { tolerance, window } => {
                if !(tolerance > 0.0 && tolerance.is_finite()) {
                    return Err(DriverError::InvalidParameter(format!("tolerance {tolerance} must be > 0")));
                }
                if window == 0 {
                    return Err(DriverError::InvalidParameter("window must be >= 1".into()));
                }
            }
            Self::CumulativeSampleCount { threshold } => {
                if threshold == 0 {
                    return Err(DriverError::InvalidParameter("threshold must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// `estimates[k]` is the estimate after iteration `k`.
    pub fn is_met(&self, estimates: &[f64], samples: u64) -> bool {
        match *self {
            Self::RunningMeanDelta { tolerance, window } => {
                let w = window as usize;
                estimates.len() > w
                    && estimates[estimates.len() - w - 1..]
                        .windows(2)
                        .all(|p| (p[1] - p[0]).abs() < tolerance)
            }
            Self::CumulativeSampleCount { threshold } => samples >= threshold,
        }
    }

    /// First iteration after which the criterion holds, if any.
    pub fn first_met(&self, estimates: &[f64]) -> Option<usize> {
        (0..estimates.len()).find(|&k| self.is_met(&estimates[..=k], 0))
    }
}

/// A generated workflow together with the hooks it refers to.
pub struct DriverWorkflow {
    pub workflow: Workflow,
    pub bindings: PolicyBindings,
}

/// Every kernel the drivers' tasks name.
pub fn kernels() -> KernelRegistry {
    let mut r = KernelRegistry::new();
    ee::register(&mut r);
    msm::register(&mut r);
    r
}

/// Removes driver data left in `shared` by an earlier run. Global analysis
/// reads every member directory it finds, so stale members would leak in.
pub fn reset_data(shared: &Path) -> std::io::Result<()> {
    for sub in [ee::DATA_DIR, msm::DATA_DIR] {
        match std::fs::remove_dir_all(shared.join(sub)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e),
            _ => {}
        }
    }
    Ok(())
}
