//! KKT-residual inverse optimal control.
//!
//! For fixed frequencies W the stationarity residual of every demonstration is
//! affine in (A, λ, υ), so the inner estimation problem is a convex
//! l1-regularized least-squares problem. The frequencies are handled by a
//! local search started from a grid, and the regularization weight by a line
//! search scored on validation error.

mod inner;
mod residual;
mod search;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{FeatureVector, TrigTimeModel};
use crate::dataset::TrajectorySegment;
use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::focp::ConstraintSet;

pub use inner::{reduced_objective, refine_frequencies, solve_inner, InnerSolution, RefineOutcome};
pub use residual::{
    build_normal_system, frequency_objective, sensitivities, stationarity_residual, NormalSystem,
    SegmentMultipliers, SegmentSensitivity, Slot,
};
pub use search::{omega_tuples, sp_ioc, ttd_ioc};

/// Model, features and constraints shared by all segments of an IOC run.
#[derive(Clone, Debug)]
pub struct IocContext {
    pub model: SystemModel,
    pub features: FeatureVector,
    pub constraints: ConstraintSet,
    pub eps_active: f64,
}

impl IocContext {
    /// Squared-state/input features, no inequality constraints.
    pub fn for_model(model: SystemModel) -> Self {
        Self {
            features: FeatureVector::for_system(model.kind),
            model,
            constraints: ConstraintSet::none(),
            eps_active: 1e-6,
        }
    }
}

/// Training segments with their data-only derivatives precomputed.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub context: IocContext,
    pub segments: Vec<SegmentSensitivity>,
}

impl TrainingData {
    pub fn new(context: IocContext, segments: &[TrajectorySegment]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::EmptyDataset("training"));
        }
        let sens = segments
            .par_iter()
            .map(|s| sensitivities(&context, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            context,
            segments: sens,
        })
    }

    pub fn q(&self) -> usize {
        self.context.features.dim()
    }

    pub fn constraint_count(&self) -> usize {
        self.context.constraints.count()
    }
}

/// Arithmetic grid [initial : step : final]; a zero step gives one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn new(initial: f64, last: f64, step: f64) -> Self {
        Self { initial, last, step }
    }

    pub fn single(value: f64) -> Self {
        Self::new(value, value, 0.0)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.initial <= self.last) || !(self.step >= 0.0) {
            return Err(Error::Invalid(format!(
                "{what} grid needs initial <= final and step >= 0"
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        if self.step == 0.0 {
            return vec![self.initial];
        }
        let count = ((self.last - self.initial) / self.step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|k| self.initial + k as f64 * self.step)
            .collect()
    }
}

/// Settings of the time-dependent estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtdConfig {
    /// Number of frequencies E.
    pub basis_count: usize,
    pub omega_grid: GridSpec,
    pub beta_grid: GridSpec,
    /// Anchor column v_α*. A single value c stands for (c, 0, …, 0).
    pub anchor: Vec<f64>,
    pub nonneg_theta: bool,
    pub fista_tol: f64,
    pub fista_max_iter: usize,
    pub refine_rounds: usize,
    pub refine_tol: f64,
}

impl Default for TtdConfig {
    fn default() -> Self {
        Self {
            basis_count: 2,
            omega_grid: GridSpec::new(0.5, 2.5, 2.0),
            beta_grid: GridSpec::new(0.04, 0.06, 0.01),
            anchor: vec![1.0],
            nonneg_theta: true,
            fista_tol: crate::numerics::DEFAULT_FISTA_TOL,
            fista_max_iter: crate::numerics::DEFAULT_MAX_ITER,
            refine_rounds: 50,
            refine_tol: 1e-8,
        }
    }
}

impl TtdConfig {
    pub fn validate(&self) -> Result<()> {
        self.omega_grid.validate("omega")?;
        self.beta_grid.validate("beta")?;
        let basis = 2 * self.basis_count + 1;
        if self.anchor.len() != 1 && self.anchor.len() != basis {
            return Err(Error::Invalid(format!(
                "anchor must have 1 or {basis} entries, got {}",
                self.anchor.len()
            )));
        }
        if self.anchor.iter().all(|v| *v == 0.0) {
            return Err(Error::Invalid("anchor column must be nonzero".into()));
        }
        if self.beta_grid.initial < 0.0 {
            return Err(Error::Invalid("beta must be nonnegative".into()));
        }
        Ok(())
    }

    /// The anchor as a full (2E+1)-vector.
    pub fn anchor_column(&self) -> Vec<f64> {
        let basis = 2 * self.basis_count + 1;
        if self.anchor.len() == basis {
            return self.anchor.clone();
        }
        let mut col = vec![0.0; basis];
        col[0] = self.anchor[0];
        col
    }
}

/// One line of the β line search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaRecord {
    pub beta: f64,
    pub frequencies: Vec<f64>,
    pub training_residual: f64,
    /// +∞ when a validation re-solve failed.
    #[serde(with = "crate::serde_ext::inf_as_null")]
    pub validation_error: f64,
}

/// Result of [`ttd_ioc`] or [`sp_ioc`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IocSolution {
    pub model: TrigTimeModel,
    pub anchor: Vec<f64>,
    pub multipliers: Vec<SegmentMultipliers>,
    pub training_residual: f64,
    pub selected_beta: f64,
    #[serde(with = "crate::serde_ext::inf_as_null")]
    pub validation_error: f64,
    pub trace: Vec<BetaRecord>,
    pub config: TtdConfig,
}

impl IocSolution {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
