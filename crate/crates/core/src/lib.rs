//! Inverse optimal control of time-varying cost weights.
//!
//! The crate covers discrete-time system models, the forward optimal control
//! solver used to generate and revalidate demonstrations, KKT-residual inverse
//! solvers (time-invariant and trigonometric time-dependent), a sliding-window
//! Kalman estimator, and the experiment drivers built on top of them.

pub mod costmodel;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod focp;
pub mod kktioc;
pub mod numerics;
pub mod slidingwindow;
mod serde_ext;

pub use costmodel::{FeatureVector, ThetaSource, TrigTimeModel, TruthProfile, TruthTheta};
pub use dataset::{Dataset, TrajectorySegment};
pub use dynamics::{PhysicalParams, SystemKind, SystemModel};
pub use error::{Error, Result};
pub use focp::{ConstraintSet, FocpOptions, FocpProblem, FocpSolution};
pub use kktioc::{IocContext, IocSolution, TtdConfig};
pub use slidingwindow::{KfEstimate, SlidingWindowConfig};
