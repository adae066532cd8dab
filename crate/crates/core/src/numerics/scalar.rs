use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::dual::DualScalar;

/// Arithmetic shared by plain floats and dual numbers, so model code is
/// written once and differentiated by instantiating it with [`DualScalar`].
pub trait Scalar:
    Clone
    + fmt::Debug
    + Send
    + Sync
    + From<f64>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + for<'a> Add<&'a Self, Output = Self>
    + for<'a> Sub<&'a Self, Output = Self>
    + for<'a> Mul<&'a Self, Output = Self>
    + for<'a> Div<&'a Self, Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;

    /// Dispatches a [`StageFunction`] to the evaluator for this scalar type.
    fn eval_stage(f: &dyn StageFunction, x: &[Self], u: &[Self]) -> Vec<Self>;
}

/// A vector-valued function of one (state, input) pair that can be evaluated
/// on plain floats and on dual numbers. Cost features and stage constraints
/// implement this so user-supplied maps stay differentiable.
pub trait StageFunction: Send + Sync {
    fn output_dim(&self) -> usize;
    fn eval_f64(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn eval_dual(&self, x: &[DualScalar], u: &[DualScalar]) -> Vec<DualScalar>;
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn eval_stage(f: &dyn StageFunction, x: &[Self], u: &[Self]) -> Vec<Self> {
        f.eval_f64(x, u)
    }
}

impl Scalar for DualScalar {
    fn value(&self) -> f64 {
        self.value
    }
    fn sin(self) -> Self {
        DualScalar::sin(self)
    }
    fn cos(self) -> Self {
        DualScalar::cos(self)
    }
    fn exp(self) -> Self {
        DualScalar::exp(self)
    }
    fn sqrt(self) -> Self {
        DualScalar::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        DualScalar::powi(self, n)
    }
    fn eval_stage(f: &dyn StageFunction, x: &[Self], u: &[Self]) -> Vec<Self> {
        f.eval_dual(x, u)
    }
}

/// Lifts a slice of plain values to constants of scalar type `S`.
pub fn lift<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::from(x)).collect()
}

pub fn values<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(Scalar::value).collect()
}
