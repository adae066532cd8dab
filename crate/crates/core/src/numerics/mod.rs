//! Automatic differentiation and the optimization primitives shared by the
//! forward solver and the estimators.

mod dual;
mod fista;
mod lbfgs;
mod scalar;

pub use dual::DualScalar;
pub use fista::{fista_solve, fista_solve_from, CompositeQp, FistaOutcome, Hinge};
pub use lbfgs::{lbfgs_minimize, lbfgs_minimize_with, LbfgsOptions, Minimum};
pub use scalar::{lift, values, Scalar, StageFunction};

use crate::error::{Error, Result};

pub const DEFAULT_TOL_GRAD: f64 = 1e-9;
pub const DEFAULT_FISTA_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 5000;

type Evaluator<'a> = Box<dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'a>;

/// A scalar objective together with its gradient.
pub struct BoxedFunction<'a> {
    dim: usize,
    evaluator: Evaluator<'a>,
}

impl<'a> BoxedFunction<'a> {
    pub fn new(dim: usize, f: impl Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'a) -> Self {
        Self {
            dim,
            evaluator: Box::new(f),
        }
    }

    /// Builds the gradient by seeding every coordinate of a dual evaluation.
    pub fn from_dual(dim: usize, f: impl Fn(&[DualScalar]) -> DualScalar + Send + Sync + 'a) -> Self {
        Self::new(dim, move |x| {
            let out = f(&DualScalar::seed_all(x));
            (out.value, out.gradient(x.len()))
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.dim {
            return Err(Error::dim(format!(
                "objective expects {} coordinates, got {}",
                self.dim,
                x.len()
            )));
        }
        let (f, g) = (self.evaluator)(x);
        if g.len() != self.dim {
            return Err(Error::dim(format!(
                "gradient has {} entries, expected {}",
                g.len(),
                self.dim
            )));
        }
        if !f.is_finite() {
            return Err(Error::Evaluation(format!("non-finite objective value {f}")));
        }
        Ok((f, g))
    }
}

/// Largest per-coordinate relative error between the supplied gradient and a
/// central finite difference with step `h`. Relative errors are measured
/// against `max(1, |g|)` so vanishing components are compared absolutely.
pub fn grad_check(f: &BoxedFunction<'_>, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, grad) = f.eval(x)?;
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let (fp, _) = f.eval(&probe)?;
        probe[i] = x[i] - h;
        let (fm, _) = f.eval(&probe)?;
        probe[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
