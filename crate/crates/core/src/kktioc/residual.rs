//! Stationarity residuals ∇_U L at demonstration data and their affine
//! structure in (A, λ, υ).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costmodel::{omega, omega_f64, ThetaSource};
use crate::dataset::TrajectorySegment;
use crate::error::{Error, Result};
use crate::focp::{lagrangian_gradient, problem_for_segment};
use crate::numerics::DualScalar;

use super::IocContext;

/// Multipliers of one segment: υ (n) and λ (N × P, zero where inactive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMultipliers {
    pub upsilon: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
}

impl SegmentMultipliers {
    pub fn zeros(n: usize, horizon: usize, p: usize) -> Self {
        Self {
            upsilon: vec![0.0; n],
            lambda: vec![vec![0.0; p]; horizon],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            upsilon: self.upsilon.iter().map(|v| v * factor).collect(),
            lambda: self
                .lambda
                .iter()
                .map(|row| row.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }
}

/// Data-only derivative information of one segment. Everything the residual
/// needs apart from (W, A, λ, υ).
#[derive(Clone, Debug)]
pub struct SegmentSensitivity {
    pub horizon: usize,
    pub times: Vec<f64>,
    /// Per stage i, an (N·m) × q matrix whose column j is ∇_U φ_j(x_i, u_i).
    pub features: Vec<DMatrix<f64>>,
    /// (∂F_N/∂U)ᵀ, (N·m) × n.
    pub terminal: DMatrix<f64>,
    /// Active (stage, constraint) pairs, decided from the data.
    pub active: Vec<(usize, usize)>,
    /// Column k is ∇_U g_p(x_i, u_i) for the k-th active pair.
    pub active_grad: DMatrix<f64>,
}

impl SegmentSensitivity {
    pub fn rows(&self) -> usize {
        self.terminal.nrows()
    }

    /// ∇_U L for a given weight profile and multipliers.
    pub fn residual(
        &self,
        theta: &dyn ThetaSource,
        upsilon: &[f64],
        lambda_active: &[f64],
    ) -> DVector<f64> {
        let mut r = &self.terminal * DVector::from_column_slice(upsilon);
        if !self.active.is_empty() {
            r += &self.active_grad * DVector::from_column_slice(lambda_active);
        }
        for (i, f) in self.features.iter().enumerate() {
            r += f * DVector::from_vec(theta.theta(self.times[i]));
        }
        r
    }
}

/// Propagates ∂x_i/∂U forward along the segment's inputs and collects the
/// feature, terminal and active-constraint gradients.
pub fn sensitivities(ctx: &IocContext, segment: &TrajectorySegment) -> Result<SegmentSensitivity> {
    segment.validate()?;
    if segment.system != ctx.model.kind {
        return Err(Error::Invalid(format!(
            "segment of {:?} passed to a {:?} model",
            segment.system, ctx.model.kind
        )));
    }
    let (n, m) = ctx.model.kind.dims();
    let q = ctx.features.dim();
    let horizon = segment.n;
    let d = horizon * m;
    let seeds = n + m;
    let model = ctx.model.with_ts(segment.ts);

    let mut dx = DMatrix::<f64>::zeros(n, d);
    let mut x = segment.x0().to_vec();
    let mut features = Vec::with_capacity(horizon);
    let mut active = Vec::new();
    let mut active_cols: Vec<DVector<f64>> = Vec::new();

    for i in 0..horizon {
        let u = &segment.inputs[i];
        let xd: Vec<DualScalar> = (0..n).map(|k| DualScalar::variable(x[k], k, seeds)).collect();
        let ud: Vec<DualScalar> = (0..m)
            .map(|k| DualScalar::variable(u[k], n + k, seeds))
            .collect();

        // Gradient of a stage function through x_i(U) and u_i.
        let through = |g: &DualScalar| -> DVector<f64> {
            let gx = DVector::from_fn(n, |k, _| g.deriv(k));
            let mut col = dx.tr_mul(&gx);
            for k in 0..m {
                col[i * m + k] += g.deriv(n + k);
            }
            col
        };

        let phi = ctx.features.eval(&xd, &ud);
        let mut fi = DMatrix::zeros(d, q);
        for (j, f) in phi.iter().enumerate() {
            fi.set_column(j, &through(f));
        }
        features.push(fi);

        for (p, g) in ctx.constraints.eval(&xd, &ud).iter().enumerate() {
            if g.value >= -ctx.eps_active {
                active.push((i, p));
                active_cols.push(through(g));
            }
        }

        let (next, a, b) = model.step_jacobian(&x, u)?;
        let mut next_dx = &a * &dx;
        for k in 0..m {
            let col = b.column(k);
            let mut target = next_dx.column_mut(i * m + k);
            target += col;
        }
        dx = next_dx;
        x = next;
    }

    let active_grad = if active_cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&active_cols)
    };
    Ok(SegmentSensitivity {
        horizon,
        times: (0..horizon).map(|i| segment.time(i)).collect(),
        features,
        terminal: dx.transpose(),
        active,
        active_grad,
    })
}

/// ∇_U L at the segment's inputs, evaluated directly by the forward solver's
/// adjoint machinery (independent of [`SegmentSensitivity`]).
pub fn stationarity_residual(
    ctx: &IocContext,
    segment: &TrajectorySegment,
    theta: &dyn ThetaSource,
    multipliers: &SegmentMultipliers,
) -> Result<Vec<f64>> {
    let (n, _) = ctx.model.kind.dims();
    let p = ctx.constraints.count();
    if multipliers.upsilon.len() != n
        || multipliers.lambda.len() != segment.n
        || multipliers.lambda.iter().any(|row| row.len() != p)
    {
        return Err(Error::dim("multipliers do not match segment and constraint sizes"));
    }
    let model = ctx.model.with_ts(segment.ts);
    let problem = problem_for_segment(segment, &model, &ctx.features, theta, &ctx.constraints);
    let (_, grad) = lagrangian_gradient(&problem, &segment.inputs, &multipliers.lambda, &multipliers.upsilon)?;
    Ok(grad)
}

/// What a coordinate of the stacked unknown vector z stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Coefficient { row: usize, col: usize },
    Lambda { segment: usize, stage: usize, constraint: usize },
    Upsilon { segment: usize, component: usize },
}

/// Stacked residual J·z + r₀ and its normal equations.
#[derive(Clone, Debug)]
pub struct NormalSystem {
    pub jacobian: DMatrix<f64>,
    pub r0: DVector<f64>,
    /// JᵀJ
    pub q: DMatrix<f64>,
    /// Jᵀr₀
    pub c: DVector<f64>,
    pub slots: Vec<Slot>,
}

impl NormalSystem {
    /// Σ_d ‖r_d‖² at z.
    pub fn residual(&self, z: &DVector<f64>) -> f64 {
        (&self.jacobian * z + &self.r0).norm_squared()
    }

    pub fn coefficient_count(&self) -> usize {
        self.slots
            .iter()
            .take_while(|s| matches!(s, Slot::Coefficient { .. }))
            .count()
    }
}

/// Builds the stacked system for frequencies `freqs` with the first column of
/// A fixed to `anchor`. Unknowns: A(:, 1..q) row-major, then every segment's
/// active λ, then every segment's υ.
pub fn build_normal_system(
    sens: &[SegmentSensitivity],
    freqs: &[f64],
    anchor: &[f64],
) -> Result<NormalSystem> {
    let Some(first) = sens.first() else {
        return Err(Error::EmptyDataset("training"));
    };
    let basis = 2 * freqs.len() + 1;
    if anchor.len() != basis {
        return Err(Error::dim(format!(
            "anchor has {} entries, expected {basis}",
            anchor.len()
        )));
    }
    let q = first.features.first().map_or(0, |f| f.ncols());
    let n = first.terminal.ncols();
    let n_coef = basis * (q - 1);
    let n_lambda: usize = sens.iter().map(|s| s.active.len()).sum();
    let total = n_coef + n_lambda + sens.len() * n;
    let rows: usize = sens.iter().map(|s| s.rows()).sum();

    let mut slots = Vec::with_capacity(total);
    for r in 0..basis {
        for col in 1..q {
            slots.push(Slot::Coefficient { row: r, col });
        }
    }
    for (d, s) in sens.iter().enumerate() {
        for &(stage, constraint) in &s.active {
            slots.push(Slot::Lambda {
                segment: d,
                stage,
                constraint,
            });
        }
    }
    for d in 0..sens.len() {
        for component in 0..n {
            slots.push(Slot::Upsilon { segment: d, component });
        }
    }

    let mut jac = DMatrix::zeros(rows, total);
    let mut r0 = DVector::zeros(rows);
    let mut row0 = 0;
    let mut lambda_col = n_coef;
    for (d, s) in sens.iter().enumerate() {
        let len = s.rows();
        for (i, f) in s.features.iter().enumerate() {
            let om = omega_f64(freqs, s.times[i]);
            let anchor_weight: f64 = om.iter().zip(anchor).map(|(a, b)| a * b).sum();
            let mut target = r0.rows_mut(row0, len);
            target.axpy(anchor_weight, &f.column(0), 1.0);
            for (r, w) in om.iter().enumerate() {
                for col in 1..q {
                    let z = r * (q - 1) + col - 1;
                    let mut target = jac.view_mut((row0, z), (len, 1));
                    target.zip_apply(&f.column(col), |a, b| *a += w * b);
                }
            }
        }
        let a = s.active.len();
        if a > 0 {
            jac.view_mut((row0, lambda_col), (len, a))
                .copy_from(&s.active_grad);
            lambda_col += a;
        }
        let ups = n_coef + n_lambda + d * n;
        jac.view_mut((row0, ups), (len, n)).copy_from(&s.terminal);
        row0 += len;
    }

    let q_mat = jac.tr_mul(&jac);
    let c = jac.tr_mul(&r0);
    Ok(NormalSystem {
        jacobian: jac,
        r0,
        q: q_mat,
        c,
        slots,
    })
}

/// Σ_d ‖r_d‖² as a function of W with A and the multipliers fixed, and its
/// gradient in W.
pub fn frequency_objective(
    sens: &[SegmentSensitivity],
    freqs: &[f64],
    coefficients: &DMatrix<f64>,
    multipliers: &[(Vec<f64>, Vec<f64>)],
) -> (f64, Vec<f64>) {
    let e = freqs.len();
    let seeded: Vec<DualScalar> = freqs
        .iter()
        .enumerate()
        .map(|(k, w)| DualScalar::variable(*w, k, e))
        .collect();
    let q = coefficients.ncols();
    let mut value = 0.0;
    let mut grad = vec![0.0; e];
    for (s, (upsilon, lambda)) in sens.iter().zip(multipliers) {
        let mut r = &s.terminal * DVector::from_column_slice(upsilon);
        if !s.active.is_empty() {
            r += &s.active_grad * DVector::from_column_slice(lambda);
        }
        let mut dr = vec![DVector::<f64>::zeros(s.rows()); e];
        for (i, f) in s.features.iter().enumerate() {
            let om = omega(&seeded, s.times[i]);
            for j in 0..q {
                let th = om
                    .iter()
                    .enumerate()
                    .fold(DualScalar::constant(0.0), |acc, (row, b)| {
                        acc + b.clone() * coefficients[(row, j)]
                    });
                let col = f.column(j);
                r.axpy(th.value, &col, 1.0);
                for (k, drk) in dr.iter_mut().enumerate() {
                    let dk = th.deriv(k);
                    if dk != 0.0 {
                        drk.axpy(dk, &col, 1.0);
                    }
                }
            }
        }
        value += r.norm_squared();
        for (k, drk) in dr.iter().enumerate() {
            grad[k] += 2.0 * r.dot(drk);
        }
    }
    (value, grad)
}
