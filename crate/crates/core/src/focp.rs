//! Forward shortest-path optimal control.
//!
//! States are eliminated through the rollout operator, leaving the inputs U as
//! the only decision variables. The terminal equality and any stage
//! inequalities are handled by an augmented Lagrangian (shifted penalties for
//! the inequalities); each subproblem is minimized with L-BFGS using adjoint
//! gradients assembled from per-step forward-mode Jacobians.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{FeatureVector, ThetaSource};
use crate::dataset::TrajectorySegment;
use crate::dynamics::{flatten, unflatten, SystemModel};
use crate::error::{Error, Result};
use crate::numerics::{
    lbfgs_minimize_with, BoxedFunction, DualScalar, LbfgsOptions, Scalar, StageFunction,
};

const START_POLISH: usize = 3;

/// Stage inequality constraints g(x, u) ≤ 0.
#[derive(Clone, Default)]
pub struct ConstraintSet {
    functions: Vec<Arc<dyn StageFunction>>,
}

impl std::fmt::Debug for ConstraintSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ConstraintSet(P = {})", self.count())
    }
}

/// |u_j| ≤ bound for every input, as 2m constraints (upper, lower) per input.
#[derive(Clone, Copy, Debug)]
pub struct InputBox {
    pub m: usize,
    pub bound: f64,
}

impl InputBox {
    fn eval<S: Scalar>(&self, u: &[S]) -> Vec<S> {
        u.iter()
            .flat_map(|v| [v.clone() - self.bound, -v.clone() - self.bound])
            .collect()
    }
}

impl StageFunction for InputBox {
    fn output_dim(&self) -> usize {
        2 * self.m
    }
    fn eval_f64(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        self.eval(u)
    }
    fn eval_dual(&self, _x: &[DualScalar], u: &[DualScalar]) -> Vec<DualScalar> {
        self.eval(u)
    }
}

impl ConstraintSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn input_box(m: usize, bound: f64) -> Self {
        Self::none().with(InputBox { m, bound })
    }

    pub fn with(mut self, f: impl StageFunction + 'static) -> Self {
        self.functions.push(Arc::new(f));
        self
    }

    /// Total number of scalar constraints per stage (P).
    pub fn count(&self) -> usize {
        self.functions.iter().map(|f| f.output_dim()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn eval<S: Scalar>(&self, x: &[S], u: &[S]) -> Vec<S> {
        self.functions
            .iter()
            .flat_map(|f| S::eval_stage(f.as_ref(), x, u))
            .collect()
    }
}

/// One instance of the forward problem.
#[derive(Clone)]
pub struct FocpProblem<'a> {
    pub model: SystemModel,
    pub features: FeatureVector,
    pub theta: &'a dyn ThetaSource,
    pub constraints: ConstraintSet,
    pub x0: Vec<f64>,
    pub xn: Vec<f64>,
    pub t0: f64,
    pub horizon: usize,
}

impl FocpProblem<'_> {
    fn validate(&self) -> Result<()> {
        let (n, _) = self.model.kind.dims();
        if self.horizon == 0 {
            return Err(Error::Invalid("horizon must be at least 1".into()));
        }
        if self.x0.len() != n || self.xn.len() != n {
            return Err(Error::dim(format!("boundary states must have {n} entries")));
        }
        if self.theta.dim() != self.features.dim() {
            return Err(Error::dim(format!(
                "theta has {} entries but there are {} features",
                self.theta.dim(),
                self.features.dim()
            )));
        }
        Ok(())
    }

    pub fn stage_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.model.ts
    }

    fn stage_weights(&self) -> Vec<Vec<f64>> {
        (0..self.horizon)
            .map(|i| self.theta.theta(self.stage_time(i)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocpOptions {
    pub tol_term: f64,
    pub tol_grad: f64,
    pub tol_stat: f64,
    pub polish_threshold: f64,
    pub max_polish: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    pub eps_active: f64,
}

impl Default for FocpOptions {
    fn default() -> Self {
        Self {
            tol_term: 1e-9,
            tol_grad: crate::numerics::DEFAULT_TOL_GRAD,
            tol_stat: 1e-8,
            polish_threshold: 1e-2,
            max_polish: 20,
            max_outer: 50,
            max_inner: crate::numerics::DEFAULT_MAX_ITER,
            rho_init: 10.0,
            rho_growth: 5.0,
            rho_max: 1e8,
            eps_active: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FocpSolution {
    pub inputs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub cost: f64,
    pub terminal_residual: f64,
    /// N×P, true where g_p ≥ −ε_act.
    pub active: Vec<Vec<bool>>,
    /// N×P, nonnegative and zero on inactive constraints.
    pub lambda: Vec<Vec<f64>>,
    pub upsilon: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// ‖∇_U L‖∞ at the returned point and multipliers.
    pub stationarity: f64,
    /// Largest stage constraint value (positive when violated).
    pub inequality_violation: f64,
}

/// Multipliers and penalty weight defining one augmented-Lagrangian
/// subproblem. `rho = 0` gives the plain Lagrangian.
#[derive(Clone, Debug)]
struct Weights {
    upsilon: Vec<f64>,
    lambda: Vec<Vec<f64>>,
    rho: f64,
}

struct Evaluation {
    value: f64,
    grad: Vec<f64>,
    states: Vec<Vec<f64>>,
    constraints: Vec<Vec<f64>>,
}

/// Value and adjoint gradient of the (augmented) Lagrangian in U.
struct Evaluator<'p, 'a> {
    problem: &'p FocpProblem<'a>,
    weights_by_stage: Vec<Vec<f64>>,
}

impl<'p, 'a> Evaluator<'p, 'a> {
    fn new(problem: &'p FocpProblem<'a>) -> Self {
        Self {
            weights_by_stage: problem.stage_weights(),
            problem,
        }
    }

    fn eval(&self, u_flat: &[f64], w: &Weights) -> Result<Evaluation> {
        let pb = self.problem;
        let (n, m) = pb.model.kind.dims();
        let horizon = pb.horizon;
        let seeds = n + m;

        let mut states = Vec::with_capacity(horizon + 1);
        states.push(pb.x0.clone());
        let mut jac_x = Vec::with_capacity(horizon);
        let mut jac_u = Vec::with_capacity(horizon);
        let mut value = 0.0;
        let mut stage_grads = Vec::with_capacity(horizon);
        let mut constraints = Vec::with_capacity(horizon);

        for i in 0..horizon {
            let x = &states[i];
            let u = &u_flat[i * m..(i + 1) * m];
            let (next, a, b) = pb.model.step_jacobian(x, u)?;

            let xd: Vec<DualScalar> = (0..n).map(|k| DualScalar::variable(x[k], k, seeds)).collect();
            let ud: Vec<DualScalar> = (0..m)
                .map(|k| DualScalar::variable(u[k], n + k, seeds))
                .collect();
            let phi = pb.features.eval(&xd, &ud);
            let mut stage = phi
                .into_iter()
                .zip(&self.weights_by_stage[i])
                .fold(DualScalar::constant(0.0), |acc, (f, wt)| acc + f * *wt);
            let g = pb.constraints.eval(&xd, &ud);
            let mut gvals = Vec::with_capacity(g.len());
            for (p, gp) in g.into_iter().enumerate() {
                gvals.push(gp.value);
                let lam = w.lambda[i][p];
                if w.rho > 0.0 {
                    let shifted = lam + w.rho * gp.value;
                    if shifted > 0.0 {
                        let val = (shifted * shifted - lam * lam) / (2.0 * w.rho);
                        let mut term = gp * shifted;
                        term.value = val;
                        stage = stage + term;
                    } else {
                        stage = stage + DualScalar::constant(-lam * lam / (2.0 * w.rho));
                    }
                } else if lam != 0.0 {
                    stage = stage + gp * lam;
                }
            }
            value += stage.value;
            stage_grads.push(stage.gradient(seeds));
            constraints.push(gvals);
            jac_x.push(a);
            jac_u.push(b);
            states.push(next);
        }

        let residual: Vec<f64> = states[horizon]
            .iter()
            .zip(&pb.xn)
            .map(|(a, b)| a - b)
            .collect();
        let mut costate = DVector::from_fn(n, |k, _| w.upsilon[k] + w.rho * residual[k]);
        value += residual
            .iter()
            .zip(&w.upsilon)
            .map(|(c, v)| v * c + 0.5 * w.rho * c * c)
            .sum::<f64>();

        let mut grad = vec![0.0; horizon * m];
        for i in (0..horizon).rev() {
            let gu = jac_u[i].tr_mul(&costate);
            let sg = &stage_grads[i];
            for k in 0..m {
                grad[i * m + k] = sg[n + k] + gu[k];
            }
            let gx = jac_x[i].tr_mul(&costate);
            costate = DVector::from_fn(n, |k, _| sg[k] + gx[k]);
        }

        if !value.is_finite() {
            return Err(Error::Evaluation("non-finite Lagrangian".into()));
        }
        Ok(Evaluation {
            value,
            grad,
            states,
            constraints,
        })
    }

    /// ∂F_N/∂U as an (N·m)×n matrix.
    fn terminal_sensitivity(&self, u_flat: &[f64]) -> Result<DMatrix<f64>> {
        let pb = self.problem;
        let (n, m) = pb.model.kind.dims();
        let inputs = unflatten(u_flat, m);
        let mut x = pb.x0.clone();
        let mut jacs = Vec::with_capacity(pb.horizon);
        for u in &inputs {
            let (next, a, b) = pb.model.step_jacobian(&x, u)?;
            jacs.push((a, b));
            x = next;
        }
        let mut out = DMatrix::zeros(pb.horizon * m, n);
        let mut adj = DMatrix::<f64>::identity(n, n);
        for i in (0..pb.horizon).rev() {
            let (a, b) = &jacs[i];
            let block = b.tr_mul(&adj);
            out.view_mut((i * m, 0), (m, n)).copy_from(&block);
            adj = a.tr_mul(&adj);
        }
        Ok(out)
    }
}

/// Lagrangian value and gradient ∇_U L at `inputs` for given multipliers.
pub fn lagrangian_gradient(
    problem: &FocpProblem<'_>,
    inputs: &[Vec<f64>],
    lambda: &[Vec<f64>],
    upsilon: &[f64],
) -> Result<(f64, Vec<f64>)> {
    problem.validate()?;
    let ev = Evaluator::new(problem);
    let weights = Weights {
        upsilon: upsilon.to_vec(),
        lambda: lambda.to_vec(),
        rho: 0.0,
    };
    let e = ev.eval(&flatten(inputs), &weights)?;
    Ok((e.value, e.grad))
}

/// Σ Θ(t_i)·φ(F_i(U, x0), u_i).
pub fn trajectory_cost(problem: &FocpProblem<'_>, inputs: &[Vec<f64>]) -> Result<f64> {
    let p = problem.constraints.count();
    let zero_lambda = vec![vec![0.0; p]; problem.horizon];
    let (n, _) = problem.model.kind.dims();
    let ev = Evaluator::new(problem);
    let e = ev.eval(
        &flatten(inputs),
        &Weights {
            upsilon: vec![0.0; n],
            lambda: zero_lambda,
            rho: 0.0,
        },
    )?;
    Ok(e.value)
}

/// Solves the forward problem from a zero initial guess.
pub fn solve_forward(problem: &FocpProblem<'_>, opts: &FocpOptions) -> Result<FocpSolution> {
    solve_forward_from(problem, None, opts)
}

/// Solves the forward problem, optionally warm-started from `initial`.
pub fn solve_forward_from(
    problem: &FocpProblem<'_>,
    initial: Option<&[Vec<f64>]>,
    opts: &FocpOptions,
) -> Result<FocpSolution> {
    problem.validate()?;
    let (n, m) = problem.model.kind.dims();
    let horizon = problem.horizon;
    let p = problem.constraints.count();
    let ev = Evaluator::new(problem);

    let mut u = match initial {
        Some(init) => {
            if init.len() != horizon || init.iter().any(|v| v.len() != m) {
                return Err(Error::dim("warm start does not match horizon and input size"));
            }
            flatten(init)
        }
        None => vec![0.0; horizon * m],
    };

    let mut weights = Weights {
        upsilon: vec![0.0; n],
        lambda: vec![vec![0.0; p]; horizon],
        rho: opts.rho_init,
    };
    weights.upsilon = initial_upsilon(&ev, &u, &weights)?;

    // A Newton-KKT attempt from the start; exact in one step for
    // linear-quadratic problems.
    let start = assemble(&ev, &u, weights.lambda.clone(), weights.upsilon.clone(), opts)?;
    if let Some(mut sol) = polish(&ev, &start, opts, START_POLISH)? {
        if sol.satisfies(opts) {
            sol.converged = true;
            return Ok(sol);
        }
    }

    let mut best: Option<FocpSolution> = None;
    let mut prev_violation = f64::INFINITY;
    let mut inner_total = 0;

    for outer in 0..opts.max_outer {
        let inner = {
            let objective = BoxedFunction::new(horizon * m, |z| match ev.eval(z, &weights) {
                Ok(e) => (e.value, e.grad),
                Err(_) => (f64::NAN, vec![0.0; z.len()]),
            });
            let inner_opts = LbfgsOptions {
                tol_grad: opts.tol_grad,
                max_iter: opts.max_inner,
                ..LbfgsOptions::default()
            };
            lbfgs_minimize_with(&objective, &u, inner_opts)
        };
        let (u_next, iters) = match inner {
            Ok(min) => (min.x, min.iterations),
            Err(Error::Stagnation { x, iterations, .. }) => (x, iterations),
            Err(e) => return Err(e),
        };
        inner_total += iters;
        u = u_next;

        // First-order multiplier update.
        let e = ev.eval(&u, &weights)?;
        let residual = terminal_defect(problem, &e.states);
        let mut lambda = weights.lambda.clone();
        for (i, row) in lambda.iter_mut().enumerate() {
            for (k, lam) in row.iter_mut().enumerate() {
                *lam = (*lam + weights.rho * e.constraints[i][k]).max(0.0);
            }
        }
        let upsilon: Vec<f64> = weights
            .upsilon
            .iter()
            .zip(&residual)
            .map(|(v, c)| v + weights.rho * c)
            .collect();

        let mut candidate = assemble(&ev, &u, lambda.clone(), upsilon.clone(), opts)?;
        candidate.outer_iterations = outer + 1;
        candidate.inner_iterations = inner_total;
        let violation = candidate.violation();
        log::trace!(
            "outer {outer}: rho={:.1e} viol={violation:.3e} stat={:.3e} inner={iters}",
            weights.rho,
            candidate.stationarity
        );

        if violation <= opts.polish_threshold {
            if let Some(polished) = polish(&ev, &candidate, opts, opts.max_polish)? {
                if polished.satisfies(opts) {
                    let mut sol = polished;
                    sol.converged = true;
                    sol.outer_iterations = outer + 1;
                    sol.inner_iterations = inner_total;
                    return Ok(sol);
                }
            }
        }
        if candidate.satisfies(opts) {
            candidate.converged = true;
            return Ok(candidate);
        }
        if best.as_ref().is_none_or(|b| candidate.merit() < b.merit()) {
            best = Some(candidate);
        }

        weights.upsilon = upsilon;
        weights.lambda = lambda;
        if violation > opts.tol_term && violation > 0.25 * prev_violation {
            weights.rho = (weights.rho * opts.rho_growth).min(opts.rho_max);
        }
        prev_violation = violation;
    }

    let best = best.expect("at least one outer iteration");
    Err(Error::Infeasible {
        residual: best.violation(),
        best: Box::new(best),
    })
}

fn terminal_defect(problem: &FocpProblem<'_>, states: &[Vec<f64>]) -> Vec<f64> {
    states[problem.horizon]
        .iter()
        .zip(&problem.xn)
        .map(|(a, b)| a - b)
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Least-squares multiplier estimate υ minimizing ‖∇J(U) + Gυ‖.
fn initial_upsilon(ev: &Evaluator<'_, '_>, u: &[f64], w: &Weights) -> Result<Vec<f64>> {
    let n = ev.problem.x0.len();
    let plain = Weights {
        upsilon: vec![0.0; n],
        lambda: w.lambda.clone(),
        rho: 0.0,
    };
    let e = ev.eval(u, &plain)?;
    let g = ev.terminal_sensitivity(u)?;
    let rhs = -(g.tr_mul(&DVector::from_vec(e.grad)));
    solve_dense(g.tr_mul(&g), rhs).map(|v| v.iter().copied().collect())
}

fn solve_dense(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(x) = a.clone().lu().solve(&b) {
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    a.svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Evaluation(e.to_string()))
}

/// Evaluates the KKT quantities of (U, λ, υ) and packs them into a solution.
fn assemble(
    ev: &Evaluator<'_, '_>,
    u: &[f64],
    mut lambda: Vec<Vec<f64>>,
    upsilon: Vec<f64>,
    opts: &FocpOptions,
) -> Result<FocpSolution> {
    let problem = ev.problem;
    let (n, m) = problem.model.kind.dims();
    let p = problem.constraints.count();
    let e = ev.eval(
        u,
        &Weights {
            upsilon: upsilon.clone(),
            lambda: lambda.clone(),
            rho: 0.0,
        },
    )?;
    let active: Vec<Vec<bool>> = e
        .constraints
        .iter()
        .map(|row| row.iter().map(|g| *g >= -opts.eps_active).collect())
        .collect();
    for (lrow, arow) in lambda.iter_mut().zip(&active) {
        for (l, a) in lrow.iter_mut().zip(arow) {
            if !a {
                *l = 0.0;
            }
        }
    }
    let cost = ev
        .eval(
            u,
            &Weights {
                upsilon: vec![0.0; n],
                lambda: vec![vec![0.0; p]; problem.horizon],
                rho: 0.0,
            },
        )?
        .value;
    let defect = terminal_defect(problem, &e.states);
    let max_g = e.constraints.iter().flatten().fold(0.0f64, |a, g| a.max(*g));
    Ok(FocpSolution {
        inputs: unflatten(u, m),
        states: e.states,
        cost,
        terminal_residual: defect.iter().map(|v| v * v).sum::<f64>().sqrt(),
        inequality_violation: max_g,
        active,
        lambda,
        upsilon,
        converged: false,
        outer_iterations: 0,
        inner_iterations: 0,
        stationarity: inf_norm(&e.grad),
    })
}

impl FocpSolution {
    /// Largest primal infeasibility.
    pub fn violation(&self) -> f64 {
        self.terminal_residual.max(self.inequality_violation)
    }

    fn merit(&self) -> f64 {
        self.violation().max(self.stationarity)
    }

    fn satisfies(&self, opts: &FocpOptions) -> bool {
        self.violation() <= opts.tol_term && self.stationarity <= opts.tol_stat
    }
}

/// Newton iterations on the KKT system with the active set fixed, starting
/// from an augmented-Lagrangian iterate. Returns the best point found if it
/// improves on `start`.
fn polish(
    ev: &Evaluator<'_, '_>,
    start: &FocpSolution,
    opts: &FocpOptions,
    max_iter: usize,
) -> Result<Option<FocpSolution>> {
    let problem = ev.problem;
    let (n, m) = problem.model.kind.dims();
    let horizon = problem.horizon;
    let p = problem.constraints.count();
    let d = horizon * m;
    let mut current = start.clone();
    let mut improved = false;
    let mut active: Vec<(usize, usize)> = (0..horizon)
        .flat_map(|i| (0..p).map(move |k| (i, k)))
        .filter(|&(i, k)| start.lambda[i][k] > 0.0)
        .collect();

    let zero = Weights {
        upsilon: vec![0.0; n],
        lambda: vec![vec![0.0; p]; horizon],
        rho: 0.0,
    };

    for _ in 0..max_iter {
        if current.satisfies(opts) && improved {
            break;
        }
        let u = flatten(&current.inputs);
        let base = ev.eval(&u, &zero)?;
        let g_term = ev.terminal_sensitivity(&u)?;
        let mut g_act = DMatrix::zeros(d, active.len());
        for (col, &(i, k)) in active.iter().enumerate() {
            let mut w = zero.clone();
            w.lambda[i][k] = 1.0;
            let e = ev.eval(&u, &w)?;
            for r in 0..d {
                g_act[(r, col)] = e.grad[r] - base.grad[r];
            }
        }

        // Hessian of the Lagrangian by central differences of the exact gradient.
        let lag = Weights {
            upsilon: current.upsilon.clone(),
            lambda: current.lambda.clone(),
            rho: 0.0,
        };
        let mut hess = DMatrix::zeros(d, d);
        let mut probe = u.clone();
        for j in 0..d {
            let h = 1e-5 * u[j].abs().max(1.0);
            probe[j] = u[j] + h;
            let gp = ev.eval(&probe, &lag)?.grad;
            probe[j] = u[j] - h;
            let gm = ev.eval(&probe, &lag)?.grad;
            probe[j] = u[j];
            for r in 0..d {
                hess[(r, j)] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        hess = (&hess + hess.transpose()) * 0.5;

        let a = active.len();
        let size = d + n + a;
        let mut kkt = DMatrix::zeros(size, size);
        kkt.view_mut((0, 0), (d, d)).copy_from(&hess);
        kkt.view_mut((0, d), (d, n)).copy_from(&g_term);
        kkt.view_mut((d, 0), (n, d)).copy_from(&g_term.transpose());
        kkt.view_mut((0, d + n), (d, a)).copy_from(&g_act);
        kkt.view_mut((d + n, 0), (a, d)).copy_from(&g_act.transpose());
        let defect = terminal_defect(problem, &base.states);
        let mut rhs = DVector::zeros(size);
        for r in 0..d {
            rhs[r] = -base.grad[r];
        }
        for k in 0..n {
            rhs[d + k] = -defect[k];
        }
        for (col, &(i, k)) in active.iter().enumerate() {
            rhs[d + n + col] = -base.constraints[i][k];
        }
        let sol = solve_dense(kkt, rhs)?;
        let upsilon: Vec<f64> = (0..n).map(|k| sol[d + k]).collect();
        let mut lambda = vec![vec![0.0; p]; horizon];
        for (col, &(i, k)) in active.iter().enumerate() {
            lambda[i][k] = sol[d + n + col];
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let trial: Vec<f64> = u.iter().enumerate().map(|(j, v)| v + step * sol[j]).collect();
            let ups: Vec<f64> = current
                .upsilon
                .iter()
                .zip(&upsilon)
                .map(|(a, b)| a + step * (b - a))
                .collect();
            let lam: Vec<Vec<f64>> = current
                .lambda
                .iter()
                .zip(&lambda)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(a, b)| a + step * (b - a)).collect())
                .collect();
            if let Ok(cand) = assemble(ev, &trial, lam, ups, opts) {
                if cand.merit() < current.merit() {
                    accepted = Some(cand);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(next) = accepted else { break };

        // Active-set corrections: drop negative multipliers, add violated constraints.
        let before = active.len();
        active.retain(|&(i, k)| lambda[i][k] >= 0.0);
        let mut changed = active.len() != before;
        let u_next = flatten(&next.inputs);
        let g_next = ev.eval(&u_next, &zero)?.constraints;
        for i in 0..horizon {
            for k in 0..p {
                if g_next[i][k] > opts.tol_term && !active.contains(&(i, k)) {
                    active.push((i, k));
                    changed = true;
                }
            }
        }
        current = if changed {
            let clamped = next
                .lambda
                .iter()
                .map(|row| row.iter().map(|l| l.max(0.0)).collect())
                .collect();
            assemble(ev, &u_next, clamped, next.upsilon.clone(), opts)?
        } else {
            next
        };
        improved = true;
    }
    Ok(improved.then_some(current))
}

/// Initial condition of one long-horizon demonstration, with the absolute
/// step index at which it starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    pub state: Vec<f64>,
    pub start_step: usize,
}

/// Settings for slicing demonstrations out of long-horizon solves.
#[derive(Clone, Debug)]
pub struct DemoSpec<'a> {
    pub model: SystemModel,
    pub features: FeatureVector,
    pub truth: &'a dyn ThetaSource,
    pub profile_tag: String,
    pub constraints: ConstraintSet,
    pub n_gen: usize,
    pub horizon: usize,
    pub stride: usize,
    pub seed: u64,
}

impl std::fmt::Debug for dyn ThetaSource + '_ {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ThetaSource(q = {})", self.dim())
    }
}

/// Segment offsets {0, stride, 2·stride, …} that fit in `n_gen`.
pub fn segment_offsets(n_gen: usize, horizon: usize, stride: usize) -> Vec<usize> {
    if stride == 0 {
        return vec![0];
    }
    (0..)
        .map(|k| k * stride)
        .take_while(|off| off + horizon <= n_gen)
        .collect()
}

/// Solves one long-horizon problem per initial condition (terminal state at
/// the origin) and slices it into segments of length `horizon`. Results are
/// ordered by initial condition, then offset.
pub fn generate_demonstrations(
    spec: &DemoSpec<'_>,
    initial: &[InitialCondition],
    opts: &FocpOptions,
) -> Result<Vec<Vec<TrajectorySegment>>> {
    if spec.n_gen < spec.horizon + spec.stride {
        return Err(Error::Invalid(format!(
            "N_gen = {} must be at least N + stride = {}",
            spec.n_gen,
            spec.horizon + spec.stride
        )));
    }
    let n = spec.model.state_dim();
    initial
        .par_iter()
        .map(|ic| {
            let problem = FocpProblem {
                model: spec.model.clone(),
                features: spec.features.clone(),
                theta: spec.truth,
                constraints: spec.constraints.clone(),
                x0: ic.state.clone(),
                xn: vec![0.0; n],
                t0: ic.start_step as f64 * spec.model.ts,
                horizon: spec.n_gen,
            };
            let sol = solve_forward(&problem, opts)?;
            Ok(segment_offsets(spec.n_gen, spec.horizon, spec.stride)
                .into_iter()
                .map(|off| TrajectorySegment {
                    system: spec.model.kind,
                    ts: spec.model.ts,
                    n: spec.horizon,
                    t_start: (ic.start_step + off) as f64 * spec.model.ts,
                    states: sol.states[off..=off + spec.horizon].to_vec(),
                    inputs: sol.inputs[off..off + spec.horizon].to_vec(),
                    profile: spec.profile_tag.clone(),
                    seed: spec.seed,
                })
                .collect())
        })
        .collect()
}

/// Forward problem whose solution should reproduce `segment`.
pub fn problem_for_segment<'a>(
    segment: &TrajectorySegment,
    model: &SystemModel,
    features: &FeatureVector,
    theta: &'a dyn ThetaSource,
    constraints: &ConstraintSet,
) -> FocpProblem<'a> {
    FocpProblem {
        model: model.clone(),
        features: features.clone(),
        theta,
        constraints: constraints.clone(),
        x0: segment.x0().to_vec(),
        xn: segment.x_terminal().to_vec(),
        t0: segment.t_start,
        horizon: segment.n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{TrigTimeModel, TruthProfile, TruthTheta};
    use crate::dynamics::SystemKind;
    use crate::numerics::grad_check;

    fn spring3_problem(theta: &dyn ThetaSource, x0: Vec<f64>, horizon: usize) -> FocpProblem<'_> {
        FocpProblem {
            model: SystemModel::with_defaults(SystemKind::Spring3, 0.1).unwrap(),
            features: FeatureVector::squares(6, 3),
            theta,
            constraints: ConstraintSet::none(),
            x0,
            xn: vec![0.0; 6],
            t0: 0.0,
            horizon,
        }
    }

    #[test]
    fn origin_is_optimal_at_rest() {
        let truth = TruthTheta::new(SystemKind::Spring3, TruthProfile::ThetaM1);
        let pb = spring3_problem(&truth, vec![0.0; 6], 15);
        let sol = solve_forward(&pb, &FocpOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.inputs.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(sol.cost, 0.0);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let truth = TruthTheta::new(SystemKind::Pendulum2, TruthProfile::ThetaM3);
        let pb = FocpProblem {
            model: SystemModel::with_defaults(SystemKind::Pendulum2, 0.1).unwrap(),
            features: FeatureVector::squares(4, 2),
            theta: &truth,
            constraints: ConstraintSet::input_box(2, 0.4),
            x0: vec![0.2, -0.1, -0.15, 0.05],
            xn: vec![0.0; 4],
            t0: 0.3,
            horizon: 6,
        };
        let lambda: Vec<Vec<f64>> = (0..6).map(|i| vec![0.1 * i as f64, 0.0, 0.3, 0.05]).collect();
        let upsilon = vec![0.4, -1.0, 0.2, 0.7];
        let f = BoxedFunction::new(12, |z| {
            lagrangian_gradient(&pb, &unflatten(z, 2), &lambda, &upsilon).unwrap()
        });
        let z: Vec<f64> = (0..12).map(|k| 0.05 * (k as f64 - 6.0)).collect();
        assert!(grad_check(&f, &z, 1e-6).unwrap() <= 1e-6);
    }

    #[test]
    fn converged_solution_is_stationary() {
        let truth = TruthTheta::new(SystemKind::Spring3, TruthProfile::ThetaM1);
        let pb = spring3_problem(&truth, vec![0.5, 0.0, -0.3, 0.2, 0.1, -0.4], 30);
        let sol = solve_forward(&pb, &FocpOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.terminal_residual <= 1e-8);
        let (_, g) = lagrangian_gradient(&pb, &sol.inputs, &sol.lambda, &sol.upsilon).unwrap();
        let gn = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(gn <= 1e-8, "stationarity {gn}");
    }

    #[test]
    fn input_box_multipliers_are_complementary() {
        let theta = TrigTimeModel::constant(&[1.0, 1.0, 0.1]);
        let model = SystemModel::with_defaults(SystemKind::Spring1, 0.1).unwrap();
        let pb = FocpProblem {
            model,
            features: FeatureVector::squares(2, 1),
            theta: &theta,
            constraints: ConstraintSet::input_box(1, 0.6),
            x0: vec![1.0, 0.0],
            xn: vec![0.0, 0.0],
            t0: 0.0,
            horizon: 25,
        };
        let sol = solve_forward(&pb, &FocpOptions::default()).unwrap();
        assert!(sol.converged);
        let mut any_active = false;
        for i in 0..pb.horizon {
            let u = sol.inputs[i][0];
            let g = [u - 0.6, -u - 0.6];
            for k in 0..2 {
                assert!(sol.lambda[i][k] >= 0.0);
                assert!((sol.lambda[i][k] * g[k]).abs() <= 1e-8);
                any_active |= sol.lambda[i][k] > 1e-6;
            }
        }
        assert!(any_active, "bound should bind for this instance");
        let (_, g) = lagrangian_gradient(&pb, &sol.inputs, &sol.lambda, &sol.upsilon).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn unreachable_terminal_state_is_infeasible() {
        let theta = TrigTimeModel::constant(&[1.0, 1.0, 1.0]);
        let pb = FocpProblem {
            model: SystemModel::with_defaults(SystemKind::Spring1, 0.1).unwrap(),
            features: FeatureVector::squares(2, 1),
            theta: &theta,
            constraints: ConstraintSet::input_box(1, 0.01),
            x0: vec![0.0, 0.0],
            xn: vec![1.0, 0.0],
            t0: 0.0,
            horizon: 2,
        };
        let opts = FocpOptions {
            max_inner: 500,
            ..FocpOptions::default()
        };
        match solve_forward(&pb, &opts) {
            Err(Error::Infeasible { residual, best }) => {
                assert!(residual > 0.5);
                assert_eq!(best.inputs.len(), 2);
            }
            other => panic!("expected infeasible, got {:?}", other.map(|s| s.terminal_residual)),
        }
    }

    #[test]
    fn offsets() {
        assert_eq!(segment_offsets(80, 60, 20), vec![0, 20]);
        assert_eq!(segment_offsets(100, 60, 10), vec![0, 10, 20, 30, 40]);
    }
}
