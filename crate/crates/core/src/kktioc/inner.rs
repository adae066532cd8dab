//! Convex estimation of (A, λ, υ) for fixed frequencies, and the local
//! search over the frequencies.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};

use crate::costmodel::{omega_f64, TrigTimeModel};
use crate::error::{Error, Result};
use crate::numerics::{
    fista_solve_from, lbfgs_minimize_with, BoxedFunction, CompositeQp, Hinge, LbfgsOptions,
};

use super::residual::{build_normal_system, frequency_objective, SegmentMultipliers, Slot};
use super::{TrainingData, TtdConfig};

const PENALTY_SCALE: f64 = 1e3;

/// Minimizer of the regularized residual for one frequency set.
#[derive(Clone, Debug)]
pub struct InnerSolution {
    pub model: TrigTimeModel,
    pub multipliers: Vec<SegmentMultipliers>,
    /// Active-constraint multipliers per segment, in sensitivity order.
    pub active_lambda: Vec<Vec<f64>>,
    /// Σ_d ‖∇_U L_d‖².
    pub residual: f64,
    /// residual + β·|A(2:, 2:)|, plus the Θ ≥ 0 penalty when enabled.
    pub objective: f64,
    pub converged: bool,
    pub(crate) z: DVector<f64>,
    penalized: Vec<(usize, usize, usize)>,
    penalty_weight: f64,
}

impl InnerSolution {
    /// Number of penalized coefficients that are not exactly zero.
    pub fn nonzero_penalized(&self) -> usize {
        let a = &self.model.coefficients;
        (1..a.nrows())
            .flat_map(|r| (1..a.ncols()).map(move |c| (r, c)))
            .filter(|&(r, c)| a[(r, c)] != 0.0)
            .count()
    }
}

/// Solves min Σ_d ‖r_d‖² + β|A(2:2E+1, 2:q)| over A (first column anchored),
/// λ ≥ 0 on active constraints and free υ.
pub fn solve_inner(
    data: &TrainingData,
    freqs: &[f64],
    beta: f64,
    cfg: &TtdConfig,
) -> Result<InnerSolution> {
    solve_inner_from(data, freqs, beta, cfg, None)
}

pub(crate) fn solve_inner_from(
    data: &TrainingData,
    freqs: &[f64],
    beta: f64,
    cfg: &TtdConfig,
    warm: Option<&DVector<f64>>,
) -> Result<InnerSolution> {
    if freqs.len() != cfg.basis_count {
        return Err(Error::dim(format!(
            "{} frequencies for E = {}",
            freqs.len(),
            cfg.basis_count
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::Invalid("beta must be nonnegative".into()));
    }
    let anchor = cfg.anchor_column();
    let sys = build_normal_system(&data.segments, freqs, &anchor)?;
    let dim = sys.slots.len();
    let q = data.q();
    let basis = anchor.len();

    let mut qp = CompositeQp::plain(&sys.q * 2.0, &sys.c * 2.0);
    for (k, slot) in sys.slots.iter().enumerate() {
        match *slot {
            Slot::Coefficient { row, .. } => {
                if row > 0 {
                    qp.l1[k] = beta;
                } else if cfg.nonneg_theta && basis == 1 {
                    qp.nonneg[k] = true;
                }
            }
            Slot::Lambda { .. } => qp.nonneg[k] = true,
            Slot::Upsilon { .. } => {}
        }
    }

    // Θ(t) ≥ 0 at the training instants of the free columns, as a
    // squared-hinge penalty.
    let mut points = Vec::new();
    let mut weight = 0.0;
    if cfg.nonneg_theta && basis > 1 {
        weight = PENALTY_SCALE * qp.q.diagonal().max().max(1.0);
        let mut rows = Vec::new();
        for (d, s) in data.segments.iter().enumerate() {
            for (i, t) in s.times.iter().enumerate() {
                let om = omega_f64(freqs, *t);
                for col in 1..q {
                    let mut row = vec![0.0; dim];
                    for (r, v) in om.iter().enumerate() {
                        row[r * (q - 1) + col - 1] = *v;
                    }
                    rows.push(row);
                    points.push((d, i, col));
                }
            }
        }
        qp.hinge = Some(Hinge {
            rows: DMatrix::from_fn(rows.len(), dim, |k, j| rows[k][j]),
            weight,
        });
    }

    let warm = warm.filter(|z| z.len() == dim);
    let outcome = fista_solve_from(&qp, warm, cfg.fista_tol, cfg.fista_max_iter)?;
    let hinge = qp.hinge.as_ref().map_or(0.0, |h| {
        let gz = &h.rows * &outcome.z;
        h.weight * gz.iter().map(|v| v.min(0.0).powi(2)).sum::<f64>()
    });
    let penalized: Vec<(usize, usize, usize)> = match &qp.hinge {
        Some(h) => {
            let gz = &h.rows * &outcome.z;
            points
                .iter()
                .zip(gz.iter())
                .filter(|(_, v)| **v < 0.0)
                .map(|(p, _)| *p)
                .collect()
        }
        None => Vec::new(),
    };

    let z = outcome.z;
    let residual = sys.residual(&z);
    let penalty: f64 = sys
        .slots
        .iter()
        .zip(z.iter())
        .filter(|(s, _)| matches!(s, Slot::Coefficient { row, .. } if row > &0))
        .map(|(_, v)| v.abs())
        .sum();

    let a = coefficients(&z, &anchor, q);

    let n = data.context.model.state_dim();
    let p = data.constraint_count();
    let mut multipliers: Vec<SegmentMultipliers> = data
        .segments
        .iter()
        .map(|s| SegmentMultipliers::zeros(n, s.horizon, p))
        .collect();
    let mut active_lambda: Vec<Vec<f64>> = data
        .segments
        .iter()
        .map(|s| Vec::with_capacity(s.active.len()))
        .collect();
    for (slot, v) in sys.slots.iter().zip(z.iter()) {
        match *slot {
            Slot::Coefficient { .. } => {}
            Slot::Lambda {
                segment,
                stage,
                constraint,
            } => {
                multipliers[segment].lambda[stage][constraint] = *v;
                active_lambda[segment].push(*v);
            }
            Slot::Upsilon { segment, component } => multipliers[segment].upsilon[component] = *v,
        }
    }

    Ok(InnerSolution {
        model: TrigTimeModel::new(freqs.to_vec(), a)?,
        multipliers,
        active_lambda,
        residual,
        objective: residual + beta * penalty + hinge,
        converged: outcome.converged,
        z,
        penalized,
        penalty_weight: weight,
    })
}

/// Gradient in W of the reduced objective at an inner optimum. By the
/// envelope theorem only the explicit W-dependence counts.
fn reduced_gradient(data: &TrainingData, sol: &InnerSolution) -> Vec<f64> {
    let fixed: Vec<(Vec<f64>, Vec<f64>)> = sol
        .multipliers
        .iter()
        .zip(&sol.active_lambda)
        .map(|(m, l)| (m.upsilon.clone(), l.clone()))
        .collect();
    let freqs = &sol.model.frequencies;
    let a = &sol.model.coefficients;
    let (_, mut grad) = frequency_objective(&data.segments, freqs, a, &fixed);
    for &(d, i, col) in &sol.penalized {
        let t = data.segments[d].times[i];
        let om = omega_f64(freqs, t);
        let h: f64 = om.iter().enumerate().map(|(r, b)| b * a[(r, col)]).sum();
        if h >= 0.0 {
            continue;
        }
        for (e, w) in freqs.iter().enumerate() {
            let dh = -t * (w * t).sin() * a[(2 * e + 1, col)] + t * (w * t).cos() * a[(2 * e + 2, col)];
            grad[e] += 2.0 * sol.penalty_weight * h * dh;
        }
    }
    grad
}

fn coefficients(z: &DVector<f64>, anchor: &[f64], q: usize) -> DMatrix<f64> {
    let basis = anchor.len();
    DMatrix::from_fn(basis, q, |r, c| {
        if c == 0 {
            anchor[r]
        } else {
            z[r * (q - 1) + c - 1]
        }
    })
}

/// Reduced objective min over (A, λ, υ) at `freqs` and its gradient in W.
pub fn reduced_objective(
    data: &TrainingData,
    freqs: &[f64],
    beta: f64,
    cfg: &TtdConfig,
) -> Result<(f64, Vec<f64>)> {
    let sol = solve_inner(data, freqs, beta, cfg)?;
    Ok((sol.objective, reduced_gradient(data, &sol)))
}

/// Result of [`refine_frequencies`].
#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub solution: InnerSolution,
    pub rounds: usize,
    /// Reduced objective after each L-BFGS iteration (empty when the search
    /// stopped on a line-search failure).
    pub history: Vec<f64>,
}

/// Local search over W on the reduced objective W ↦ min over (A, λ, υ) of
/// the regularized residual. Every evaluation is a warm-started inner solve;
/// L-BFGS runs for at most `cfg.refine_rounds` iterations or until the
/// reduced gradient falls below `cfg.refine_tol`. The search itself ignores
/// the Θ ≥ 0 penalty, which is applied in a final inner solve at the best W.
pub fn refine_frequencies(
    data: &TrainingData,
    w_init: &[f64],
    beta: f64,
    cfg: &TtdConfig,
) -> Result<RefineOutcome> {
    if w_init.is_empty() {
        let solution = solve_inner(data, w_init, beta, cfg)?;
        return Ok(RefineOutcome {
            history: vec![solution.objective],
            solution,
            rounds: 0,
        });
    }

    let free = TtdConfig {
        nonneg_theta: false,
        ..cfg.clone()
    };
    let start = solve_inner(data, w_init, beta, &free)?;
    let state = Mutex::new((start.z.clone(), start));
    let objective = BoxedFunction::new(w_init.len(), |w| {
        let warm = state.lock().expect("refine state").0.clone();
        match solve_inner_from(data, w, beta, &free, Some(&warm)) {
            Ok(sol) => {
                let grad = reduced_gradient(data, &sol);
                let value = sol.objective;
                let mut guard = state.lock().expect("refine state");
                guard.0 = sol.z.clone();
                if value < guard.1.objective {
                    guard.1 = sol;
                }
                (value, grad)
            }
            Err(_) => (f64::NAN, vec![0.0; w.len()]),
        }
    });
    let opts = LbfgsOptions {
        tol_grad: cfg.refine_tol,
        max_iter: cfg.refine_rounds,
        ..LbfgsOptions::default()
    };
    let (rounds, history) = match lbfgs_minimize_with(&objective, w_init, opts) {
        Ok(min) => (min.iterations, min.trace),
        Err(Error::Stagnation { iterations, .. }) => (iterations, Vec::new()),
        Err(e) => return Err(e),
    };
    drop(objective);
    let (_, found) = state.into_inner().expect("refine state");
    let mut best = if cfg.nonneg_theta {
        solve_inner_from(data, &found.model.frequencies, beta, cfg, Some(&found.z))?
    } else {
        found
    };
    log::debug!(
        "refine from {w_init:?}: W = {:?}, objective {:.6e} after {rounds} iterations",
        best.model.frequencies,
        best.objective
    );
    best.model = canonical(&best.model);
    Ok(RefineOutcome {
        solution: best,
        rounds,
        history,
    })
}

/// Nonnegative, ascending frequencies; sine rows flip sign with the frequency
/// and row pairs follow the sort.
pub(crate) fn canonical(model: &TrigTimeModel) -> TrigTimeModel {
    let mut a = model.coefficients.clone();
    let mut freqs = model.frequencies.clone();
    for (e, w) in freqs.iter_mut().enumerate() {
        if *w < 0.0 {
            *w = -*w;
            let mut row = a.row_mut(2 * e + 2);
            row *= -1.0;
        }
    }
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&i, &j| freqs[i].total_cmp(&freqs[j]));
    let mut sorted = a.clone();
    for (dst, &src) in order.iter().enumerate() {
        sorted.set_row(2 * dst + 1, &a.row(2 * src + 1));
        sorted.set_row(2 * dst + 2, &a.row(2 * src + 2));
    }
    TrigTimeModel {
        frequencies: order.iter().map(|&i| freqs[i]).collect(),
        coefficients: sorted,
    }
}
