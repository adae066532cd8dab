//! Sliding-window Kalman estimation of a locally constant weight vector.
//!
//! The filter state is the unanchored part of Θ, modelled as a random walk.
//! For a window of M consecutive time steps, every training segment
//! contributes the rows of its stationarity residual that belong to stages
//! inside the window, evaluated as if Θ were constant. The segment's υ (and
//! any active λ) enter those rows linearly and are removed by projecting onto
//! the orthogonal complement of their columns. The window slides one step at
//! a time and each estimate is attached to the window's middle step.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{fixed_weights, ThetaSource, TruthProfile};
use crate::dataset::TrajectorySegment;
use crate::error::{Error, Result};
use crate::experiments::{benchmark_dataset, revalidate, DataPlan, ValidationReport};
use crate::focp::FocpOptions;
use crate::kktioc::{sensitivities, IocContext};

/// Added to a singular innovation covariance.
const INNOVATION_JITTER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingWindowConfig {
    /// Window length M in steps.
    pub window: usize,
    /// Process noise σ_q² (zero freezes the random walk).
    pub process_noise: f64,
    /// Measurement noise σ_r².
    pub measurement_noise: f64,
    /// Initial covariance σ_0².
    pub initial_covariance: f64,
    /// Value of the pinned first weight.
    pub anchor: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self {
            window: 10,
            process_noise: 1e-2,
            measurement_noise: 1e-4,
            initial_covariance: 1.0,
            anchor: 1.0,
        }
    }
}

impl SlidingWindowConfig {
    /// `inputs` and `q` are the system's input count and feature count.
    pub fn validate(&self, inputs: usize, q: usize) -> Result<()> {
        if self.window == 0 || self.window * inputs < q {
            return Err(Error::Invalid(format!(
                "window of {} steps gives {} rows for {q} weights",
                self.window,
                self.window * inputs
            )));
        }
        if !(self.process_noise >= 0.0)
            || !(self.measurement_noise > 0.0)
            || !(self.initial_covariance > 0.0)
        {
            return Err(Error::Invalid(
                "noise scales must be positive (process noise may be zero)".into(),
            ));
        }
        if self.anchor == 0.0 || !self.anchor.is_finite() {
            return Err(Error::Invalid("anchor must be finite and nonzero".into()));
        }
        Ok(())
    }
}

/// Filter output: one full Θ estimate per covered time index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KfEstimate {
    pub ts: f64,
    /// Time index (t = k·Ts) of `thetas[0]`.
    pub first_index: i64,
    pub thetas: Vec<Vec<f64>>,
    /// Number of updates whose innovation covariance needed jitter.
    pub regularized_updates: usize,
    /// Smallest covariance eigenvalue seen after any step.
    pub min_covariance_eigenvalue: f64,
}

impl KfEstimate {
    /// Estimate at time index `k`, clamped to the covered range.
    pub fn at_index(&self, k: i64) -> &[f64] {
        let last = self.first_index + self.thetas.len() as i64 - 1;
        let k = k.clamp(self.first_index, last);
        &self.thetas[(k - self.first_index) as usize]
    }
}

impl ThetaSource for KfEstimate {
    fn dim(&self) -> usize {
        self.thetas.first().map_or(0, Vec::len)
    }
    fn theta(&self, t: f64) -> Vec<f64> {
        self.at_index((t / self.ts).round() as i64).to_vec()
    }
}

/// Projected measurement block of one segment inside one window.
struct Block {
    h: DMatrix<f64>,
    y: DVector<f64>,
}

/// Measurement rows of every stage, keyed by time index.
struct StageRows {
    segment: usize,
    /// Rows of (Σ_i F_i) for this stage.
    features: DMatrix<f64>,
    /// Rows of the nuisance columns (υ, active λ).
    nuisance: DMatrix<f64>,
}

fn time_index(t: f64, ts: f64) -> i64 {
    (t / ts).round() as i64
}

/// Orthonormal basis of the complement of span(n), as rows.
fn complement(n: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = n.nrows();
    if n.ncols() == 0 {
        return DMatrix::identity(rows, rows);
    }
    let svd = n.clone().svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-12 * smax.max(1e-300))
        .count();
    // P = I - U_r U_rᵀ; its unit eigenvectors span the complement.
    let ur = u.columns(0, rank);
    let p = DMatrix::identity(rows, rows) - ur * ur.transpose();
    let eig = p.symmetric_eigen();
    let keep: Vec<usize> = (0..rows).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    DMatrix::from_fn(keep.len(), rows, |r, c| eig.eigenvectors[(c, keep[r])])
}

fn window_blocks(
    stages: &BTreeMap<i64, Vec<StageRows>>,
    start: i64,
    window: usize,
    anchor: f64,
) -> Vec<Block> {
    let mut per_segment: BTreeMap<usize, (Vec<&DMatrix<f64>>, Vec<&DMatrix<f64>>)> = BTreeMap::new();
    for (_, rows) in stages.range(start..start + window as i64) {
        for s in rows {
            let entry = per_segment.entry(s.segment).or_default();
            entry.0.push(&s.features);
            entry.1.push(&s.nuisance);
        }
    }
    per_segment
        .into_values()
        .filter_map(|(feats, nuis)| {
            let f = stack(&feats);
            let n = stack(&nuis);
            let p = complement(&n);
            if p.nrows() == 0 {
                return None;
            }
            let projected = &p * &f;
            let h = projected.columns(1, f.ncols() - 1).into_owned();
            let y = -projected.column(0) * anchor;
            Some(Block { h, y })
        })
        .collect()
}

fn stack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let cols = parts[0].ncols();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(p);
        r += p.nrows();
    }
    out
}

fn stacked_measurement(blocks: &[Block], dim: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows: usize = blocks.iter().map(|b| b.h.nrows()).sum();
    let mut h = DMatrix::zeros(rows, dim);
    let mut y = DVector::zeros(rows);
    let mut r = 0;
    for b in blocks {
        h.rows_mut(r, b.h.nrows()).copy_from(&b.h);
        y.rows_mut(r, b.y.nrows()).copy_from(&b.y);
        r += b.h.nrows();
    }
    (h, y)
}

fn least_squares(h: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    if h.nrows() < h.ncols() {
        return None;
    }
    let svd = h.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return None;
    }
    svd.solve(y, 0.0).ok()
}

fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    if p.nrows() == 0 {
        return f64::INFINITY;
    }
    p.clone().symmetric_eigen().eigenvalues.min()
}

/// Runs the filter over the training segments. The filter starts at the
/// anchored least-squares estimate of the first window that determines it
/// (zero if none does).
pub fn kf_estimate(
    context: &IocContext,
    training: &[TrajectorySegment],
    cfg: &SlidingWindowConfig,
) -> Result<KfEstimate> {
    let (_, m) = context.model.kind.dims();
    let q = context.features.dim();
    cfg.validate(m, q)?;
    let Some(first) = training.first() else {
        return Err(Error::EmptyDataset("training"));
    };
    let ts = first.ts;
    if training.iter().any(|s| (s.ts - ts).abs() > 1e-12) {
        return Err(Error::Invalid("training segments differ in Ts".into()));
    }
    if q < 2 {
        return Err(Error::Invalid("need at least one weight besides the anchor".into()));
    }
    let mut order: Vec<usize> = (0..training.len()).collect();
    order.sort_by(|&a, &b| training[a].t_start.total_cmp(&training[b].t_start));

    let sens = order
        .par_iter()
        .map(|&i| sensitivities(context, &training[i]))
        .collect::<Result<Vec<_>>>()?;

    let mut stages: BTreeMap<i64, Vec<StageRows>> = BTreeMap::new();
    for (d, s) in sens.iter().enumerate() {
        let total = s
            .features
            .iter()
            .fold(DMatrix::zeros(s.rows(), q), |acc, f| acc + f);
        let nuisance = if s.active.is_empty() {
            s.terminal.clone()
        } else {
            let mut n = DMatrix::zeros(s.rows(), s.terminal.ncols() + s.active_grad.ncols());
            n.columns_mut(0, s.terminal.ncols()).copy_from(&s.terminal);
            n.columns_mut(s.terminal.ncols(), s.active_grad.ncols())
                .copy_from(&s.active_grad);
            n
        };
        for (j, t) in s.times.iter().enumerate() {
            stages.entry(time_index(*t, ts)).or_default().push(StageRows {
                segment: d,
                features: total.rows(j * m, m).into_owned(),
                nuisance: nuisance.rows(j * m, m).into_owned(),
            });
        }
    }
    let lo = *stages.keys().next().expect("segments have stages");
    let hi = *stages.keys().next_back().expect("segments have stages");
    let last_start = (hi - cfg.window as i64 + 1).max(lo);

    let dim = q - 1;
    let windows: Vec<Vec<Block>> = (lo..=last_start)
        .map(|k| window_blocks(&stages, k, cfg.window, cfg.anchor))
        .collect();

    let mut theta = windows
        .iter()
        .find_map(|b| {
            let (h, y) = stacked_measurement(b, dim);
            least_squares(&h, &y)
        })
        .unwrap_or_else(|| DVector::zeros(dim));
    let mut p = DMatrix::identity(dim, dim) * cfg.initial_covariance;
    let mut regularized = 0;
    let mut min_eig = f64::INFINITY;
    let mut thetas = Vec::with_capacity(windows.len());

    for (k, blocks) in windows.iter().enumerate() {
        if k > 0 {
            p += DMatrix::identity(dim, dim) * cfg.process_noise;
        }
        let (h, y) = stacked_measurement(blocks, dim);
        if h.nrows() > 0 {
            let r = DMatrix::identity(h.nrows(), h.nrows()) * cfg.measurement_noise;
            let mut s = &h * &p * h.transpose() + &r;
            s = (&s + s.transpose()) * 0.5;
            let chol = match s.clone().cholesky() {
                Some(c) => c,
                None => {
                    regularized += 1;
                    log::warn!("innovation covariance singular at window {k}; adding jitter");
                    let jittered = s + DMatrix::identity(h.nrows(), h.nrows()) * INNOVATION_JITTER;
                    jittered
                        .cholesky()
                        .ok_or_else(|| Error::Evaluation("innovation covariance not positive definite".into()))?
                }
            };
            // K = P Hᵀ S⁻¹
            let gain = chol.solve(&(&h * &p)).transpose();
            theta += &gain * (&y - &h * &theta);
            let i_kh = DMatrix::identity(dim, dim) - &gain * &h;
            p = &i_kh * &p * i_kh.transpose() + &gain * &r * gain.transpose();
            p = (&p + p.transpose()) * 0.5;
        }
        min_eig = min_eig.min(min_eigenvalue(&p));
        let mut full = Vec::with_capacity(q);
        full.push(cfg.anchor);
        full.extend(theta.iter().copied());
        thetas.push(full);
    }

    Ok(KfEstimate {
        ts,
        first_index: lo + (cfg.window / 2) as i64,
        thetas,
        regularized_updates: regularized,
        min_covariance_eigenvalue: min_eig,
    })
}

/// Validation error of the filter for each harmonic order of the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderPoint {
    pub order: u32,
    pub report: ValidationReport,
}

/// For every order r, generates data under the r-th harmonic profile, runs
/// the filter and revalidates with the resulting piecewise-constant Θ.
pub fn nonlinearity_sweep(
    orders: &[u32],
    plan: &DataPlan,
    cfg: &SlidingWindowConfig,
    forward: &FocpOptions,
) -> Result<Vec<OrderPoint>> {
    if orders.is_empty() {
        return Err(Error::Invalid("no harmonic orders given".into()));
    }
    let context = plan.context()?;
    let cfg = SlidingWindowConfig {
        anchor: fixed_weights(plan.system)[0],
        ..cfg.clone()
    };
    orders
        .par_iter()
        .map(|&order| {
            let data = benchmark_dataset(plan, TruthProfile::HarmonicOrder { order }, forward)?;
            let est = kf_estimate(&context, &data.train, &cfg)?;
            let (_, report) = revalidate(&est, &context, &data.validation, forward)?;
            Ok(OrderPoint { order, report })
        })
        .collect()
}
