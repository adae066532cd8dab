//! Validation error, dataset generation plans and the experiment drivers.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{FeatureVector, ThetaSource, TrigTimeModel, TruthProfile, TruthTheta};
use crate::dataset::{Dataset, TrajectorySegment};
use crate::dynamics::{PhysicalParams, SystemKind, SystemModel};
use crate::error::{Error, Result};
use crate::focp::{
    problem_for_segment, solve_forward_from, ConstraintSet, DemoSpec, FocpOptions,
    InitialCondition,
};
use crate::kktioc::{sp_ioc, ttd_ioc, GridSpec, IocContext, IocSolution, TtdConfig};

/// Root-mean-square stage error of one segment over k = 0..N−1.
pub fn segment_rms(resolved: &TrajectorySegment, reference: &TrajectorySegment) -> Result<f64> {
    if resolved.n != reference.n
        || resolved.states.len() < resolved.n
        || reference.states.len() < reference.n
        || resolved.inputs.len() != reference.inputs.len()
    {
        return Err(Error::dim("compared segments differ in horizon"));
    }
    let mut sum = 0.0;
    for k in 0..reference.n {
        let (xa, xb) = (&resolved.states[k], &reference.states[k]);
        let (ua, ub) = (&resolved.inputs[k], &reference.inputs[k]);
        if xa.len() != xb.len() || ua.len() != ub.len() {
            return Err(Error::dim("compared segments differ in state or input size"));
        }
        sum += xa.iter().zip(xb).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        sum += ua.iter().zip(ub).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((sum / reference.n as f64).sqrt())
}

/// Mean over segments of the per-segment RMS error.
pub fn validation_error(
    resolved: &[TrajectorySegment],
    reference: &[TrajectorySegment],
) -> Result<f64> {
    if resolved.len() != reference.len() {
        return Err(Error::dim(format!(
            "{} resolved segments against {} references",
            resolved.len(),
            reference.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::EmptyDataset("validation"));
    }
    let total: f64 = resolved
        .iter()
        .zip(reference)
        .map(|(a, b)| segment_rms(a, b))
        .sum::<Result<f64>>()?;
    Ok(total / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ttd,
    Spioc,
    Kf,
    Truth,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Ttd => "TTD",
            Method::Spioc => "spIOC",
            Method::Kf => "KF",
            Method::Truth => "truth",
        }
    }
}

/// Mean per-segment RMS deviation of one estimate on one validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    #[serde(with = "crate::serde_ext::inf_as_null")]
    pub e_v: f64,
    #[serde(with = "crate::serde_ext::vec_inf_as_null")]
    pub per_segment: Vec<f64>,
    /// Failure messages of segments whose re-solve did not converge.
    pub failures: Vec<String>,
}

/// Re-solves every validation segment with `theta` fixed and compares it to
/// the reference. Failed re-solves count as +∞.
pub fn revalidate(
    theta: &dyn ThetaSource,
    context: &IocContext,
    validation: &[TrajectorySegment],
    forward: &FocpOptions,
) -> Result<(Vec<Option<TrajectorySegment>>, ValidationReport)> {
    if validation.is_empty() {
        return Err(Error::EmptyDataset("validation"));
    }
    let solved: Vec<std::result::Result<TrajectorySegment, String>> = validation
        .par_iter()
        .map(|seg| {
            let model = context.model.with_ts(seg.ts);
            let problem =
                problem_for_segment(seg, &model, &context.features, theta, &context.constraints);
            solve_forward_from(&problem, Some(&seg.inputs), forward)
                .map(|sol| TrajectorySegment {
                    states: sol.states,
                    inputs: sol.inputs,
                    ..seg.clone()
                })
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut per_segment = Vec::with_capacity(validation.len());
    let mut failures = Vec::new();
    let mut resolved = Vec::with_capacity(validation.len());
    for (k, (res, reference)) in solved.into_iter().zip(validation).enumerate() {
        match res {
            Ok(seg) => {
                per_segment.push(segment_rms(&seg, reference)?);
                resolved.push(Some(seg));
            }
            Err(msg) => {
                failures.push(format!("segment {k}: {msg}"));
                per_segment.push(f64::INFINITY);
                resolved.push(None);
            }
        }
    }
    let e_v = per_segment.iter().sum::<f64>() / per_segment.len() as f64;
    Ok((
        resolved,
        ValidationReport {
            e_v,
            per_segment,
            failures,
        },
    ))
}

/// How demonstrations for one experiment are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPlan {
    pub system: SystemKind,
    pub params: PhysicalParams,
    pub ts: f64,
    pub horizon: usize,
    pub n_gen: usize,
    pub stride: usize,
    /// Number of long-horizon solves; every `validation_every`-th initial
    /// state goes to the validation split.
    pub initial_states: usize,
    pub validation_every: usize,
    /// Initial states are drawn uniformly from ‖x‖∞ ≤ state_bound.
    pub state_bound: f64,
    /// Initial state k starts at absolute step k·time_spread.
    pub time_spread: usize,
    pub seed: u64,
}

impl Default for DataPlan {
    fn default() -> Self {
        Self::sys1()
    }
}

impl DataPlan {
    /// Three-mass spring-damper: N = 60, Ts = 0.1, 12 training and 6
    /// validation segments.
    pub fn sys1() -> Self {
        Self {
            system: SystemKind::Spring3,
            params: PhysicalParams::default(),
            ts: 0.1,
            horizon: 60,
            n_gen: 80,
            stride: 20,
            initial_states: 9,
            validation_every: 3,
            state_bound: 1.0,
            time_spread: 0,
            seed: 7,
        }
    }

    /// Double inverted pendulum: short horizon around the upright
    /// equilibrium, 16 training and 8 validation segments.
    pub fn sys2() -> Self {
        Self {
            system: SystemKind::Pendulum2,
            params: PhysicalParams::default(),
            ts: 0.1,
            horizon: 20,
            n_gen: 30,
            stride: 10,
            initial_states: 12,
            validation_every: 3,
            state_bound: 0.3,
            time_spread: 5,
            seed: 11,
        }
    }

    /// One-element spring-damper for the sliding-window study.
    pub fn spring1() -> Self {
        Self {
            system: SystemKind::Spring1,
            params: PhysicalParams::default(),
            ts: 0.1,
            horizon: 30,
            n_gen: 60,
            stride: 10,
            initial_states: 6,
            validation_every: 3,
            state_bound: 1.0,
            time_spread: 7,
            seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.ts > 0.0) || self.horizon == 0 || self.initial_states == 0 {
            return Err(Error::Invalid("plan needs Ts > 0, N >= 1 and initial states".into()));
        }
        if self.n_gen < self.horizon + self.stride {
            return Err(Error::Invalid(format!(
                "n_gen = {} must be at least N + stride = {}",
                self.n_gen,
                self.horizon + self.stride
            )));
        }
        if self.validation_every == 0 {
            return Err(Error::Invalid("validation_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<SystemModel> {
        SystemModel::new(self.system, self.params.clone(), self.ts)
    }

    pub fn context(&self) -> Result<IocContext> {
        Ok(IocContext::for_model(self.model()?))
    }

    pub fn initial_conditions(&self) -> Vec<InitialCondition> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.system.dims().0;
        (0..self.initial_states)
            .map(|k| InitialCondition {
                state: (0..n)
                    .map(|_| rng.random_range(-self.state_bound..=self.state_bound))
                    .collect(),
                start_step: k * self.time_spread,
            })
            .collect()
    }

    pub fn is_validation(&self, k: usize) -> bool {
        k % self.validation_every == self.validation_every - 1
    }
}

/// Generates the training/validation split of `plan` under `truth`.
pub fn generate_dataset(
    plan: &DataPlan,
    truth: &dyn ThetaSource,
    profile_tag: &str,
    forward: &FocpOptions,
) -> Result<Dataset> {
    plan.validate()?;
    let model = plan.model()?;
    let spec = DemoSpec {
        features: FeatureVector::for_system(plan.system),
        model,
        truth,
        profile_tag: profile_tag.to_string(),
        constraints: ConstraintSet::none(),
        n_gen: plan.n_gen,
        horizon: plan.horizon,
        stride: plan.stride,
        seed: plan.seed,
    };
    let groups = crate::focp::generate_demonstrations(&spec, &plan.initial_conditions(), forward)?;
    let mut ds = Dataset::default();
    for (k, group) in groups.into_iter().enumerate() {
        if plan.is_validation(k) {
            ds.validation.extend(group);
        } else {
            ds.train.extend(group);
        }
    }
    Ok(ds)
}

/// Dataset of a benchmark system under one of its truth profiles.
pub fn benchmark_dataset(
    plan: &DataPlan,
    profile: TruthProfile,
    forward: &FocpOptions,
) -> Result<Dataset> {
    let truth = TruthTheta::new(plan.system, profile);
    generate_dataset(plan, &truth, &profile.tag(), forward)
}

/// Estimator settings used for a benchmark cell. The anchor is the first
/// fixed weight of the system. The pendulum runs with a single frequency
/// seeded at 0.11, except under θ_m1 whose two frequencies need E = 2 and a
/// denser start grid (the basin around the true pair is narrow on the short
/// pendulum time span).
pub fn benchmark_config(system: SystemKind, profile: TruthProfile) -> TtdConfig {
    let anchor = vec![crate::costmodel::fixed_weights(system)[0]];
    match system {
        SystemKind::Pendulum2 => {
            let beta_grid = GridSpec::new(0.058, 0.061, 0.003);
            if profile == TruthProfile::ThetaM1 {
                TtdConfig {
                    omega_grid: GridSpec::new(0.5, 3.5, 0.5),
                    beta_grid,
                    anchor,
                    ..TtdConfig::default()
                }
            } else {
                TtdConfig {
                    basis_count: 1,
                    omega_grid: GridSpec::single(0.11),
                    beta_grid,
                    anchor,
                    ..TtdConfig::default()
                }
            }
        }
        SystemKind::Spring3 | SystemKind::Spring1 => TtdConfig {
            anchor,
            ..TtdConfig::default()
        },
    }
}

/// TTD-IOC and spIOC fitted to the same dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub system: SystemKind,
    pub profile: TruthProfile,
    pub ttd: IocSolution,
    pub spioc: IocSolution,
}

impl Comparison {
    pub fn e_ttd(&self) -> f64 {
        self.ttd.validation_error
    }

    pub fn e_spioc(&self) -> f64 {
        self.spioc.validation_error
    }
}

pub fn run_comparison(
    plan: &DataPlan,
    profile: TruthProfile,
    cfg: &TtdConfig,
    forward: &FocpOptions,
) -> Result<(Dataset, Comparison)> {
    let dataset = benchmark_dataset(plan, profile, forward)?;
    let ctx = plan.context()?;
    let ttd = ttd_ioc(&ctx, &dataset, cfg, forward)?;
    let spioc = sp_ioc(&ctx, &dataset, cfg.anchor_column()[0], cfg.nonneg_theta, forward)?;
    Ok((
        dataset,
        Comparison {
            system: plan.system,
            profile,
            ttd,
            spioc,
        },
    ))
}

/// One cell of a generalization sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: ValidationReport,
}

/// Revalidates a trained model on fresh data generated with each target
/// sampling time (other plan settings unchanged).
pub fn sweep_ts(
    trained: &TrigTimeModel,
    plan: &DataPlan,
    profile: TruthProfile,
    targets: &[f64],
    forward: &FocpOptions,
) -> Result<Vec<SweepPoint>> {
    targets
        .iter()
        .map(|&ts| {
            let target = DataPlan { ts, ..plan.clone() };
            sweep_cell(trained, &target, profile, ts, forward)
        })
        .collect()
}

/// Same as [`sweep_ts`] over horizon lengths; the stride is kept and N_gen
/// follows N.
pub fn sweep_n(
    trained: &TrigTimeModel,
    plan: &DataPlan,
    profile: TruthProfile,
    targets: &[usize],
    forward: &FocpOptions,
) -> Result<Vec<SweepPoint>> {
    targets
        .iter()
        .map(|&n| {
            let target = DataPlan {
                horizon: n,
                n_gen: n + (plan.n_gen - plan.horizon),
                ..plan.clone()
            };
            sweep_cell(trained, &target, profile, n as f64, forward)
        })
        .collect()
}

fn sweep_cell(
    trained: &TrigTimeModel,
    plan: &DataPlan,
    profile: TruthProfile,
    value: f64,
    forward: &FocpOptions,
) -> Result<SweepPoint> {
    let data = benchmark_dataset(plan, profile, forward)?;
    let (_, report) = revalidate(trained, &plan.context()?, &data.validation, forward)?;
    Ok(SweepPoint { value, report })
}

/// One retraining of the E sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisPoint {
    pub basis_count: usize,
    pub solution: IocSolution,
}

impl BasisPoint {
    /// Largest |coefficient| on trig rows whose frequency is not within
    /// `tol` of a true frequency, relative to max |Â|.
    pub fn spurious_ratio(&self, truth: &[f64], tol: f64) -> f64 {
        let m = &self.solution.model;
        let a = &m.coefficients;
        let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let mut worst = 0.0f64;
        for (e, w) in m.frequencies.iter().enumerate() {
            if truth.iter().any(|t| (t - w).abs() <= tol) {
                continue;
            }
            for row in [2 * e + 1, 2 * e + 2] {
                for c in 1..a.ncols() {
                    worst = worst.max(a[(row, c)].abs());
                }
            }
        }
        worst / scale
    }
}

/// Retrains on one dataset for every E in `counts`.
pub fn sweep_e(
    dataset: &Dataset,
    context: &IocContext,
    base: &TtdConfig,
    counts: &[usize],
    forward: &FocpOptions,
) -> Result<Vec<BasisPoint>> {
    counts
        .iter()
        .map(|&e| {
            let cfg = TtdConfig {
                basis_count: e,
                anchor: vec![base.anchor_column()[0]],
                ..base.clone()
            };
            Ok(BasisPoint {
                basis_count: e,
                solution: ttd_ioc(context, dataset, &cfg, forward)?,
            })
        })
        .collect()
}

/// Shortest round-trip decimal, `inf` for +∞.
pub fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}

/// Renders a CSV with a header row; cells are written verbatim.
pub fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn fig1_csv(points: &[(u32, f64)]) -> String {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|(r, e)| vec![r.to_string(), fmt_float(*e)])
        .collect();
    render_csv(&["order", "e_v"], &rows)
}

pub fn fig2_csv(points: &[BasisPoint]) -> String {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.basis_count.to_string(),
                fmt_float(p.solution.validation_error),
            ]
        })
        .collect();
    render_csv(&["E", "e_v"], &rows)
}

pub fn system_tag(kind: SystemKind) -> &'static str {
    match kind {
        SystemKind::Spring3 => "sys1",
        SystemKind::Pendulum2 => "sys2",
        SystemKind::Spring1 => "spring1",
    }
}

pub fn fig3_row(system: SystemKind, profile: TruthProfile, method: Method, e_v: f64) -> Vec<String> {
    vec![
        system_tag(system).to_string(),
        profile.tag(),
        method.tag().to_string(),
        fmt_float(e_v),
    ]
}

pub fn fig3_rows(cmp: &Comparison) -> Vec<Vec<String>> {
    vec![
        fig3_row(cmp.system, cmp.profile, Method::Ttd, cmp.e_ttd()),
        fig3_row(cmp.system, cmp.profile, Method::Spioc, cmp.e_spioc()),
    ]
}

pub fn fig3_csv(rows: &[Vec<String>]) -> String {
    render_csv(&["system", "profile", "method", "e_v"], rows)
}

/// fig4 (`column` = "Ts") and fig5 (`column` = "N").
pub fn sweep_csv(column: &str, profile: TruthProfile, points: &[SweepPoint]) -> String {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![fmt_float(p.value), profile.tag(), fmt_float(p.report.e_v)])
        .collect();
    render_csv(&[column, "profile", "e_v"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(states: Vec<Vec<f64>>, inputs: Vec<Vec<f64>>) -> TrajectorySegment {
        TrajectorySegment {
            system: SystemKind::Spring1,
            ts: 0.1,
            n: inputs.len(),
            t_start: 0.0,
            states,
            inputs,
            profile: "constant_1".into(),
            seed: 0,
        }
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 3.0, 7.559522397859449e-11, 1e21, f64::INFINITY] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_float(0.05), "0.05");
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }

    #[test]
    fn identical_sequences_have_zero_error() {
        let a = seg(vec![vec![1.0, 2.0]; 4], vec![vec![0.5]; 3]);
        let one = std::slice::from_ref(&a);
        assert_eq!(validation_error(one, one).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_its_magnitude() {
        let a = seg(vec![vec![1.0, 2.0]; 4], vec![vec![0.5]; 3]);
        let mut b = a.clone();
        for x in b.states.iter_mut().take(3) {
            x[1] += 0.25;
        }
        // The terminal state is not part of the sum.
        b.states[3][0] += 100.0;
        let e = validation_error(&[b], &[a]).unwrap();
        assert!((e - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn segments_are_averaged() {
        let a = seg(vec![vec![0.0, 0.0]; 3], vec![vec![0.0]; 2]);
        let mut b = a.clone();
        for u in &mut b.inputs {
            u[0] = 0.5;
        }
        let mut c = a.clone();
        for u in &mut c.inputs {
            u[0] = 1.5;
        }
        let e = validation_error(&[b, c], &[a.clone(), a]).unwrap();
        assert!((e - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn mismatch_is_an_error() {
        let a = seg(vec![vec![0.0, 0.0]; 3], vec![vec![0.0]; 2]);
        let b = seg(vec![vec![0.0, 0.0]; 4], vec![vec![0.0]; 3]);
        assert!(validation_error(std::slice::from_ref(&a), &[b]).is_err());
        assert!(validation_error(&[a.clone(), a.clone()], &[a]).is_err());
    }

    #[test]
    fn csv_has_header_and_round_trip_floats() {
        let csv = fig1_csv(&[(0, 0.1), (1, 1.0 / 3.0)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("order,e_v"));
        let v: f64 = lines.nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v.to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn split_assigns_every_third_state_to_validation() {
        let plan = DataPlan::sys1();
        let val: Vec<usize> = (0..9).filter(|k| plan.is_validation(*k)).collect();
        assert_eq!(val, vec![2, 5, 8]);
    }
}
