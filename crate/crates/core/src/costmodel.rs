//! Time-varying stage costs of the form Θ(t)·φ(x, u).
//!
//! Θ(t) is modelled as Ω(W, t)·A, where Ω stacks a bias and one cosine/sine
//! pair per frequency in W and A holds one column of coefficients per cost
//! feature.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemKind;
use crate::error::{Error, Result};
use crate::numerics::{DualScalar, Scalar, StageFunction};

/// Squares of every state and input, in that order.
#[derive(Clone, Copy, Debug)]
pub struct SquaredFeatures {
    pub n: usize,
    pub m: usize,
}

impl SquaredFeatures {
    fn eval<S: Scalar>(x: &[S], u: &[S]) -> Vec<S> {
        x.iter().chain(u).map(|v| v.clone() * v).collect()
    }
}

impl StageFunction for SquaredFeatures {
    fn output_dim(&self) -> usize {
        self.n + self.m
    }
    fn eval_f64(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        Self::eval(x, u)
    }
    fn eval_dual(&self, x: &[DualScalar], u: &[DualScalar]) -> Vec<DualScalar> {
        Self::eval(x, u)
    }
}

/// The cost feature map φ(x, u). Benchmarks use squared states and inputs;
/// any [`StageFunction`] can be plugged in.
#[derive(Clone)]
pub struct FeatureVector(Arc<dyn StageFunction>);

impl std::fmt::Debug for FeatureVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FeatureVector(q = {})", self.dim())
    }
}

impl FeatureVector {
    pub fn squares(n: usize, m: usize) -> Self {
        Self(Arc::new(SquaredFeatures { n, m }))
    }

    pub fn custom(f: impl StageFunction + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn for_system(kind: SystemKind) -> Self {
        let (n, m) = kind.dims();
        Self::squares(n, m)
    }

    pub fn dim(&self) -> usize {
        self.0.output_dim()
    }

    pub fn eval<S: Scalar>(&self, x: &[S], u: &[S]) -> Vec<S> {
        S::eval_stage(self.0.as_ref(), x, u)
    }
}

/// Ω(W, t) = [1, cos ω₁t, sin ω₁t, …, cos ω_E t, sin ω_E t].
pub fn omega<S: Scalar>(freqs: &[S], t: f64) -> Vec<S> {
    let mut out = Vec::with_capacity(2 * freqs.len() + 1);
    out.push(S::from(1.0));
    for w in freqs {
        let arg = w.clone() * t;
        out.push(arg.clone().cos());
        out.push(arg.sin());
    }
    out
}

pub fn omega_f64(freqs: &[f64], t: f64) -> Vec<f64> {
    omega(freqs, t)
}

/// Anything that yields a weight vector Θ(t).
pub trait ThetaSource: Send + Sync {
    fn dim(&self) -> usize;
    fn theta(&self, t: f64) -> Vec<f64>;
}

/// Frequencies W and coefficients A ((2E+1) × q).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTimeModel {
    pub frequencies: Vec<f64>,
    #[serde(with = "matrix_rows")]
    pub coefficients: DMatrix<f64>,
}

impl TrigTimeModel {
    pub fn new(frequencies: Vec<f64>, coefficients: DMatrix<f64>) -> Result<Self> {
        if coefficients.nrows() != 2 * frequencies.len() + 1 {
            return Err(Error::dim(format!(
                "{} frequencies need {} coefficient rows, got {}",
                frequencies.len(),
                2 * frequencies.len() + 1,
                coefficients.nrows()
            )));
        }
        Ok(Self {
            frequencies,
            coefficients,
        })
    }

    /// Constant weights: a single bias row.
    pub fn constant(weights: &[f64]) -> Self {
        Self {
            frequencies: Vec::new(),
            coefficients: DMatrix::from_row_slice(1, weights.len(), weights),
        }
    }

    pub fn basis_count(&self) -> usize {
        self.frequencies.len()
    }

    pub fn q(&self) -> usize {
        self.coefficients.ncols()
    }

    /// Θ(t) = Ω(W, t)·A.
    pub fn theta_of_t(&self, t: f64) -> Vec<f64> {
        let basis = omega_f64(&self.frequencies, t);
        (0..self.q())
            .map(|j| {
                basis
                    .iter()
                    .enumerate()
                    .map(|(r, b)| b * self.coefficients[(r, j)])
                    .sum()
            })
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            frequencies: self.frequencies.clone(),
            coefficients: &self.coefficients * factor,
        }
    }
}

impl ThetaSource for TrigTimeModel {
    fn dim(&self) -> usize {
        self.q()
    }
    fn theta(&self, t: f64) -> Vec<f64> {
        self.theta_of_t(t)
    }
}

/// Scalar weight profiles for the time-varying slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthProfile {
    /// 4 + 1.5 cos 2t + 1.5 cos 3t
    ThetaM1,
    /// 1.5 + 0.02 t² − 0.01 t
    ThetaM2,
    /// 4 + e^{0.2 t}
    ThetaM3,
    Constant { value: f64 },
    /// 4 + Σ_{j=1..r} (1.5/j) cos(j t)
    HarmonicOrder { order: u32 },
}

impl TruthProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TruthProfile::ThetaM1 => 4.0 + 1.5 * (2.0 * t).cos() + 1.5 * (3.0 * t).cos(),
            TruthProfile::ThetaM2 => 1.5 + 0.02 * t * t - 0.01 * t,
            TruthProfile::ThetaM3 => 4.0 + (0.2 * t).exp(),
            TruthProfile::Constant { value } => value,
            TruthProfile::HarmonicOrder { order } => {
                4.0 + (1..=order)
                    .map(|j| 1.5 / f64::from(j) * (f64::from(j) * t).cos())
                    .sum::<f64>()
            }
        }
    }

    /// Short tag used in file names and CSV rows.
    pub fn tag(&self) -> String {
        match self {
            TruthProfile::ThetaM1 => "theta_m1".into(),
            TruthProfile::ThetaM2 => "theta_m2".into(),
            TruthProfile::ThetaM3 => "theta_m3".into(),
            TruthProfile::Constant { value } => format!("constant_{value}"),
            TruthProfile::HarmonicOrder { order } => format!("harmonic_{order}"),
        }
    }

    /// Exact trigonometric representation when one exists.
    pub fn as_trig(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match *self {
            TruthProfile::ThetaM1 => Some((vec![2.0, 3.0], vec![4.0, 1.5, 0.0, 1.5, 0.0])),
            TruthProfile::Constant { value } => Some((vec![], vec![value])),
            TruthProfile::HarmonicOrder { order } => {
                let freqs = (1..=order).map(f64::from).collect();
                let mut col = vec![4.0];
                for j in 1..=order {
                    col.extend([1.5 / f64::from(j), 0.0]);
                }
                Some((freqs, col))
            }
            _ => None,
        }
    }
}

/// Fixed weights of the benchmark cost functions; the last feature slot is
/// the time-varying one.
pub fn fixed_weights(kind: SystemKind) -> &'static [f64] {
    match kind {
        // x1², ẋ1², x2², ẋ2², x3², ẋ3², f1², f2²
        SystemKind::Spring3 => &[7.0, 5.0, 6.0, 8.0, 6.5, 5.5, 2.0, 4.0],
        // φ1², φ̇1², φ2², φ̇2², τ1²
        SystemKind::Pendulum2 => &[7.0, 5.0, 10.0, 5.0, 4.0],
        // x², ẋ²
        SystemKind::Spring1 => &[7.0, 5.0],
    }
}

/// Ground-truth Θ(t) of a benchmark system under a given profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthTheta {
    pub system: SystemKind,
    pub profile: TruthProfile,
}

impl TruthTheta {
    pub fn new(system: SystemKind, profile: TruthProfile) -> Self {
        Self { system, profile }
    }

    pub fn slot(&self) -> usize {
        fixed_weights(self.system).len()
    }

    /// Exact TrigTimeModel for profiles inside the model class.
    pub fn as_trig_model(&self) -> Option<TrigTimeModel> {
        let (freqs, col) = self.profile.as_trig()?;
        let fixed = fixed_weights(self.system);
        let q = fixed.len() + 1;
        let mut a = DMatrix::zeros(col.len(), q);
        for (j, w) in fixed.iter().enumerate() {
            a[(0, j)] = *w;
        }
        for (r, v) in col.iter().enumerate() {
            a[(r, q - 1)] = *v;
        }
        Some(TrigTimeModel {
            frequencies: freqs,
            coefficients: a,
        })
    }
}

/// Θ(t) of a benchmark system under `profile`.
pub fn truth_theta(system: SystemKind, profile: TruthProfile, t: f64) -> Vec<f64> {
    let mut out = fixed_weights(system).to_vec();
    out.push(profile.eval(t));
    out
}

impl ThetaSource for TruthTheta {
    fn dim(&self) -> usize {
        self.slot() + 1
    }
    fn theta(&self, t: f64) -> Vec<f64> {
        truth_theta(self.system, self.profile, t)
    }
}

/// Θ(t) multiplied by a positive constant.
pub struct ScaledTheta<'a> {
    pub inner: &'a dyn ThetaSource,
    pub factor: f64,
}

impl ThetaSource for ScaledTheta<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn theta(&self, t: f64) -> Vec<f64> {
        self.inner.theta(t).into_iter().map(|v| v * self.factor).collect()
    }
}

/// Θ(t)·φ(x, u).
pub fn stage_cost<S: Scalar>(theta: &[f64], features: &FeatureVector, x: &[S], u: &[S]) -> S {
    features
        .eval(x, u)
        .into_iter()
        .zip(theta)
        .fold(S::from(0.0), |acc, (phi, w)| acc + phi * *w)
}

/// Serializes a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}
