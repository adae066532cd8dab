//! Benchmark plants: a one-element spring-damper, the three-layer
//! spring-damper stack and two inverted pendulums coupled by a spring-damper.
//! Continuous dynamics are discretized with classical RK4 under a zero-order
//! hold on the input.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lift, values, DualScalar, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    /// One mass on a spring-damper, (n, m) = (2, 1).
    Spring1,
    /// Three stacked masses, (n, m) = (6, 3).
    Spring3,
    /// Two coupled inverted pendulums, (n, m) = (4, 2).
    Pendulum2,
}

impl SystemKind {
    pub fn dims(self) -> (usize, usize) {
        match self {
            SystemKind::Spring1 => (2, 1),
            SystemKind::Spring3 => (6, 3),
            SystemKind::Pendulum2 => (4, 2),
        }
    }

    pub fn is_linear(self) -> bool {
        !matches!(self, SystemKind::Pendulum2)
    }
}

/// Physical constants. Spring systems use the `masses`, `springs` and
/// `dampers` triples (index 0 only for the one-element plant); the pendulum
/// pair uses the remaining fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    pub masses: [f64; 3],
    pub springs: [f64; 3],
    pub dampers: [f64; 3],
    pub length: f64,
    pub attach_height: f64,
    pub pendulum_mass: f64,
    pub coupling_spring: f64,
    pub coupling_damper: f64,
    pub gravity: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            masses: [1.0; 3],
            springs: [1.0; 3],
            dampers: [0.5; 3],
            length: 1.0,
            attach_height: 0.5,
            pendulum_mass: 1.0,
            coupling_spring: 1.0,
            coupling_damper: 0.5,
            gravity: 9.81,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self
            .masses
            .iter()
            .chain(&self.springs)
            .chain(&self.dampers)
            .chain([
                &self.length,
                &self.attach_height,
                &self.pendulum_mass,
                &self.coupling_spring,
                &self.coupling_damper,
                &self.gravity,
            ])
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::Invalid("physical parameters must be strictly positive".into()));
        }
        if self.attach_height > self.length {
            return Err(Error::Invalid(format!(
                "attachment height {} exceeds pendulum length {}",
                self.attach_height, self.length
            )));
        }
        Ok(())
    }

    /// Same plant with every damper removed (energy-conservation checks).
    pub fn undamped(&self) -> Self {
        Self {
            dampers: [0.0; 3],
            coupling_damper: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub kind: SystemKind,
    pub params: PhysicalParams,
    pub ts: f64,
}

impl SystemModel {
    pub fn new(kind: SystemKind, params: PhysicalParams, ts: f64) -> Result<Self> {
        params.validate()?;
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Error::Invalid(format!("sampling time must be positive, got {ts}")));
        }
        Ok(Self { kind, params, ts })
    }

    /// Unit-parameter plant.
    pub fn with_defaults(kind: SystemKind, ts: f64) -> Result<Self> {
        Self::new(kind, PhysicalParams::default(), ts)
    }

    /// Skips validation; used for the undamped energy check.
    pub fn unchecked(kind: SystemKind, params: PhysicalParams, ts: f64) -> Self {
        Self { kind, params, ts }
    }

    pub fn state_dim(&self) -> usize {
        self.kind.dims().0
    }

    pub fn input_dim(&self) -> usize {
        self.kind.dims().1
    }

    pub fn with_ts(&self, ts: f64) -> Self {
        Self {
            ts,
            ..self.clone()
        }
    }

    /// Continuous-time state derivative.
    pub fn continuous_deriv<S: Scalar>(&self, x: &[S], u: &[S]) -> Vec<S> {
        let p = &self.params;
        match self.kind {
            SystemKind::Spring1 => {
                let (m, k, d) = (p.masses[0], p.springs[0], p.dampers[0]);
                let acc = (u[0].clone() - x[0].clone() * k - x[1].clone() * d) / m;
                vec![x[1].clone(), acc]
            }
            SystemKind::Spring3 => {
                let [m1, m2, m3] = p.masses;
                let [k1, k2, k3] = p.springs;
                let [d1, d2, d3] = p.dampers;
                let (x1, v1, x2, v2, x3, v3) = (&x[0], &x[1], &x[2], &x[3], &x[4], &x[5]);
                let a1 = (u[0].clone() - x1.clone() * (k1 + k2) - v1.clone() * (d1 + d2)
                    + x2.clone() * k2
                    + v2.clone() * d2)
                    / m1;
                let a2 = (u[1].clone() + x1.clone() * k1 + v1.clone() * d1
                    - x2.clone() * (k2 + k3)
                    - v2.clone() * (d2 + d3)
                    + x3.clone() * k3
                    + v3.clone() * d3)
                    / m2;
                let a3 = (u[2].clone() + x2.clone() * k3 + v2.clone() * d3
                    - x3.clone() * k3
                    - v3.clone() * d3)
                    / m3;
                vec![v1.clone(), a1, v2.clone(), a2, v3.clone(), a3]
            }
            SystemKind::Pendulum2 => {
                let (l, a, m, g) = (p.length, p.attach_height, p.pendulum_mass, p.gravity);
                let (k, d) = (p.coupling_spring, p.coupling_damper);
                let (s1, c1) = (x[0].clone().sin(), x[0].clone().cos());
                let (s2, c2) = (x[2].clone().sin(), x[2].clone().cos());
                let force = (s2.clone() - &s1) * (k * a)
                    + (c2.clone() * &x[3] - c1.clone() * &x[1]) * (d * a);
                let inertia = 1.0 / (m * l * l);
                let acc1 = s1 * (g / l) + c1 * &force * a + u[0].clone() * inertia;
                let acc2 = s2 * (g / l) - c2 * &force * a + u[1].clone() * inertia;
                vec![x[1].clone(), acc1, x[3].clone(), acc2]
            }
        }
    }

    fn rk4<S: Scalar>(&self, x: &[S], u: &[S], h: f64) -> Vec<S> {
        let axpy = |base: &[S], k: &[S], s: f64| -> Vec<S> {
            base.iter()
                .zip(k)
                .map(|(b, ki)| b.clone() + ki.clone() * s)
                .collect()
        };
        let k1 = self.continuous_deriv(x, u);
        let k2 = self.continuous_deriv(&axpy(x, &k1, 0.5 * h), u);
        let k3 = self.continuous_deriv(&axpy(x, &k2, 0.5 * h), u);
        let k4 = self.continuous_deriv(&axpy(x, &k3, h), u);
        x.iter()
            .enumerate()
            .map(|(i, xi)| {
                let incr = k1[i].clone() + k2[i].clone() * 2.0 + k3[i].clone() * 2.0 + &k4[i];
                xi.clone() + incr * (h / 6.0)
            })
            .collect()
    }

    /// One RK4 step over the sampling interval; no finiteness check.
    pub fn step_unchecked<S: Scalar>(&self, x: &[S], u: &[S]) -> Vec<S> {
        self.rk4(x, u, self.ts)
    }

    /// x(k+1) = f(x(k), u(k)).
    pub fn step<S: Scalar>(&self, x: &[S], u: &[S]) -> Result<Vec<S>> {
        self.check_dims(x.len(), u.len())?;
        let next = self.step_unchecked(x, u);
        if next.iter().all(|v| v.value().is_finite()) {
            Ok(next)
        } else {
            Err(Error::Divergence)
        }
    }

    /// Integrates one sampling interval with `substeps` RK4 steps; used as a
    /// dense reference in tests.
    pub fn step_fine(&self, x: &[f64], u: &[f64], substeps: usize) -> Vec<f64> {
        let h = self.ts / substeps as f64;
        let mut cur = x.to_vec();
        for _ in 0..substeps {
            cur = self.rk4(&cur, u, h);
        }
        cur
    }

    /// Next state with its Jacobians ∂f/∂x (n×n) and ∂f/∂u (n×m).
    pub fn step_jacobian(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (n, m) = (self.state_dim(), self.input_dim());
        self.check_dims(x.len(), u.len())?;
        let seeds = n + m;
        let xd: Vec<DualScalar> = (0..n).map(|i| DualScalar::variable(x[i], i, seeds)).collect();
        let ud: Vec<DualScalar> = (0..m)
            .map(|j| DualScalar::variable(u[j], n + j, seeds))
            .collect();
        let next = self.step(&xd, &ud)?;
        let a = DMatrix::from_fn(n, n, |i, j| next[i].deriv(j));
        let b = DMatrix::from_fn(n, m, |i, j| next[i].deriv(n + j));
        Ok((values(&next), a, b))
    }

    /// [F_0, …, F_N] with F_0 = x0 and F_i = f(F_{i-1}, u_{i-1}).
    pub fn rollout<S: Scalar>(&self, x0: &[S], inputs: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(x0.to_vec());
        for u in inputs {
            let next = self.step(out.last().expect("nonempty"), u)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn rollout_f64(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.rollout::<f64>(x0, inputs)
    }

    fn check_dims(&self, nx: usize, nu: usize) -> Result<()> {
        let (n, m) = self.kind.dims();
        if nx != n || nu != m {
            return Err(Error::dim(format!(
                "{:?} expects (n, m) = ({n}, {m}), got ({nx}, {nu})",
                self.kind
            )));
        }
        Ok(())
    }

    /// Mechanical energy of the spring plants (kinetic plus spring potential).
    pub fn spring_energy(&self, x: &[f64]) -> f64 {
        let p = &self.params;
        match self.kind {
            SystemKind::Spring1 => 0.5 * p.masses[0] * x[1] * x[1] + 0.5 * p.springs[0] * x[0] * x[0],
            SystemKind::Spring3 => {
                let kinetic: f64 = (0..3).map(|i| 0.5 * p.masses[i] * x[2 * i + 1].powi(2)).sum();
                let (x1, x2, x3) = (x[0], x[2], x[4]);
                let potential = 0.5 * p.springs[0] * x1 * x1
                    + 0.5 * p.springs[1] * (x2 - x1).powi(2)
                    + 0.5 * p.springs[2] * (x3 - x2).powi(2);
                kinetic + potential
            }
            SystemKind::Pendulum2 => f64::NAN,
        }
    }
}

/// Splits a flat decision vector into per-stage inputs.
pub fn unflatten<S: Clone>(flat: &[S], m: usize) -> Vec<Vec<S>> {
    flat.chunks(m).map(<[S]>::to_vec).collect()
}

pub fn flatten(inputs: &[Vec<f64>]) -> Vec<f64> {
    inputs.iter().flatten().copied().collect()
}

pub fn zero_inputs(n_steps: usize, m: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; m]; n_steps]
}

/// Lifts a plain state to constant scalars.
pub fn lift_state<S: Scalar>(x: &[f64]) -> Vec<S> {
    lift(x)
}
