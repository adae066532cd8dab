//! Accelerated proximal gradient for box- and l1-regularized quadratics:
//!
//! ```text
//! min ½ zᵀQz + cᵀz + Σ_j w_j |z_j| + μ Σ_k min(g_kᵀz, 0)²
//!     s.t. z_j ≥ 0 (flagged), z_j = v_j (flagged)
//! ```
//!
//! The last term is an optional squared-hinge penalty on linear forms.
//!
//! The iteration runs on a Jacobi-scaled copy of the problem and periodically
//! tries to polish the iterate by solving the reduced linear system on the
//! current support, which recovers exact zeros and full precision once the
//! support has been identified.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const POLISH_EVERY: usize = 50;
const POLISH_REPEATS: usize = 8;

/// Problem data for [`fista_solve`].
#[derive(Clone, Debug)]
pub struct CompositeQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub l1: Vec<f64>,
    pub nonneg: Vec<bool>,
    pub fixed: Vec<Option<f64>>,
    pub hinge: Option<Hinge>,
}

/// Squared-hinge penalty μ Σ_k min(g_kᵀz, 0)² with rows g_k of `rows`.
#[derive(Clone, Debug)]
pub struct Hinge {
    pub rows: DMatrix<f64>,
    pub weight: f64,
}

impl Hinge {
    fn value(&self, z: &DVector<f64>) -> f64 {
        let gz = &self.rows * z;
        self.weight * gz.iter().map(|v| v.min(0.0).powi(2)).sum::<f64>()
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let neg = (&self.rows * z).map(|v| v.min(0.0));
        self.rows.tr_mul(&neg) * (2.0 * self.weight)
    }

    /// 2μ G_Sᵀ G_S over the rows with g_kᵀz < 0.
    fn curvature(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let gz = &self.rows * z;
        let n = self.rows.ncols();
        let mut h = DMatrix::zeros(n, n);
        for (k, v) in gz.iter().enumerate() {
            if *v < 0.0 {
                let row = self.rows.row(k);
                h.ger(2.0 * self.weight, &row.transpose(), &row.transpose(), 1.0);
            }
        }
        h
    }
}

impl CompositeQp {
    /// Unregularized, unconstrained problem.
    pub fn plain(q: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            q,
            c,
            l1: vec![0.0; n],
            nonneg: vec![false; n],
            fixed: vec![None; n],
            hinge: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.q.nrows() != n || self.q.ncols() != n {
            return Err(Error::dim(format!(
                "Q is {}x{} but c has {n} entries",
                self.q.nrows(),
                self.q.ncols()
            )));
        }
        if self.l1.len() != n || self.nonneg.len() != n || self.fixed.len() != n {
            return Err(Error::dim("mask lengths differ from problem dimension"));
        }
        if let Some(h) = &self.hinge {
            if h.rows.ncols() != n {
                return Err(Error::dim(format!(
                    "hinge rows have {} columns, expected {n}",
                    h.rows.ncols()
                )));
            }
            if !(h.weight >= 0.0) {
                return Err(Error::Invalid("hinge weight must be nonnegative".into()));
            }
        }
        if self.l1.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("l1 weights must be nonnegative".into()));
        }
        if let Some((j, _)) = self
            .fixed
            .iter()
            .zip(&self.nonneg)
            .enumerate()
            .find(|(_, (f, nn))| matches!(f, Some(v) if **nn && *v < 0.0))
        {
            return Err(Error::Invalid(format!(
                "coordinate {j} is fixed to a negative value but flagged nonnegative"
            )));
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let quad = 0.5 * z.dot(&(&self.q * z)) + self.c.dot(z);
        let hinge = self.hinge.as_ref().map_or(0.0, |h| h.value(z));
        quad + hinge
            + z
                .iter()
                .zip(&self.l1)
                .map(|(v, w)| w * v.abs())
                .sum::<f64>()
    }

    /// Gradient of the smooth part.
    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.q * z + &self.c;
        if let Some(h) = &self.hinge {
            g += h.gradient(z);
        }
        g
    }

    /// Largest violation of the composite optimality conditions, measured per
    /// coordinate and scaled by `scale[j]`.
    fn violation(&self, z: &DVector<f64>, grad: &DVector<f64>, scale: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..self.dim() {
            if self.fixed[j].is_some() {
                continue;
            }
            let (g, w, zj) = (grad[j], self.l1[j], z[j]);
            let v = if self.nonneg[j] {
                if zj > 0.0 {
                    (g + w).abs()
                } else {
                    (-(g + w)).max(0.0)
                }
            } else if zj != 0.0 {
                (g + w * zj.signum()).abs()
            } else {
                (g.abs() - w).max(0.0)
            };
            worst = worst.max(v * scale[j]);
        }
        worst
    }
}

#[derive(Clone, Debug)]
pub struct FistaOutcome {
    pub z: DVector<f64>,
    pub objective: f64,
    /// Scaled composite-optimality residual at `z`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the composite problem to tolerance `tol`, starting from zero (or
/// the fixed values). When `max_iter` is exhausted the best iterate is
/// returned with `converged = false`.
pub fn fista_solve(qp: &CompositeQp, tol: f64, max_iter: usize) -> Result<FistaOutcome> {
    fista_solve_from(qp, None, tol, max_iter)
}

pub fn fista_solve_from(
    qp: &CompositeQp,
    start: Option<&DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<FistaOutcome> {
    qp.validate()?;
    let n = qp.dim();
    if n == 0 {
        return Ok(FistaOutcome {
            z: DVector::zeros(0),
            objective: 0.0,
            residual: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    // Jacobi scaling z = D y, D_jj = 1/sqrt(H_jj) with H the Hessian bound.
    let bound = match &qp.hinge {
        Some(h) => &qp.q + h.rows.tr_mul(&h.rows) * (2.0 * h.weight),
        None => qp.q.clone(),
    };
    let d: Vec<f64> = (0..n)
        .map(|j| {
            let qjj = bound[(j, j)];
            if qjj > 0.0 {
                1.0 / qjj.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let dv = DVector::from_vec(d.clone());
    let scaled = CompositeQp {
        q: DMatrix::from_fn(n, n, |i, j| qp.q[(i, j)] * d[i] * d[j]),
        c: qp.c.component_mul(&dv),
        l1: qp.l1.iter().zip(&d).map(|(w, s)| w * s).collect(),
        nonneg: qp.nonneg.clone(),
        fixed: qp
            .fixed
            .iter()
            .zip(&d)
            .map(|(f, s)| f.map(|v| v / s))
            .collect(),
        hinge: qp.hinge.as_ref().map(|h| Hinge {
            rows: DMatrix::from_fn(h.rows.nrows(), n, |k, j| h.rows[(k, j)] * d[j]),
            weight: h.weight,
        }),
    };
    let unit = vec![1.0; n];

    let scaled_bound = DMatrix::from_fn(n, n, |i, j| bound[(i, j)] * d[i] * d[j]);
    let lipschitz = SymmetricEigen::new(scaled_bound)
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, v| m.max(*v))
        .max(1e-300)
        * 1.000_001;
    let step = 1.0 / lipschitz;

    let prox = |y: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(n, |j, _| {
            if let Some(v) = scaled.fixed[j] {
                return v;
            }
            let t = step * scaled.l1[j];
            let mut v = if y[j] > t {
                y[j] - t
            } else if y[j] < -t {
                y[j] + t
            } else {
                0.0
            };
            if scaled.nonneg[j] && v < 0.0 {
                v = 0.0;
            }
            v
        })
    };

    let mut x = match start {
        Some(z0) if z0.len() == n => prox(&z0.component_div(&dv)),
        Some(z0) => {
            return Err(Error::dim(format!(
                "warm start has {} entries, expected {n}",
                z0.len()
            )))
        }
        None => prox(&DVector::zeros(n)),
    };
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut fx = scaled.objective(&x);
    let mut best = (x.clone(), fx);

    let finish = |y: DVector<f64>, iterations: usize| -> FistaOutcome {
        let mut z = y.component_mul(&dv);
        for (zj, f) in z.iter_mut().zip(&qp.fixed) {
            if let Some(v) = f {
                *zj = *v;
            }
        }
        let grad = qp.gradient(&z);
        let residual = qp.violation(&z, &grad, &d);
        FistaOutcome {
            objective: qp.objective(&z),
            residual,
            converged: residual <= tol,
            iterations,
            z,
        }
    };

    for iter in 0..=max_iter {
        if iter % POLISH_EVERY == 0 {
            let grad = scaled.gradient(&x);
            if scaled.violation(&x, &grad, &unit) <= tol {
                return Ok(finish(x, iter));
            }
            // With a hinge term the polish is repeated with the updated
            // penalized set (a semismooth Newton step on the support).
            let mut from = x.clone();
            for _ in 0..POLISH_REPEATS {
                let Some(p) = polish(&scaled, &from) else {
                    break;
                };
                let gp = scaled.gradient(&p);
                let fp = scaled.objective(&p);
                if fp > fx + 1e-12 * fx.abs().max(1.0) {
                    break;
                }
                if scaled.violation(&p, &gp, &unit) <= tol {
                    return Ok(finish(p, iter));
                }
                if scaled.hinge.is_none() {
                    break;
                }
                from = p;
            }
        }
        if iter == max_iter {
            break;
        }

        let grad = scaled.gradient(&y);
        let x_next = prox(&(&y - grad * step));
        let f_next = scaled.objective(&x_next);
        if f_next > fx {
            // Restart momentum on objective increase.
            t = 1.0;
            y = x.clone();
            let grad = scaled.gradient(&y);
            x = prox(&(&y - grad * step));
            fx = scaled.objective(&x);
            y = x.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            x = x_next;
            fx = f_next;
            t = t_next;
        }
        if fx < best.1 {
            best = (x.clone(), fx);
        }
    }
    log::debug!("fista hit max_iter={max_iter}");
    Ok(finish(best.0, max_iter))
}

/// Solves the stationarity system on the support of `x` with the current
/// signs. Returns `None` when the polished point leaves its sign pattern.
fn polish(qp: &CompositeQp, x: &DVector<f64>) -> Option<DVector<f64>> {
    let n = qp.dim();
    let active: Vec<usize> = (0..n)
        .filter(|&j| {
            qp.fixed[j].is_none() && (x[j] != 0.0 || (qp.l1[j] == 0.0 && !qp.nonneg[j]))
        })
        .collect();
    let mut z = x.clone();
    if active.is_empty() {
        return Some(z);
    }
    for j in 0..n {
        if !active.contains(&j) && qp.fixed[j].is_none() {
            z[j] = 0.0;
        }
    }
    let k = active.len();
    let curv = match &qp.hinge {
        Some(h) => &qp.q + h.curvature(x),
        None => qp.q.clone(),
    };
    let sub = DMatrix::from_fn(k, k, |a, b| curv[(active[a], active[b])]);
    let mut rhs = DVector::zeros(k);
    for (a, &j) in active.iter().enumerate() {
        let mut r = -qp.c[j];
        for i in 0..n {
            if !active.contains(&i) {
                r -= curv[(j, i)] * z[i];
            }
        }
        if qp.l1[j] > 0.0 {
            r -= qp.l1[j] * x[j].signum();
        }
        rhs[a] = r;
    }
    let sol = match sub.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => sub.svd(true, true).solve(&rhs, 1e-13).ok()?,
    };
    for (a, &j) in active.iter().enumerate() {
        let v = sol[a];
        if !v.is_finite() {
            return None;
        }
        if qp.l1[j] > 0.0 && v * x[j].signum() < 0.0 {
            return None;
        }
        if qp.nonneg[j] && v < 0.0 {
            return None;
        }
        z[j] = v;
    }
    Some(z)
}
