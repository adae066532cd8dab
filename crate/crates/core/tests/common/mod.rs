//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ttdioc_core::{SystemModel, ThetaSource};

/// Central-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            let step = h * x[k].abs().max(1.0);
            a[k] += step;
            b[k] -= step;
            (f(&a) - f(&b)) / (2.0 * step)
        })
        .collect()
}

/// ‖a − b‖ / max(‖b‖, floor).
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Optimal inputs of a linear system under Σ_i Θ(t_i)ᵀ[x_i²; u_i²] with
/// x_N = 0, from one dense KKT solve.
///
/// The transition matrices are read off the model at the origin, which is
/// exact for the spring systems.
pub fn lqr_oracle(
    model: &SystemModel,
    theta: &dyn ThetaSource,
    x0: &[f64],
    t0: f64,
    horizon: usize,
) -> Vec<Vec<f64>> {
    let (n, m) = model.kind.dims();
    let (_, a, b) = model
        .step_jacobian(&vec![0.0; n], &vec![0.0; m])
        .expect("jacobian at the origin");
    let d = horizon * m;
    let x0 = DVector::from_column_slice(x0);

    // x_i = Φ_i x0 + S_i U
    let mut phi = DMatrix::identity(n, n);
    let mut s = DMatrix::zeros(n, d);
    let mut h = DMatrix::zeros(d, d);
    let mut g = DVector::zeros(d);
    for i in 0..horizon {
        let w = theta.theta(t0 + i as f64 * model.ts);
        let qx = DMatrix::from_diagonal(&DVector::from_column_slice(&w[..n]));
        let free = &phi * &x0;
        h += s.transpose() * &qx * &s;
        g += s.transpose() * &qx * &free;
        for k in 0..m {
            h[(i * m + k, i * m + k)] += w[n + k];
        }
        let mut next_s = &a * &s;
        for k in 0..m {
            let mut col = next_s.column_mut(i * m + k);
            col += b.column(k);
        }
        s = next_s;
        phi = &a * phi;
    }
    // [2H Sᵀ; S 0] [U; ν] = [−2g; −Φ_N x0]
    let mut kkt = DMatrix::zeros(d + n, d + n);
    kkt.view_mut((0, 0), (d, d)).copy_from(&(h * 2.0));
    kkt.view_mut((0, d), (d, n)).copy_from(&s.transpose());
    kkt.view_mut((d, 0), (n, d)).copy_from(&s);
    let mut rhs = DVector::zeros(d + n);
    rhs.rows_mut(0, d).copy_from(&(g * -2.0));
    rhs.rows_mut(d, n).copy_from(&(-(phi * x0)));
    let sol = kkt.lu().solve(&rhs).expect("KKT matrix is nonsingular");
    (0..horizon)
        .map(|i| sol.rows(i * m, m).iter().copied().collect())
        .collect()
}

/// min_υ ‖r + Tυ‖² by least squares.
pub fn residual_after_projection(r: &DVector<f64>, t: &DMatrix<f64>) -> f64 {
    if t.ncols() == 0 {
        return r.norm_squared();
    }
    let svd = t.clone().svd(true, true);
    let ups = svd.solve(&(-r), 1e-14).expect("svd solve");
    (r + t * ups).norm_squared()
}
