//! Shared inputs for the benchmarks.

use nalgebra::{DMatrix, DVector};
use ttdioc_core::experiments::{benchmark_dataset, DataPlan};
use ttdioc_core::numerics::CompositeQp;
use ttdioc_core::{Dataset, FocpOptions, TruthProfile};

/// Spring1 demonstrations under the two-frequency profile.
pub fn spring1_dataset() -> Dataset {
    benchmark_dataset(&DataPlan::spring1(), TruthProfile::ThetaM1, &FocpOptions::default())
        .expect("spring1 plan generates")
}

/// Dense l1-regularized quadratic of size `n` with a deterministic Hessian.
pub fn lasso_problem(n: usize) -> CompositeQp {
    let j = DMatrix::from_fn(2 * n, n, |i, k| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.45);
    let q = j.transpose() * &j + DMatrix::identity(n, n) * 1e-2;
    let c = DVector::from_fn(n, |k, _| (k as f64 * 0.7).sin());
    let mut qp = CompositeQp::plain(q, c);
    for w in qp.l1.iter_mut().skip(n / 3) {
        *w = 0.05;
    }
    qp
}
