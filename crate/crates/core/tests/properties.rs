mod common;

use std::slice;
use std::sync::OnceLock;

use common::{fd_gradient, relative_error};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use ttdioc_core::costmodel::{stage_cost, TruthTheta};
use ttdioc_core::dataset::Dataset;
use ttdioc_core::experiments::{benchmark_dataset, validation_error, DataPlan, ValidationReport};
use ttdioc_core::focp::lagrangian_gradient;
use ttdioc_core::kktioc::{frequency_objective, omega_tuples, sensitivities, GridSpec};
use ttdioc_core::numerics::{fista_solve, lbfgs_minimize, BoxedFunction, CompositeQp, DualScalar};
use ttdioc_core::slidingwindow::{kf_estimate, SlidingWindowConfig};
use ttdioc_core::{
    ConstraintSet, FeatureVector, FocpOptions, FocpProblem, SystemKind, SystemModel,
    TrajectorySegment, TrigTimeModel, TruthProfile,
};

fn spring1_m1() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        benchmark_dataset(&DataPlan::spring1(), TruthProfile::ThetaM1, &FocpOptions::default())
            .unwrap()
    })
}

fn system() -> impl Strategy<Value = SystemKind> {
    prop_oneof![
        Just(SystemKind::Spring1),
        Just(SystemKind::Spring3),
        Just(SystemKind::Pendulum2)
    ]
}

fn trig_model(e: usize, q: usize) -> impl Strategy<Value = TrigTimeModel> {
    (
        prop::collection::vec(0.1f64..4.0, e),
        prop::collection::vec(-3.0f64..3.0, (2 * e + 1) * q),
    )
        .prop_map(move |(w, a)| {
            TrigTimeModel::new(w, DMatrix::from_row_slice(2 * e + 1, q, &a)).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_jacobian_matches_finite_differences(
        kind in system(),
        raw in prop::collection::vec(-0.5f64..0.5, 9),
    ) {
        let model = SystemModel::with_defaults(kind, 0.1).unwrap();
        let (n, m) = kind.dims();
        let (x, u) = (&raw[..n], &raw[n..n + m]);
        let (_, a, b) = model.step_jacobian(x, u).unwrap();
        for i in 0..n {
            let fx = fd_gradient(|v| model.step(v, u).unwrap()[i], x, 1e-6);
            let fu = fd_gradient(|v| model.step(x, v).unwrap()[i], u, 1e-6);
            let ax: Vec<f64> = a.row(i).iter().copied().collect();
            let bu: Vec<f64> = b.row(i).iter().copied().collect();
            prop_assert!(relative_error(&ax, &fx, 1.0) <= 1e-6);
            prop_assert!(relative_error(&bu, &fu, 1.0) <= 1e-6);
        }
    }

    #[test]
    fn lagrangian_gradient_matches_finite_differences(
        kind in system(),
        raw in prop::collection::vec(-0.5f64..0.5, 4 + 4 + 2 * 8),
        t0 in 0.0f64..6.0,
    ) {
        let model = SystemModel::with_defaults(kind, 0.1).unwrap();
        let (n, m) = kind.dims();
        let horizon = 8;
        let truth = TruthTheta::new(kind, TruthProfile::ThetaM1);
        let x0: Vec<f64> = raw.iter().cycle().take(n).copied().collect();
        let ups: Vec<f64> = raw.iter().skip(4).cycle().take(n).copied().collect();
        let flat: Vec<f64> = raw.iter().skip(8).cycle().take(horizon * m).copied().collect();
        let problem = FocpProblem {
            model,
            features: FeatureVector::for_system(kind),
            theta: &truth,
            constraints: ConstraintSet::none(),
            x0,
            xn: vec![0.0; n],
            t0,
            horizon,
        };
        let lambda = vec![Vec::new(); horizon];
        let value = |u: &[f64]| {
            let inputs: Vec<Vec<f64>> = u.chunks(m).map(<[f64]>::to_vec).collect();
            lagrangian_gradient(&problem, &inputs, &lambda, &ups).unwrap().0
        };
        let inputs: Vec<Vec<f64>> = flat.chunks(m).map(<[f64]>::to_vec).collect();
        let (_, grad) = lagrangian_gradient(&problem, &inputs, &lambda, &ups).unwrap();
        let fd = fd_gradient(value, &flat, 1e-6);
        prop_assert!(relative_error(&grad, &fd, 1.0) <= 1e-6);
    }

    #[test]
    fn theta_is_linear_in_coefficients(
        a in trig_model(2, 3),
        b in prop::collection::vec(-3.0f64..3.0, 15),
        t in -10.0f64..10.0,
    ) {
        let other = TrigTimeModel::new(a.frequencies.clone(), DMatrix::from_row_slice(5, 3, &b)).unwrap();
        let sum = TrigTimeModel::new(a.frequencies.clone(), &a.coefficients + &other.coefficients).unwrap();
        let lhs = sum.theta_of_t(t);
        let rhs: Vec<f64> = a.theta_of_t(t).iter().zip(other.theta_of_t(t)).map(|(x, y)| x + y).collect();
        for (x, y) in lhs.iter().zip(&rhs) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn commensurate_model_is_2pi_periodic(a in trig_model(2, 2), t in -5.0f64..5.0) {
        let m = TrigTimeModel::new(vec![2.0, 3.0], a.coefficients).unwrap();
        let p = 2.0 * std::f64::consts::PI;
        for (x, y) in m.theta_of_t(t).iter().zip(m.theta_of_t(t + p)) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn stage_cost_is_nonnegative_for_nonnegative_weights(
        theta in prop::collection::vec(0.0f64..10.0, 9),
        xu in prop::collection::vec(-5.0f64..5.0, 9),
    ) {
        let f = FeatureVector::for_system(SystemKind::Spring3);
        prop_assert!(stage_cost(&theta, &f, &xu[..6], &xu[6..]) >= 0.0);
    }

    #[test]
    fn spring_rollouts_superpose(
        x1 in prop::collection::vec(-1.0f64..1.0, 6),
        x2 in prop::collection::vec(-1.0f64..1.0, 6),
        u1 in prop::collection::vec(-1.0f64..1.0, 30),
        u2 in prop::collection::vec(-1.0f64..1.0, 30),
    ) {
        let model = SystemModel::with_defaults(SystemKind::Spring3, 0.1).unwrap();
        let chunks = |u: &[f64]| u.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        let ra = model.rollout_f64(&x1, &chunks(&u1)).unwrap();
        let rb = model.rollout_f64(&x2, &chunks(&u2)).unwrap();
        let rs = model.rollout_f64(&sum(&x1, &x2), &chunks(&sum(&u1, &u2))).unwrap();
        for k in 0..rs.len() {
            for ((a, b), s) in ra[k].iter().zip(&rb[k]).zip(&rs[k]) {
                prop_assert!((a + b - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fista_meets_optimality_conditions(
        raw in prop::collection::vec(-1.0f64..1.0, 6 * 8),
        c in prop::collection::vec(-2.0f64..2.0, 6),
        kinds in prop::collection::vec(0u8..4, 6),
    ) {
        let j = DMatrix::from_row_slice(8, 6, &raw);
        let q = j.transpose() * &j + DMatrix::identity(6, 6) * 1e-3;
        let mut qp = CompositeQp::plain(q.clone(), DVector::from_vec(c));
        for (k, kind) in kinds.iter().enumerate() {
            match kind {
                1 => qp.l1[k] = 0.3,
                2 => qp.nonneg[k] = true,
                3 => qp.fixed[k] = Some(0.25),
                _ => {}
            }
        }
        let out = fista_solve(&qp, 1e-10, 20_000).unwrap();
        prop_assert!(out.converged);
        let g = &q * &out.z + &qp.c;
        let tol = 1e-7;
        for k in 0..6 {
            let (z, gk) = (out.z[k], g[k]);
            match kinds[k] {
                0 => prop_assert!(gk.abs() <= tol, "free {k}: {gk}"),
                1 => {
                    if z == 0.0 {
                        prop_assert!(gk.abs() <= 0.3 + tol);
                    } else {
                        prop_assert!((gk + 0.3 * z.signum()).abs() <= tol);
                    }
                }
                2 => {
                    prop_assert!(z >= 0.0);
                    if z == 0.0 {
                        prop_assert!(gk >= -tol);
                    } else {
                        prop_assert!(gk.abs() <= tol);
                    }
                }
                _ => prop_assert_eq!(z, 0.25),
            }
        }
    }

    #[test]
    fn lbfgs_trace_never_increases(
        center in prop::collection::vec(-2.0f64..2.0, 4),
        start in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let f = BoxedFunction::from_dual(4, move |x: &[DualScalar]| {
            let mut acc = DualScalar::constant(0.0);
            for (k, xi) in x.iter().enumerate() {
                let d = xi.clone() - center[k];
                acc = acc + d.clone() * &d * (k as f64 + 1.0) + (d * 0.5).cos() * 0.1;
            }
            acc
        });
        let out = lbfgs_minimize(&f, &start, 1e-9, 500).unwrap();
        prop_assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn validation_error_is_symmetric_and_zero_on_equality(
        a in prop::collection::vec(-1.0f64..1.0, 15),
        b in prop::collection::vec(-1.0f64..1.0, 15),
    ) {
        let seg = |v: &[f64]| TrajectorySegment {
            system: SystemKind::Spring1,
            ts: 0.1,
            n: 4,
            t_start: 0.0,
            states: v[..10].chunks(2).map(<[f64]>::to_vec).collect(),
            inputs: v[10..14].chunks(1).map(<[f64]>::to_vec).collect(),
            profile: "p".into(),
            seed: 0,
        };
        let (sa, sb) = (seg(&a), seg(&b));
        let ab = validation_error(slice::from_ref(&sa), slice::from_ref(&sb)).unwrap();
        let ba = validation_error(slice::from_ref(&sb), slice::from_ref(&sa)).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(validation_error(slice::from_ref(&sa), slice::from_ref(&sa)).unwrap(), 0.0);
    }

    #[test]
    fn report_round_trips(per in prop::collection::vec(prop_oneof![0.0f64..1e3, Just(f64::INFINITY)], 1..6)) {
        let report = ValidationReport {
            e_v: per.iter().sum::<f64>() / per.len() as f64,
            per_segment: per,
            failures: vec!["segment 0: diverged".into()],
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: ValidationReport = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, report);
    }

    #[test]
    fn omega_tuples_are_sorted_combinations(lo in 0.1f64..1.0, points in 1usize..7, e in 1usize..4) {
        prop_assume!(e <= points);
        let grid = GridSpec::new(lo, lo + 0.5 * (points - 1) as f64, 0.5);
        let tuples = omega_tuples(&grid, e).unwrap();
        let binom = (0..e).fold(1usize, |acc, k| acc * (points - k) / (k + 1));
        prop_assert_eq!(tuples.len(), binom);
        for t in &tuples {
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert!(tuples.windows(2).all(|w| w[0] < w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn frequency_gradient_matches_finite_differences(
        w in prop::collection::vec(0.3f64..3.5, 2),
        a in prop::collection::vec(-2.0f64..2.0, 15),
        ups in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let ds = spring1_m1();
        let ctx = DataPlan::spring1().context().unwrap();
        let sens: Vec<_> = ds.train.iter().take(3).map(|s| sensitivities(&ctx, s).unwrap()).collect();
        let coef = DMatrix::from_row_slice(5, 3, &a);
        let mult: Vec<(Vec<f64>, Vec<f64>)> = sens.iter().map(|_| (ups.clone(), Vec::new())).collect();
        let (_, g) = frequency_objective(&sens, &w, &coef, &mult);
        let fd = fd_gradient(|v| frequency_objective(&sens, v, &coef, &mult).0, &w, 1e-6);
        prop_assert!(relative_error(&g, &fd, 1.0) <= 1e-6, "{g:?} vs {fd:?}");
    }

    #[test]
    fn kf_covariance_stays_positive_definite(
        window in 3usize..20,
        q in 1e-6f64..1.0,
        r in 1e-6f64..1e-1,
        p0 in 1e-2f64..1e2,
    ) {
        let ds = spring1_m1();
        let ctx = DataPlan::spring1().context().unwrap();
        let cfg = SlidingWindowConfig {
            window,
            process_noise: q,
            measurement_noise: r,
            initial_covariance: p0,
            anchor: 7.0,
        };
        let est = kf_estimate(&ctx, &ds.train, &cfg).unwrap();
        prop_assert!(est.min_covariance_eigenvalue > 0.0);
        prop_assert!(est.thetas.iter().flatten().all(|v| v.is_finite()));
    }
}
