mod common;

use common::lqr_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttdioc_core::costmodel::TruthTheta;
use ttdioc_core::focp::solve_forward;
use ttdioc_core::{
    ConstraintSet, FeatureVector, FocpOptions, FocpProblem, SystemKind, SystemModel, TruthProfile,
};

fn check(kind: SystemKind, profile: TruthProfile, horizon: usize, seed: u64) {
    let model = SystemModel::with_defaults(kind, 0.1).unwrap();
    let truth = TruthTheta::new(kind, profile);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.state_dim();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t0 = rng.random_range(0.0..5.0);
    let problem = FocpProblem {
        model: model.clone(),
        features: FeatureVector::for_system(kind),
        theta: &truth,
        constraints: ConstraintSet::none(),
        x0: x0.clone(),
        xn: vec![0.0; n],
        t0,
        horizon,
    };
    let sol = solve_forward(&problem, &FocpOptions::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.terminal_residual <= 1e-8, "{}", sol.terminal_residual);
    let oracle = lqr_oracle(&model, &truth, &x0, t0, horizon);
    let worst = sol
        .inputs
        .iter()
        .flatten()
        .zip(oracle.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(worst <= 1e-6, "{kind:?} {profile:?}: max |dU| = {worst:e}");
}

#[test]
fn spring1_matches_the_kkt_oracle() {
    for seed in 0..4 {
        check(SystemKind::Spring1, TruthProfile::Constant { value: 3.0 }, 30, seed);
        check(SystemKind::Spring1, TruthProfile::ThetaM1, 30, seed + 10);
    }
}

#[test]
fn spring3_matches_the_kkt_oracle() {
    check(SystemKind::Spring3, TruthProfile::ThetaM1, 60, 1);
    check(SystemKind::Spring3, TruthProfile::ThetaM3, 40, 2);
}

#[test]
fn oracle_satisfies_its_own_terminal_constraint() {
    let model = SystemModel::with_defaults(SystemKind::Spring1, 0.1).unwrap();
    let truth = TruthTheta::new(SystemKind::Spring1, TruthProfile::ThetaM2);
    let u = lqr_oracle(&model, &truth, &[0.4, -0.2], 0.0, 25);
    let states = model.rollout_f64(&[0.4, -0.2], &u).unwrap();
    let last = states.last().unwrap();
    assert!(last.iter().all(|v| v.abs() < 1e-10), "{last:?}");
}
