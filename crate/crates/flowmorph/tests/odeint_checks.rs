//! Integration checks: structural invertibility, path consistency, and the
//! differentiable-integrator contract.

use flowmorph::flowfield::{
    FlowMode, FlowModel, LatentCode, PairContext, SignMode, SymmetryMode,
};
use flowmorph::numerics::Activation;
use flowmorph::odeint::{
    deform, deform_partial, deform_trajectory, export_trajectory, integrate_with_grad, OdeConfig,
    OdeError,
};
use flowmorph::toy;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(seed: u64) -> (FlowModel, LatentCode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FlowModel::init(
        8,
        16,
        Activation::Elu,
        FlowMode::Direct,
        SymmetryMode::Off,
        SignMode::HubRule,
        &mut rng,
    )
    .unwrap();
    let z = LatentCode((0..8).map(|_| rng.gen_range(-0.3..0.3)).collect());
    (model, z)
}

fn random_points(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, 3), |_| rng.gen_range(-0.5..0.5))
}

fn max_row_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..a.nrows() {
        let d = ((a[[r, 0]] - b[[r, 0]]).powi(2)
            + (a[[r, 1]] - b[[r, 1]]).powi(2)
            + (a[[r, 2]] - b[[r, 2]]).powi(2))
        .sqrt();
        worst = worst.max(d);
    }
    worst
}

#[test]
fn identity_pair_is_bitwise_for_both_solvers() {
    let (model, z) = random_model(1);
    let ctx = PairContext::new(z.clone(), z);
    let points = random_points(40, 2);
    for cfg in [OdeConfig::rk4(5), OdeConfig::dopri5(1e-6, 1e-6)] {
        let out = deform(&model, &ctx, &points, &cfg).unwrap();
        assert_eq!(out, points);
    }
}

#[test]
fn round_trip_through_hub_recovers_points() {
    let (model, z) = random_model(3);
    let fwd = PairContext::new(z.clone(), LatentCode::hub(8));
    let bwd = fwd.reversed();
    let points = random_points(100, 4);
    let cfg = OdeConfig::dopri5(1e-8, 1e-8);
    let there = deform(&model, &fwd, &points, &cfg).unwrap();
    let back = deform(&model, &bwd, &there, &cfg).unwrap();
    let err = max_row_distance(&back, &points);
    assert!(err < 1e-6, "round-trip displacement {err}");
    // Point count and order never change.
    assert_eq!(there.nrows(), points.nrows());
}

#[test]
fn half_way_consistency_matches_retargeted_path() {
    // Integrating the (i -> j) flow to t = alpha must land where the full
    // (i -> k) path lands when z_k = z_i + alpha (z_j - z_i).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = FlowModel::init(
        6,
        12,
        Activation::Elu,
        FlowMode::Direct,
        SymmetryMode::Off,
        SignMode::OddMlp,
        &mut rng,
    )
    .unwrap();
    let z_i = LatentCode((0..6).map(|_| rng.gen_range(-0.3..0.3)).collect());
    let z_j = LatentCode((0..6).map(|_| rng.gen_range(-0.3..0.3)).collect());
    let alpha = 0.5;
    let ij = PairContext::new(z_i.clone(), z_j.clone());
    let z_k = LatentCode(ij.conditioning(alpha));
    let ik = PairContext::new(z_i, z_k);

    let points = random_points(25, 6);
    let cfg = OdeConfig::dopri5(1e-9, 1e-9);
    let partial = deform_partial(&model, &ij, &points, &cfg, alpha).unwrap();
    let full = deform(&model, &ik, &points, &cfg).unwrap();
    let err = max_row_distance(&partial, &full);
    assert!(err < 1e-6, "consistency gap {err}");
}

#[test]
fn rk4_round_trip_error_shrinks_with_step_doubling() {
    let (model, z) = random_model(7);
    let fwd = PairContext::new(z, LatentCode::hub(8));
    let bwd = fwd.reversed();
    let points = random_points(50, 8);
    let mut errors = Vec::new();
    for steps in [5, 10, 20, 40] {
        let cfg = OdeConfig::rk4(steps);
        let there = deform(&model, &fwd, &points, &cfg).unwrap();
        let back = deform(&model, &bwd, &there, &cfg).unwrap();
        errors.push(max_row_distance(&back, &points));
    }
    for w in errors.windows(2) {
        assert!(w[1] < w[0], "errors not monotone: {errors:?}");
    }
}

#[test]
fn training_gradients_refuse_dopri5() {
    let (model, z) = random_model(9);
    let hub = LatentCode::hub(8);
    let points = random_points(4, 10);
    let err = integrate_with_grad(
        &model,
        &z,
        &hub,
        &points,
        &OdeConfig::dopri5(1e-4, 1e-4),
        |tape, x| tape.frob_sq(x),
    )
    .unwrap_err();
    assert!(matches!(err, OdeError::TrainingNeedsRk4));
}

#[test]
fn integrate_with_grad_identity_pair_has_zero_backbone_gradient() {
    let (model, z) = random_model(11);
    let points = random_points(6, 12);
    // Chamfer-to-self through a zero-length latent path: loss 0, suppressed
    // gradients (the magnitude factor is identically zero).
    let (value, grads) = integrate_with_grad(
        &model,
        &z,
        &z.clone(),
        &points,
        &OdeConfig::rk4(4),
        |tape, x| {
            let target = tape.constant(points.clone());
            let diff = tape.sub(x, target);
            tape.frob_sq(diff)
        },
    )
    .unwrap();
    assert_eq!(value, 0.0);
    for (gw, gb) in &grads.backbone {
        assert!(gw.iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn trajectory_spans_unit_time_and_exports() {
    let (model, z) = random_model(13);
    let ctx = PairContext::new(z, LatentCode::hub(8));
    let sphere = toy::icosphere(1, 0.4);
    let points = flowmorph::odeint::points_to_array(&sphere.vertices);
    let traj = deform_trajectory(&model, &ctx, &points, &OdeConfig::rk4(6)).unwrap();
    assert_eq!(traj.times[0], 0.0);
    assert_eq!(*traj.times.last().unwrap(), 1.0);
    for s in &traj.states {
        assert_eq!(s.nrows(), points.nrows());
    }

    let dir = tempfile::tempdir().unwrap();
    let index_path = export_trajectory(&traj, &sphere, dir.path()).unwrap();
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(index_path).unwrap()).unwrap();
    assert_eq!(index["times"].as_array().unwrap().len(), traj.states.len());
    assert_eq!(index["volumes"].as_array().unwrap().len(), traj.states.len());
    assert!(dir.path().join("frame_0000.obj").exists());
    assert!(dir
        .path()
        .join(format!("frame_{:04}.obj", traj.states.len() - 1))
        .exists());
}
