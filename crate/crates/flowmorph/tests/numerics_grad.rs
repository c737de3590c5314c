//! Gradient correctness: every loss used by the artifact, end to end,
//! against central finite differences; and forward-mode against reverse-mode.

use flowmorph::flowfield::{
    FlowMode, FlowModel, LatentCode, SignMode, SymmetryMode, TapedCode, TapedModel,
};
use flowmorph::geometry::SpatialIndex;
use flowmorph::numerics::{
    backprop_scalar, spatial_jacobian, Activation, MlpParams, Tape, TapedMlp,
};
use flowmorph::odeint::{array_to_points, rk4_on_tape};
use flowmorph::training::{chamfer_sq_on_tape, vertex_l2_on_tape, EdgeBatch};
use flowmorph::toy;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;

/// Max |ad - fd| over max |fd|, with central differences of `loss_of` taken
/// at every backbone parameter and every latent entry.
fn max_rel_error_vs_fd(
    model: &FlowModel,
    z: &LatentCode,
    loss_of: &dyn Fn(&FlowModel, &LatentCode) -> f64,
    grads_of: &dyn Fn(&FlowModel, &LatentCode) -> (Vec<(Array2<f64>, ndarray::Array1<f64>)>, Vec<f64>),
) -> f64 {
    let (layer_grads, z_grad) = grads_of(model, z);
    let mut max_fd: f64 = 0.0;
    let mut max_err: f64 = 0.0;
    for (l, (gw, gb)) in layer_grads.iter().enumerate() {
        for i in 0..gw.nrows() {
            for j in 0..gw.ncols() {
                let mut pp = model.clone();
                pp.backbone.layers[l].weight[[i, j]] += FD_H;
                let mut pm = model.clone();
                pm.backbone.layers[l].weight[[i, j]] -= FD_H;
                let fd = (loss_of(&pp, z) - loss_of(&pm, z)) / (2.0 * FD_H);
                max_fd = max_fd.max(fd.abs());
                max_err = max_err.max((gw[[i, j]] - fd).abs());
            }
        }
        for j in 0..gb.len() {
            let mut pp = model.clone();
            pp.backbone.layers[l].bias[j] += FD_H;
            let mut pm = model.clone();
            pm.backbone.layers[l].bias[j] -= FD_H;
            let fd = (loss_of(&pp, z) - loss_of(&pm, z)) / (2.0 * FD_H);
            max_fd = max_fd.max(fd.abs());
            max_err = max_err.max((gb[j] - fd).abs());
        }
    }
    for d in 0..z.dim() {
        let mut zp = z.clone();
        zp.0[d] += FD_H;
        let mut zm = z.clone();
        zm.0[d] -= FD_H;
        let fd = (loss_of(model, &zp) - loss_of(model, &zm)) / (2.0 * FD_H);
        max_fd = max_fd.max(fd.abs());
        max_err = max_err.max((z_grad[d] - fd).abs());
    }
    max_err / max_fd.max(1e-12)
}

fn small_model(mode: FlowMode, symmetry: SymmetryMode, seed: u64) -> (FlowModel, LatentCode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FlowModel::init(
        4,
        8,
        Activation::Elu,
        mode,
        symmetry,
        SignMode::HubRule,
        &mut rng,
    )
    .unwrap();
    let z = LatentCode((0..4).map(|_| rng.gen_range(-0.3..0.3)).collect());
    (model, z)
}

fn fixture_points(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, 3), |_| rng.gen_range(-0.4..0.4))
}

#[test]
fn chamfer_through_integration_gradients_match_fd() {
    for (mode, symmetry) in [
        (FlowMode::Direct, SymmetryMode::Off),
        (FlowMode::DivergenceFree, SymmetryMode::Off),
        (FlowMode::Direct, SymmetryMode::PlaneYz),
    ] {
        let (model, z) = small_model(mode, symmetry, 11);
        let points = fixture_points(12, 12);
        let target = fixture_points(12, 13);
        let target_index = SpatialIndex::build(&array_to_points(&target));
        let hub = LatentCode::hub(4);

        let run = |m: &FlowModel, zz: &LatentCode, want_grads: bool| {
            let mut tape = Tape::new();
            let taped = TapedModel::register(&mut tape, m, true).unwrap();
            let from = TapedCode::variable(&mut tape, zz);
            let to = TapedCode::constant(&mut tape, &hub);
            let path = taped.path(&mut tape, &from, &to).unwrap();
            let x0 = tape.constant(points.clone());
            let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), 5);
            let loss = chamfer_sq_on_tape(&mut tape, x1, &target, &target_index);
            let value = tape.scalar(loss);
            if !want_grads {
                return (value, Vec::new(), Vec::new());
            }
            let grads = backprop_scalar(&mut tape, loss).unwrap();
            let layer_grads = taped.backbone_grads(&grads);
            let zg = grads.dense(from.id, (1, 4)).into_raw_vec_and_offset().0;
            (value, layer_grads, zg)
        };

        let rel = max_rel_error_vs_fd(
            &model,
            &z,
            &|m, zz| run(m, zz, false).0,
            &|m, zz| {
                let (_, lg, zg) = run(m, zz, true);
                (lg, zg)
            },
        );
        assert!(rel < 1e-4, "{mode:?}/{symmetry:?}: rel {rel}");
    }
}

#[test]
fn edge_regularizer_gradients_match_fd() {
    let (model, z) = small_model(FlowMode::Direct, SymmetryMode::Off, 21);
    let mesh = toy::unit_cube();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (batch, rows) = EdgeBatch::build(&mesh, 2000, &mut rng);
    let verts = flowmorph::odeint::points_to_array(
        &rows.iter().map(|&v| mesh.vertices[v]).collect::<Vec<_>>(),
    );
    let hub = LatentCode::hub(4);

    let run = |m: &FlowModel, zz: &LatentCode, want_grads: bool| {
        let mut tape = Tape::new();
        let taped = TapedModel::register(&mut tape, m, true).unwrap();
        let from = TapedCode::variable(&mut tape, zz);
        let to = TapedCode::constant(&mut tape, &hub);
        let path = taped.path(&mut tape, &from, &to).unwrap();
        let x0 = tape.constant(verts.clone());
        let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), 4);
        let loss = batch.loss_on_tape(&mut tape, x1);
        let value = tape.scalar(loss);
        if !want_grads {
            return (value, Vec::new(), Vec::new());
        }
        let grads = backprop_scalar(&mut tape, loss).unwrap();
        let layer_grads = taped.backbone_grads(&grads);
        let zg = grads.dense(from.id, (1, 4)).into_raw_vec_and_offset().0;
        (value, layer_grads, zg)
    };

    let rel = max_rel_error_vs_fd(
        &model,
        &z,
        &|m, zz| run(m, zz, false).0,
        &|m, zz| {
            let (_, lg, zg) = run(m, zz, true);
            (lg, zg)
        },
    );
    assert!(rel < 1e-4, "rel {rel}");
}

#[test]
fn vertex_l2_gradients_match_fd() {
    let (model, z) = small_model(FlowMode::DivergenceFree, SymmetryMode::PlaneYz, 31);
    let points = fixture_points(10, 32);
    let target = fixture_points(10, 33);
    let hub = LatentCode::hub(4);

    let run = |m: &FlowModel, zz: &LatentCode, want_grads: bool| {
        let mut tape = Tape::new();
        let taped = TapedModel::register(&mut tape, m, true).unwrap();
        let from = TapedCode::constant(&mut tape, &hub);
        let to = TapedCode::variable(&mut tape, zz);
        let path = taped.path(&mut tape, &from, &to).unwrap();
        let x0 = tape.constant(points.clone());
        let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), 5);
        let loss = vertex_l2_on_tape(&mut tape, x1, &target);
        let value = tape.scalar(loss);
        if !want_grads {
            return (value, Vec::new(), Vec::new());
        }
        let grads = backprop_scalar(&mut tape, loss).unwrap();
        let layer_grads = taped.backbone_grads(&grads);
        let zg = grads.dense(to.id, (1, 4)).into_raw_vec_and_offset().0;
        (value, layer_grads, zg)
    };

    let rel = max_rel_error_vs_fd(
        &model,
        &z,
        &|m, zz| run(m, zz, false).0,
        &|m, zz| {
            let (_, lg, zg) = run(m, zz, true);
            (lg, zg)
        },
    );
    assert!(rel < 1e-4, "rel {rel}");
}

#[test]
fn odd_sign_network_gradients_match_fd() {
    // Pairwise (non-hub) path: gradients must flow through the sign net and
    // the normalized latent direction.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let model = FlowModel::init(
        3,
        6,
        Activation::Elu,
        FlowMode::Direct,
        SymmetryMode::Off,
        SignMode::OddMlp,
        &mut rng,
    )
    .unwrap();
    let z_i = LatentCode(vec![0.2, -0.1, 0.3]);
    let z_j = LatentCode(vec![-0.25, 0.15, 0.05]);
    let points = fixture_points(8, 42);
    let target = fixture_points(8, 43);

    let loss_of = |m: &FlowModel, zi: &LatentCode, zj: &LatentCode| -> f64 {
        let mut tape = Tape::new();
        let taped = TapedModel::register(&mut tape, m, true).unwrap();
        let from = TapedCode::variable(&mut tape, zi);
        let to = TapedCode::variable(&mut tape, zj);
        let path = taped.path(&mut tape, &from, &to).unwrap();
        let x0 = tape.constant(points.clone());
        let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), 4);
        let loss = vertex_l2_on_tape(&mut tape, x1, &target);
        tape.scalar(loss)
    };

    let mut tape = Tape::new();
    let taped = TapedModel::register(&mut tape, &model, true).unwrap();
    let from = TapedCode::variable(&mut tape, &z_i);
    let to = TapedCode::variable(&mut tape, &z_j);
    let path = taped.path(&mut tape, &from, &to).unwrap();
    let x0 = tape.constant(points.clone());
    let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), 4);
    let loss = vertex_l2_on_tape(&mut tape, x1, &target);
    let grads = backprop_scalar(&mut tape, loss).unwrap();
    let sign_grads = taped.sign_grads(&grads).unwrap();
    let zi_grad = grads.dense(from.id, (1, 3)).into_raw_vec_and_offset().0;
    let zj_grad = grads.dense(to.id, (1, 3)).into_raw_vec_and_offset().0;

    let mut max_fd: f64 = 0.0;
    let mut max_err: f64 = 0.0;
    // Sign-net weights.
    for (l, (gw, _)) in sign_grads.iter().enumerate() {
        for i in 0..gw.nrows() {
            for j in 0..gw.ncols() {
                let mut pp = model.clone();
                pp.sign_net.as_mut().unwrap().layers[l].weight[[i, j]] += FD_H;
                let mut pm = model.clone();
                pm.sign_net.as_mut().unwrap().layers[l].weight[[i, j]] -= FD_H;
                let fd = (loss_of(&pp, &z_i, &z_j) - loss_of(&pm, &z_i, &z_j)) / (2.0 * FD_H);
                max_fd = max_fd.max(fd.abs());
                max_err = max_err.max((gw[[i, j]] - fd).abs());
            }
        }
    }
    // Latents on both ends.
    for d in 0..3 {
        let mut zp = z_i.clone();
        zp.0[d] += FD_H;
        let mut zm = z_i.clone();
        zm.0[d] -= FD_H;
        let fd = (loss_of(&model, &zp, &z_j) - loss_of(&model, &zm, &z_j)) / (2.0 * FD_H);
        max_fd = max_fd.max(fd.abs());
        max_err = max_err.max((zi_grad[d] - fd).abs());

        let mut zp = z_j.clone();
        zp.0[d] += FD_H;
        let mut zm = z_j.clone();
        zm.0[d] -= FD_H;
        let fd = (loss_of(&model, &z_i, &zp) - loss_of(&model, &z_i, &zm)) / (2.0 * FD_H);
        max_fd = max_fd.max(fd.abs());
        max_err = max_err.max((zj_grad[d] - fd).abs());
    }
    let rel = max_err / max_fd.max(1e-12);
    assert!(rel < 1e-4, "rel {rel}");
}

#[test]
fn forward_and_reverse_mode_agree_on_spatial_derivatives() {
    // For each scalar output s_a, the reverse-mode d s_a / d x row must match
    // the forward-mode Jacobian row to 1e-12.
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let params = MlpParams::glorot(&[6, 12, 8, 3], Activation::Elu, &mut rng);
    let point = [0.15, -0.28, 0.4];
    let cond = [0.3, -0.2, 0.1];
    let jac = spatial_jacobian(&params, &point, &cond).unwrap();

    for a in 0..3 {
        let mut tape = Tape::new();
        let mlp = TapedMlp::register(&mut tape, &params, false, false);
        let mut input = point.to_vec();
        input.extend_from_slice(&cond);
        let x = tape.variable_row(&input);
        let out = mlp.forward(&mut tape, x);
        // Select output a as a scalar via a dot with a basis row.
        let mut basis = vec![0.0; 3];
        basis[a] = 1.0;
        let e = tape.constant_row(&basis);
        let picked = tape.mul(out, e);
        let s = tape.sum(picked);
        let grads = backprop_scalar(&mut tape, s).unwrap();
        let gx = grads.dense(x, (1, 6));
        for b in 0..3 {
            assert!(
                (gx[[0, b]] - jac[a][b]).abs() < 1e-12,
                "row {a} col {b}: {} vs {}",
                gx[[0, b]],
                jac[a][b]
            );
        }
    }
}

#[test]
fn constant_flow_gradient_matches_closed_form() {
    // Rig a "network" computing a constant velocity c (bias-only head).
    // x(1) = x0 + c, loss = |x(1) - target|^2, so d loss / d c =
    // 2 (x0 + c - target) summed over points.
    let mut model = FlowModel {
        backbone: MlpParams::zeros(&FlowModel::backbone_widths(2, 2), Activation::Elu),
        sign_net: None,
        mode: FlowMode::Direct,
        symmetry: SymmetryMode::Off,
        sign_mode: SignMode::HubRule,
        latent_dim: 2,
        n_f: 2,
    };
    let c = [0.3, -0.2, 0.12];
    let head = model.backbone.layers.last_mut().unwrap();
    for (j, v) in c.iter().enumerate() {
        head.bias[j] = *v;
    }
    // Unit-magnitude latent path so the magnitude factor is exactly 1.
    let z = LatentCode(vec![1.0, 0.0]);
    let hub = LatentCode::hub(2);

    let points = fixture_points(6, 61);
    let target = fixture_points(6, 62);

    let mut tape = Tape::new();
    let taped = TapedModel::register(&mut tape, &model, true).unwrap();
    let from = TapedCode::constant(&mut tape, &z);
    let to = TapedCode::constant(&mut tape, &hub);
    let path = taped.path(&mut tape, &from, &to).unwrap();
    let x0 = tape.constant(points.clone());
    let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), 5);
    let t = tape.constant(target.clone());
    let diff = tape.sub(x1, t);
    let loss = tape.frob_sq(diff);
    let grads = backprop_scalar(&mut tape, loss).unwrap();
    let layer_grads = taped.backbone_grads(&grads);
    let head_bias_grad = &layer_grads.last().unwrap().1;

    for j in 0..3 {
        let expected: f64 = (0..6)
            .map(|r| 2.0 * (points[[r, j]] + c[j] - target[[r, j]]))
            .sum();
        assert!(
            (head_bias_grad[j] - expected).abs() < 1e-10,
            "coord {j}: {} vs {expected}",
            head_bias_grad[j]
        );
    }
}
