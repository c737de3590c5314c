//! Runtime verification of the flow-field guarantees.
//!
//! Self-contained: builds random models and toy meshes from the seed and
//! checks every structural property at its pinned tolerance — identity
//! preservation, path negation, exact and finite-difference divergence,
//! mirror symmetry, round-trip residuals, RK4 convergence order, volume
//! drift under a divergence-free flow, and end-to-end gradients against
//! central finite differences.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::flowfield::{
    divergence, eval_flow, eval_flow_batch, inner_field_batch, FlowError, FlowMode, FlowModel,
    LatentCode, PairContext, SignMode, SymmetryMode, TapedCode, TapedModel,
};
use crate::geometry::{signed_volume, Vec3};
use crate::numerics::{Activation, Tape};
use crate::odeint::{deform, deform_snapshots, points_to_array, rk4_on_tape, OdeConfig};
use crate::toy;
use crate::training::chamfer_sq_on_tape;

/// Sample counts for the property checks.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VerifySizes {
    pub divergence_points: usize,
    pub fd_divergence_points: usize,
    pub negation_samples: usize,
    pub symmetry_samples: usize,
    pub roundtrip_points: usize,
}

impl Default for VerifySizes {
    fn default() -> Self {
        VerifySizes {
            divergence_points: 1000,
            fd_divergence_points: 200,
            negation_samples: 10_000,
            symmetry_samples: 10_000,
            roundtrip_points: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    /// Measured value (usually a max residual).
    pub value: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub sizes: VerifySizes,
    pub pass: bool,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    /// Fixed-width human-readable table, one line per property.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<34} {:>6} {:>14} {:>12}\n",
            "property", "pass", "value", "tolerance"
        ));
        for p in &self.properties {
            out.push_str(&format!(
                "{:<34} {:>6} {:>14.6e} {:>12.1e}\n",
                p.name,
                if p.pass { "PASS" } else { "FAIL" },
                p.value,
                p.tolerance
            ));
        }
        out.push_str(&format!(
            "overall: {}\n",
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }
}

fn random_point(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
    )
}

fn random_code(dim: usize, rng: &mut impl Rng) -> LatentCode {
    LatentCode((0..dim).map(|_| rng.gen_range(-0.3..0.3)).collect())
}

fn model_with(
    mode: FlowMode,
    symmetry: SymmetryMode,
    sign: SignMode,
    latent_dim: usize,
    n_f: usize,
    rng: &mut impl Rng,
) -> FlowModel {
    FlowModel::init(latent_dim, n_f, Activation::Elu, mode, symmetry, sign, rng)
        .expect("elu models validate")
}

/// Identity preservation: equal codes advect bitwise-identically.
pub fn identity_flow_residual(seed: u64) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = model_with(
        FlowMode::Direct,
        SymmetryMode::Off,
        SignMode::HubRule,
        8,
        16,
        &mut rng,
    );
    let z = random_code(8, &mut rng);
    let ctx = PairContext::new(z.clone(), z);
    let points = Array2::from_shape_fn((64, 3), |_| rng.gen_range(-0.5..0.5));
    let out = deform(&model, &ctx, &points, &OdeConfig::dopri5(1e-6, 1e-6)).unwrap();
    let bitwise = out == points;
    PropertyResult {
        name: "identity_flow_residual".into(),
        pass: bitwise,
        value: if bitwise { 0.0 } else { f64::INFINITY },
        tolerance: 0.0,
        detail: Some(serde_json::json!({"comparison": "bitwise"})),
    }
}

/// Path negation residual across every mode combination.
pub fn negation_residual(seed: u64, samples: usize) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1);
    let mut worst: f64 = 0.0;
    let per_combo = (samples / 8).max(1);
    for mode in [FlowMode::Direct, FlowMode::DivergenceFree] {
        for symmetry in [SymmetryMode::Off, SymmetryMode::PlaneYz] {
            for sign in [SignMode::HubRule, SignMode::OddMlp] {
                let model = model_with(mode, symmetry, sign, 6, 8, &mut rng);
                let (z_i, z_j) = match sign {
                    SignMode::HubRule => (random_code(6, &mut rng), LatentCode::hub(6)),
                    SignMode::OddMlp => (random_code(6, &mut rng), random_code(6, &mut rng)),
                };
                let fwd = PairContext::new(z_i, z_j);
                let bwd = fwd.reversed();
                for _ in 0..per_combo {
                    let x = random_point(&mut rng);
                    let t = rng.gen_range(0.0..1.0);
                    let vf = eval_flow(&model, &fwd, x, t).unwrap();
                    let vb = eval_flow(&model, &bwd, x, 1.0 - t).unwrap();
                    worst = worst.max((vf + vb).norm());
                }
            }
        }
    }
    PropertyResult {
        name: "negation_residual".into(),
        pass: worst < 1e-12,
        value: worst,
        tolerance: 1e-12,
        detail: None,
    }
}

/// Exact-AD divergence of the curl field (plain and symmetrized).
pub fn divergence_residual_ad(seed: u64, points: usize) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2);
    let mut worst: f64 = 0.0;
    for symmetry in [SymmetryMode::Off, SymmetryMode::PlaneYz] {
        let model = model_with(
            FlowMode::DivergenceFree,
            symmetry,
            SignMode::HubRule,
            8,
            16,
            &mut rng,
        );
        for _ in 0..points / 2 {
            let x = random_point(&mut rng);
            let cond: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let div = divergence(&model, x, &cond).unwrap();
            worst = worst.max(div.abs());
        }
    }
    PropertyResult {
        name: "divergence_residual_ad".into(),
        pass: worst < 1e-9,
        value: worst,
        tolerance: 1e-9,
        detail: Some(serde_json::json!({"modes": ["divfree", "divfree+yz"]})),
    }
}

/// Central finite-difference cross-check of the divergence.
pub fn divergence_residual_fd(seed: u64, points: usize) -> PropertyResult {
    // The cross-check runs on a tanh potential: elu is only C1, so a stencil
    // straddling an activation kink would see an O(h) artifact that says
    // nothing about the AD path. tanh is smooth everywhere and the curl
    // construction is identical.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3);
    let model = FlowModel::init(
        8,
        16,
        Activation::Tanh,
        FlowMode::DivergenceFree,
        SymmetryMode::Off,
        SignMode::HubRule,
        &mut rng,
    )
    .expect("tanh models validate");
    let cond: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x = random_point(&mut rng);
        let mut div = 0.0;
        for axis in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let fp = inner_field_batch(&model, &points_to_array(&[xp]), &cond);
            let fm = inner_field_batch(&model, &points_to_array(&[xm]), &cond);
            div += (fp[[0, axis]] - fm[[0, axis]]) / (2.0 * h);
        }
        worst = worst.max(div.abs());
    }
    PropertyResult {
        name: "divergence_residual_fd".into(),
        pass: worst < 1e-5,
        value: worst,
        tolerance: 1e-5,
        detail: Some(serde_json::json!({"h": h})),
    }
}

/// Mirror relation of the plane-symmetrized field.
pub fn symmetry_residual(seed: u64, samples: usize) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4);
    let mut worst: f64 = 0.0;
    for mode in [FlowMode::Direct, FlowMode::DivergenceFree] {
        let model = model_with(mode, SymmetryMode::PlaneYz, SignMode::HubRule, 6, 8, &mut rng);
        let ctx = PairContext::new(random_code(6, &mut rng), LatentCode::hub(6));
        for _ in 0..samples / 2 {
            let x = random_point(&mut rng);
            let t = rng.gen_range(0.0..1.0);
            let v = eval_flow(&model, &ctx, x, t).unwrap();
            let vm = eval_flow(&model, &ctx, Vec3::new(-x.x, x.y, x.z), t).unwrap();
            let mirrored = Vec3::new(-vm.x, vm.y, vm.z);
            worst = worst.max((v - mirrored).norm());
        }
    }
    PropertyResult {
        name: "symmetry_residual".into(),
        pass: worst < 1e-12,
        value: worst,
        tolerance: 1e-12,
        detail: None,
    }
}

/// Round-trip displacement at dopri5 1e-8.
pub fn roundtrip_dopri5(seed: u64, points: usize) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5);
    let model = model_with(
        FlowMode::Direct,
        SymmetryMode::Off,
        SignMode::HubRule,
        8,
        16,
        &mut rng,
    );
    let z = random_code(8, &mut rng);
    let fwd = PairContext::new(z.clone(), LatentCode::hub(8));
    let bwd = fwd.reversed();
    let x0 = Array2::from_shape_fn((points, 3), |_| rng.gen_range(-0.5..0.5));
    let cfg = OdeConfig::dopri5(1e-8, 1e-8);
    let there = deform(&model, &fwd, &x0, &cfg).unwrap();
    let back = deform(&model, &bwd, &there, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for r in 0..points {
        let d = ((back[[r, 0]] - x0[[r, 0]]).powi(2)
            + (back[[r, 1]] - x0[[r, 1]]).powi(2)
            + (back[[r, 2]] - x0[[r, 2]]).powi(2))
        .sqrt();
        worst = worst.max(d);
    }
    PropertyResult {
        name: "roundtrip_dopri5_1e-8".into(),
        pass: worst < 1e-6,
        value: worst,
        tolerance: 1e-6,
        detail: None,
    }
}

/// RK4 round-trip error under step doubling.
pub fn roundtrip_rk4_table(seed: u64, points: usize) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6);
    let model = model_with(
        FlowMode::Direct,
        SymmetryMode::Off,
        SignMode::HubRule,
        8,
        16,
        &mut rng,
    );
    let z = random_code(8, &mut rng);
    let fwd = PairContext::new(z.clone(), LatentCode::hub(8));
    let bwd = fwd.reversed();
    let x0 = Array2::from_shape_fn((points, 3), |_| rng.gen_range(-0.5..0.5));
    let mut errors = Vec::new();
    for steps in [5usize, 10, 20, 40] {
        let cfg = OdeConfig::rk4(steps);
        let there = deform(&model, &fwd, &x0, &cfg).unwrap();
        let back = deform(&model, &bwd, &there, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for r in 0..points {
            let d = ((back[[r, 0]] - x0[[r, 0]]).powi(2)
                + (back[[r, 1]] - x0[[r, 1]]).powi(2)
                + (back[[r, 2]] - x0[[r, 2]]).powi(2))
            .sqrt();
            worst = worst.max(d);
        }
        errors.push(worst);
    }
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    PropertyResult {
        name: "rk4_roundtrip_monotone".into(),
        pass: monotone,
        value: *errors.last().unwrap(),
        tolerance: f64::INFINITY,
        detail: Some(serde_json::json!({"steps": [5, 10, 20, 40], "errors": errors})),
    }
}

/// Observed RK4 convergence order on an analytic problem.
pub fn rk4_order_estimate() -> PropertyResult {
    // Exponential decay has an exact solution; the observed order is the
    // log2 error ratio under step doubling.
    let x0 = Array2::from_elem((1, 1), 1.0);
    let exact = (-1.0f64).exp();
    let flow = |x: &Array2<f64>, _t: f64| -> Result<Array2<f64>, FlowError> { Ok(x.mapv(|v| -v)) };
    let mut errors = Vec::new();
    for steps in [5usize, 10, 20, 40] {
        let traj = crate::odeint::integrate(flow, &x0, (0.0, 1.0), &OdeConfig::rk4(steps)).unwrap();
        errors.push((traj.final_state()[[0, 0]] - exact).abs());
    }
    let mut orders = Vec::new();
    for w in errors.windows(2) {
        orders.push((w[0] / w[1]).log2());
    }
    let estimate = orders.iter().sum::<f64>() / orders.len() as f64;
    PropertyResult {
        name: "rk4_convergence_order".into(),
        pass: (3.5..=4.5).contains(&estimate),
        value: estimate,
        tolerance: 4.5,
        detail: Some(serde_json::json!({"errors": errors, "orders": orders})),
    }
}

/// Volume drift of a closed mesh under a divergence-free flow.
pub fn volume_drift(seed: u64) -> PropertyResult {
    // Divergence-free by construction conserves enclosed volume for any
    // weights; no training needed for the structural property.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7);
    let model = model_with(
        FlowMode::DivergenceFree,
        SymmetryMode::Off,
        SignMode::HubRule,
        6,
        12,
        &mut rng,
    );
    let z = random_code(6, &mut rng);
    let ctx = PairContext::new(z, LatentCode::hub(6));
    let sphere = toy::icosphere(2, 0.35);
    let v0 = signed_volume(&sphere);
    let times: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let traj = deform_snapshots(
        &model,
        &ctx,
        &points_to_array(&sphere.vertices),
        &OdeConfig::dopri5(1e-4, 1e-4),
        &times,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for state in &traj.states {
        let mesh = sphere.with_vertices(crate::odeint::array_to_points(state));
        worst = worst.max(((signed_volume(&mesh) - v0) / v0).abs());
    }
    PropertyResult {
        name: "volume_drift_divfree".into(),
        pass: worst < 0.005,
        value: worst,
        tolerance: 0.005,
        detail: Some(serde_json::json!({"snapshots": times.len()})),
    }
}

/// Full-pipeline gradients against central finite differences.
pub fn gradient_vs_fd(seed: u64) -> PropertyResult {
    // Full pipeline: curl + symmetrizer + RK4 + Chamfer, n_f = 8, 12 points.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x8);
    let model = model_with(
        FlowMode::DivergenceFree,
        SymmetryMode::PlaneYz,
        SignMode::HubRule,
        4,
        8,
        &mut rng,
    );
    let z = random_code(4, &mut rng);
    let hub = LatentCode::hub(4);
    let points = Array2::from_shape_fn((12, 3), |_| rng.gen_range(-0.4..0.4));
    let target = Array2::from_shape_fn((12, 3), |_| rng.gen_range(-0.4..0.4));
    let target_index =
        crate::geometry::SpatialIndex::build(&crate::odeint::array_to_points(&target));
    let steps = 5;

    let loss_for = |model: &FlowModel, z: &LatentCode| -> f64 {
        let mut tape = Tape::new();
        let taped = TapedModel::register(&mut tape, model, true).unwrap();
        let from = TapedCode::variable(&mut tape, z);
        let to = TapedCode::constant(&mut tape, &hub);
        let path = taped.path(&mut tape, &from, &to).unwrap();
        let x0 = tape.constant(points.clone());
        let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), steps);
        let loss = chamfer_sq_on_tape(&mut tape, x1, &target, &target_index);
        tape.scalar(loss)
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let taped = TapedModel::register(&mut tape, &model, true).unwrap();
    let from = TapedCode::variable(&mut tape, &z);
    let to = TapedCode::constant(&mut tape, &hub);
    let path = taped.path(&mut tape, &from, &to).unwrap();
    let x0 = tape.constant(points.clone());
    let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), steps);
    let loss = chamfer_sq_on_tape(&mut tape, x1, &target, &target_index);
    let grads = tape.backward(loss).unwrap();
    let layer_grads = taped.backbone_grads(&grads);
    let z_grad = grads.dense(from.id, (1, 4));

    let h = 1e-5;
    let mut max_ad: f64 = 0.0;
    let mut max_err: f64 = 0.0;
    for (l, (gw, gb)) in layer_grads.iter().enumerate() {
        for i in 0..gw.nrows() {
            for j in 0..gw.ncols() {
                let mut pp = model.clone();
                pp.backbone.layers[l].weight[[i, j]] += h;
                let mut pm = model.clone();
                pm.backbone.layers[l].weight[[i, j]] -= h;
                let fd = (loss_for(&pp, &z) - loss_for(&pm, &z)) / (2.0 * h);
                max_ad = max_ad.max(fd.abs());
                max_err = max_err.max((gw[[i, j]] - fd).abs());
            }
        }
        for j in 0..gb.len() {
            let mut pp = model.clone();
            pp.backbone.layers[l].bias[j] += h;
            let mut pm = model.clone();
            pm.backbone.layers[l].bias[j] -= h;
            let fd = (loss_for(&pp, &z) - loss_for(&pm, &z)) / (2.0 * h);
            max_ad = max_ad.max(fd.abs());
            max_err = max_err.max((gb[j] - fd).abs());
        }
    }
    for d in 0..4 {
        let mut zp = z.clone();
        zp.0[d] += h;
        let mut zm = z.clone();
        zm.0[d] -= h;
        let fd = (loss_for(&model, &zp) - loss_for(&model, &zm)) / (2.0 * h);
        max_ad = max_ad.max(fd.abs());
        max_err = max_err.max((z_grad[[0, d]] - fd).abs());
    }
    let rel = max_err / max_ad.max(1e-12);
    PropertyResult {
        name: "gradient_vs_fd_rel".into(),
        pass: rel < 1e-4,
        value: rel,
        tolerance: 1e-4,
        detail: Some(serde_json::json!({"h": h, "pipeline": "curl+symmetry+rk4+chamfer"})),
    }
}

/// Run the full property suite. Failures land in the report, not in errors.
pub fn run_verify(seed: u64, sizes: VerifySizes) -> VerifyReport {
    let properties = vec![
        identity_flow_residual(seed),
        negation_residual(seed, sizes.negation_samples),
        divergence_residual_ad(seed, sizes.divergence_points),
        divergence_residual_fd(seed, sizes.fd_divergence_points),
        symmetry_residual(seed, sizes.symmetry_samples),
        roundtrip_dopri5(seed, sizes.roundtrip_points),
        roundtrip_rk4_table(seed, sizes.roundtrip_points),
        rk4_order_estimate(),
        volume_drift(seed),
        gradient_vs_fd(seed),
    ];
    let pass = properties.iter().all(|p| p.pass);
    VerifyReport {
        seed,
        sizes,
        pass,
        properties,
    }
}

/// Negative control: constructing a divergence-free model over a relu
/// backbone must fail. Returns the error the construction produced.
pub fn inject_fault_relu_divfree(seed: u64) -> Result<FlowModel, FlowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowModel::init(
        4,
        8,
        Activation::Relu,
        FlowMode::DivergenceFree,
        SymmetryMode::Off,
        SignMode::HubRule,
        &mut rng,
    )
}

/// Sanity helper for tests and the CLI: make sure zero-magnitude contexts
/// short-circuit batched evaluation too.
pub fn identity_batch_is_bitwise(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = model_with(
        FlowMode::DivergenceFree,
        SymmetryMode::PlaneYz,
        SignMode::HubRule,
        4,
        8,
        &mut rng,
    );
    let z = random_code(4, &mut rng);
    let ctx = PairContext::new(z.clone(), z);
    let pts = Array2::from_shape_fn((16, 3), |_| rng.gen_range(-0.5..0.5));
    match eval_flow_batch(&model, &ctx, &pts, 0.5) {
        Ok(v) => v.iter().all(|&x| x == 0.0),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        // Smaller sizes keep the unit test quick; the acceptance suite runs
        // the full sizes.
        let sizes = VerifySizes {
            divergence_points: 100,
            fd_divergence_points: 20,
            negation_samples: 800,
            symmetry_samples: 800,
            roundtrip_points: 20,
        };
        let report = run_verify(7, sizes);
        for p in &report.properties {
            assert!(p.pass, "{} failed: {} vs {}", p.name, p.value, p.tolerance);
        }
        assert!(report.pass);
        assert!(report.to_table().contains("overall: PASS"));
    }

    #[test]
    fn fault_injection_trips_the_guard() {
        assert!(matches!(
            inject_fault_relu_divfree(3),
            Err(FlowError::DivergenceFreeNeedsC1 { .. })
        ));
    }

    #[test]
    fn identity_batch_shortcut() {
        assert!(identity_batch_is_bitwise(5));
    }
}
