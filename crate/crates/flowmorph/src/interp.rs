//! Correspondence-supervised pair fitting and keyframe interpolation.
//!
//! Two corresponded keyframes get codes z0 = hub and a trained z1. The fit
//! supervises the averaged two-branch interpolant against linear-interpolated
//! vertex targets at the endpoints and a handful of interior times, with an
//! optional per-branch edge-length isometry term. An intermediate frame at
//! alpha averages the partial advection of each keyframe toward the blended
//! code, realized as latent-segment integration truncated at alpha.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::flowfield::{
    FlowMode, FlowModel, LatentCode, PairContext, SignMode, SymmetryMode, TapedCode, TapedModel,
};
use crate::geometry::{
    count_triangle_intersections, edge_lengths, save_mesh, signed_volume, Mesh, MeshFormat,
};
use crate::numerics::{Activation, AdamHyper, AdamState, Tape, TensorId};
use crate::odeint::{
    array_to_points, deform_partial, points_to_array, rk4_on_tape, OdeConfig,
};
use crate::training::{vertex_l2_on_tape, EdgeBatch, TrainError};

/// Configuration for pair fitting and animation rendering.
#[derive(Debug, Clone, Serialize)]
pub struct InterpConfig {
    /// Frames emitted by [`render_animation`] (>= 2, endpoints included).
    pub frame_count: usize,
    /// Interior supervision frames (linear-interpolation targets).
    pub supervision_frames: usize,
    pub mode: FlowMode,
    pub symmetry: SymmetryMode,
    pub lambda_edge: f64,
    pub steps: usize,
    pub lr: f64,
    pub n_f: usize,
    pub latent_dim: usize,
    /// Fixed-step RK4 depth for training integrations.
    pub rk4_steps: usize,
    /// Integrator for rendered frames.
    pub render_ode: OdeConfig,
    /// Edges per keyframe entering the isometry term.
    pub max_edges: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig {
            frame_count: 10,
            supervision_frames: 5,
            mode: FlowMode::DivergenceFree,
            symmetry: SymmetryMode::Off,
            lambda_edge: 2.0,
            steps: 1000,
            lr: 2e-3,
            n_f: 16,
            latent_dim: 8,
            rk4_steps: 5,
            render_ode: OdeConfig::dopri5(1e-4, 1e-4),
            max_edges: 2000,
        }
    }
}

impl InterpConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.frame_count < 2 {
            return Err(TrainError::Config("frame_count must be >= 2".into()));
        }
        if self.rk4_steps == 0 {
            return Err(TrainError::Config("rk4_steps must be >= 1".into()));
        }
        if self.lambda_edge < 0.0 {
            return Err(TrainError::Config("lambda_edge must be >= 0".into()));
        }
        Ok(())
    }

    /// Supervision times: endpoints plus the interior frames, ascending.
    pub fn supervision_alphas(&self) -> Vec<f64> {
        let s = self.supervision_frames;
        let mut alphas = Vec::with_capacity(s + 2);
        alphas.push(0.0);
        for k in 1..=s {
            alphas.push(k as f64 / (s + 1) as f64);
        }
        alphas.push(1.0);
        alphas
    }
}

/// A fitted keyframe pair: the flow plus the two codes (z0 is the hub).
pub struct FittedPair {
    pub model: FlowModel,
    pub z0: LatentCode,
    pub z1: LatentCode,
}

pub struct FitResult {
    pub fitted: FittedPair,
    /// Total loss per step.
    pub history: Vec<f64>,
}

/// Advect keyframe vertices along their branch up to `alpha` on the tape.
/// Branch 0 runs hub -> z1 truncated at alpha; branch 1 runs z1 -> hub
/// truncated at 1 - alpha.
fn branch_on_tape(
    tape: &mut Tape,
    taped: &TapedModel,
    from: &TapedCode,
    to: &TapedCode,
    verts: &Array2<f64>,
    t_end: f64,
    rk4_steps: usize,
) -> Result<TensorId, TrainError> {
    let x0 = tape.constant(verts.clone());
    if t_end == 0.0 {
        return Ok(x0);
    }
    let path = taped.path(tape, from, to)?;
    Ok(rk4_on_tape(tape, &path, x0, (0.0, t_end), rk4_steps))
}

/// Fit a flow to a corresponded keyframe pair. Deterministic given the seed.
pub fn fit_pair(
    x0: &Mesh,
    x1: &Mesh,
    cfg: &InterpConfig,
    seed: u64,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if x0.vertex_count() != x1.vertex_count() {
        return Err(TrainError::VertexCountMismatch {
            a: x0.vertex_count(),
            b: x1.vertex_count(),
        });
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut model_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut latent_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut edge_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let mut model = FlowModel::init(
        cfg.latent_dim,
        cfg.n_f,
        Activation::Elu,
        cfg.mode,
        cfg.symmetry,
        SignMode::HubRule,
        &mut model_rng,
    )?;
    let z0 = LatentCode::hub(cfg.latent_dim);
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut z1 = LatentCode(
        (0..cfg.latent_dim)
            .map(|_| normal.sample(&mut latent_rng))
            .collect(),
    );

    let v0 = points_to_array(&x0.vertices);
    let v1 = points_to_array(&x1.vertices);
    let alphas = cfg.supervision_alphas();
    let targets: Vec<Array2<f64>> = alphas
        .iter()
        .map(|&a| {
            let mut t = Array2::zeros(v0.dim());
            for r in 0..v0.nrows() {
                for c in 0..3 {
                    t[[r, c]] = (1.0 - a) * v0[[r, c]] + a * v1[[r, c]];
                }
            }
            t
        })
        .collect();

    let (edge0, rows0) = EdgeBatch::build(x0, cfg.max_edges, &mut edge_rng);
    let (edge1, rows1) = EdgeBatch::build(x1, cfg.max_edges, &mut edge_rng);
    let edge_verts0 = points_to_array(&rows0.iter().map(|&v| x0.vertices[v]).collect::<Vec<_>>());
    let edge_verts1 = points_to_array(&rows1.iter().map(|&v| x1.vertices[v]).collect::<Vec<_>>());

    let mut adams: Vec<(AdamState, AdamState)> = model
        .backbone
        .layers
        .iter()
        .map(|l| (AdamState::new(l.weight.len()), AdamState::new(l.bias.len())))
        .collect();
    let mut z1_adam = AdamState::new(cfg.latent_dim);
    let hyper = AdamHyper::default();
    let mut history = Vec::with_capacity(cfg.steps);

    for _step in 0..cfg.steps {
        let mut tape = Tape::new();
        let taped = TapedModel::register(&mut tape, &model, true)?;
        let code0 = TapedCode::constant(&mut tape, &z0);
        let code1 = TapedCode::variable(&mut tape, &z1);

        let mut frame_terms: Vec<TensorId> = Vec::new();
        let mut edge_terms: Vec<TensorId> = Vec::new();
        for (&alpha, target) in alphas.iter().zip(&targets) {
            let b0 = branch_on_tape(&mut tape, &taped, &code0, &code1, &v0, alpha, cfg.rk4_steps)?;
            let b1 =
                branch_on_tape(&mut tape, &taped, &code1, &code0, &v1, 1.0 - alpha, cfg.rk4_steps)?;
            let sum = tape.add(b0, b1);
            let pred = tape.scale(sum, 0.5);
            frame_terms.push(vertex_l2_on_tape(&mut tape, pred, target));

            if cfg.lambda_edge > 0.0 {
                if alpha > 0.0 && !edge0.is_empty() {
                    let adv = branch_on_tape(
                        &mut tape,
                        &taped,
                        &code0,
                        &code1,
                        &edge_verts0,
                        alpha,
                        cfg.rk4_steps,
                    )?;
                    edge_terms.push(edge0.loss_on_tape(&mut tape, adv));
                }
                if alpha < 1.0 && !edge1.is_empty() {
                    let adv = branch_on_tape(
                        &mut tape,
                        &taped,
                        &code1,
                        &code0,
                        &edge_verts1,
                        1.0 - alpha,
                        cfg.rk4_steps,
                    )?;
                    edge_terms.push(edge1.loss_on_tape(&mut tape, adv));
                }
            }
        }

        let mut loss = frame_terms[0];
        for t in &frame_terms[1..] {
            loss = tape.add(loss, *t);
        }
        loss = tape.scale(loss, 1.0 / frame_terms.len() as f64);
        if !edge_terms.is_empty() {
            let mut edges = edge_terms[0];
            for t in &edge_terms[1..] {
                edges = tape.add(edges, *t);
            }
            let mean_edges = tape.scale(edges, 1.0 / edge_terms.len() as f64);
            loss = tape.add_scaled(loss, mean_edges, cfg.lambda_edge);
        }

        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: _step,
                diagnostic: None,
            });
        }
        history.push(value);

        let grads = tape.backward(loss).map_err(crate::flowfield::FlowError::from)?;
        for (l, (gw, gb)) in taped.backbone_grads(&grads).into_iter().enumerate() {
            let layer = &mut model.backbone.layers[l];
            let gw: Vec<f64> = gw.iter().copied().collect();
            let gb: Vec<f64> = gb.iter().copied().collect();
            adams[l]
                .0
                .step(layer.weight.as_slice_mut().unwrap(), &gw, cfg.lr, &hyper)?;
            adams[l]
                .1
                .step(layer.bias.as_slice_mut().unwrap(), &gb, cfg.lr, &hyper)?;
        }
        let gz = grads.dense(code1.id, (1, cfg.latent_dim));
        let gz: Vec<f64> = gz.iter().copied().collect();
        z1_adam.step(&mut z1.0, &gz, cfg.lr, &hyper)?;
    }

    Ok(FitResult {
        fitted: FittedPair { model, z0, z1 },
        history,
    })
}

/// The interpolated mesh at `alpha`: the average of both keyframes advected
/// toward the blended code, with connectivity from the first keyframe.
pub fn interpolate(
    fitted: &FittedPair,
    x0: &Mesh,
    x1: &Mesh,
    alpha: f64,
    ode: &OdeConfig,
) -> Result<Mesh, TrainError> {
    if x0.vertex_count() != x1.vertex_count() {
        return Err(TrainError::VertexCountMismatch {
            a: x0.vertex_count(),
            b: x1.vertex_count(),
        });
    }
    assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1]");
    let v0 = points_to_array(&x0.vertices);
    let v1 = points_to_array(&x1.vertices);
    let fwd = PairContext::new(fitted.z0.clone(), fitted.z1.clone());
    let bwd = fwd.reversed();
    let b0 = deform_partial(&fitted.model, &fwd, &v0, ode, alpha)?;
    let b1 = deform_partial(&fitted.model, &bwd, &v1, ode, 1.0 - alpha)?;
    let avg = (&b0 + &b1).mapv(|v| v * 0.5);
    Ok(x0.with_vertices(array_to_points(&avg)))
}

/// Per-frame diagnostics of an animation.
#[derive(Debug, Clone, Serialize)]
pub struct FrameStats {
    pub alpha: f64,
    pub volume: f64,
    pub mean_rel_edge_change: f64,
    pub intersections: usize,
}

/// Frame stats for the fitted interpolation and the linear baseline.
#[derive(Debug, Clone, Serialize)]
pub struct AnimationReport {
    pub frames: Vec<FrameStats>,
    pub baseline: Vec<FrameStats>,
}

fn frame_stats(mesh: &Mesh, alpha: f64, reference_edges: &[((usize, usize), f64)]) -> FrameStats {
    let mut rel = 0.0;
    let mut count = 0usize;
    for &((a, b), rest) in reference_edges {
        if rest == 0.0 {
            continue;
        }
        let now = (mesh.vertices[a] - mesh.vertices[b]).norm();
        rel += ((now - rest) / rest).abs();
        count += 1;
    }
    FrameStats {
        alpha,
        volume: signed_volume(mesh),
        mean_rel_edge_change: if count == 0 { 0.0 } else { rel / count as f64 },
        intersections: count_triangle_intersections(mesh),
    }
}

/// Render `frame_count` interpolated frames plus the linear-interpolation
/// baseline, with per-frame volume, edge, and intersection diagnostics.
/// When `out_dir` is set, writes `frame_%04d.obj`, `baseline_%04d.obj`, and
/// `report.json`.
pub fn render_animation(
    fitted: &FittedPair,
    x0: &Mesh,
    x1: &Mesh,
    cfg: &InterpConfig,
    out_dir: Option<&Path>,
) -> Result<(AnimationReport, Vec<Mesh>, Vec<Mesh>), TrainError> {
    cfg.validate()?;
    let reference_edges = edge_lengths(x0);
    let alphas: Vec<f64> = (0..cfg.frame_count)
        .map(|k| k as f64 / (cfg.frame_count - 1) as f64)
        .collect();

    let mut frames = Vec::with_capacity(alphas.len());
    let mut baseline = Vec::with_capacity(alphas.len());
    let mut frame_stats_out = Vec::with_capacity(alphas.len());
    let mut baseline_stats = Vec::with_capacity(alphas.len());

    for &alpha in &alphas {
        let mesh = interpolate(fitted, x0, x1, alpha, &cfg.render_ode)?;
        frame_stats_out.push(frame_stats(&mesh, alpha, &reference_edges));
        frames.push(mesh);

        let linear: Vec<_> = x0
            .vertices
            .iter()
            .zip(&x1.vertices)
            .map(|(a, b)| a * (1.0 - alpha) + b * alpha)
            .collect();
        let linear_mesh = x0.with_vertices(linear);
        baseline_stats.push(frame_stats(&linear_mesh, alpha, &reference_edges));
        baseline.push(linear_mesh);
    }

    let report = AnimationReport {
        frames: frame_stats_out,
        baseline: baseline_stats,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        for (k, mesh) in frames.iter().enumerate() {
            save_mesh(mesh, &dir.join(format!("frame_{k:04}.obj")), MeshFormat::Obj)?;
        }
        for (k, mesh) in baseline.iter().enumerate() {
            save_mesh(mesh, &dir.join(format!("baseline_{k:04}.obj")), MeshFormat::Obj)?;
        }
        let payload = serde_json::json!({ "config": cfg, "report": report });
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(&payload).expect("report serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }

    Ok((report, frames, baseline))
}

/// Endpoint branch deformation error: the mean of vertex-L2 between each
/// advected keyframe and the opposite keyframe. The zero-flow baseline is
/// `vertex_l2(x0, x1)`.
pub fn endpoint_vertex_l2(fitted: &FittedPair, x0: &Mesh, x1: &Mesh, ode: &OdeConfig) -> Result<f64, TrainError> {
    let v0 = points_to_array(&x0.vertices);
    let v1 = points_to_array(&x1.vertices);
    let fwd = PairContext::new(fitted.z0.clone(), fitted.z1.clone());
    let bwd = fwd.reversed();
    let d01 = deform_partial(&fitted.model, &fwd, &v0, ode, 1.0)?;
    let d10 = deform_partial(&fitted.model, &bwd, &v1, ode, 1.0)?;
    let a = crate::training::vertex_l2_loss(&array_to_points(&d01), &x1.vertices)?;
    let b = crate::training::vertex_l2_loss(&array_to_points(&d10), &x0.vertices)?;
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;

    #[test]
    fn identical_keyframes_with_equal_codes_return_x0_exactly() {
        let cube = toy::unit_cube();
        let model = FlowModel::init(
            4,
            4,
            Activation::Elu,
            FlowMode::Direct,
            SymmetryMode::Off,
            SignMode::HubRule,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let fitted = FittedPair {
            model,
            z0: LatentCode::hub(4),
            z1: LatentCode::hub(4),
        };
        for alpha in [0.0, 0.3, 1.0] {
            let mesh = interpolate(&fitted, &cube, &cube, alpha, &OdeConfig::rk4(4)).unwrap();
            assert_eq!(mesh.vertices, cube.vertices);
            assert_eq!(mesh.faces, cube.faces);
        }
    }

    #[test]
    fn supervision_alphas_cover_unit_interval() {
        let cfg = InterpConfig::default();
        let alphas = cfg.supervision_alphas();
        assert_eq!(alphas.len(), 7);
        assert_eq!(alphas[0], 0.0);
        assert_eq!(*alphas.last().unwrap(), 1.0);
        for w in alphas.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn frame_count_two_gives_endpoint_interpolants() {
        let a = toy::box_grid(crate::geometry::Vec3::zeros(), crate::geometry::Vec3::new(0.5, 0.3, 0.2), 1, 0);
        let b = a.with_vertices(a.vertices.iter().map(|v| v + crate::geometry::Vec3::new(0.1, 0.0, 0.0)).collect());
        let model = FlowModel::init(
            4,
            4,
            Activation::Elu,
            FlowMode::Direct,
            SymmetryMode::Off,
            SignMode::HubRule,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let fitted = FittedPair {
            model,
            z0: LatentCode::hub(4),
            z1: LatentCode(vec![0.1, -0.2, 0.05, 0.3]),
        };
        let cfg = InterpConfig {
            frame_count: 2,
            steps: 0,
            render_ode: OdeConfig::rk4(4),
            ..InterpConfig::default()
        };
        let (report, frames, baseline) = render_animation(&fitted, &a, &b, &cfg, None).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(report.frames[0].alpha, 0.0);
        assert_eq!(report.frames[1].alpha, 1.0);
        let e0 = interpolate(&fitted, &a, &b, 0.0, &cfg.render_ode).unwrap();
        let e1 = interpolate(&fitted, &a, &b, 1.0, &cfg.render_ode).unwrap();
        assert_eq!(frames[0].vertices, e0.vertices);
        assert_eq!(frames[1].vertices, e1.vertices);
        assert_eq!(baseline[0].vertices, a.vertices);
        assert_eq!(baseline[1].vertices, b.vertices);
    }

    #[test]
    fn vertex_count_mismatch_rejected() {
        let a = toy::unit_cube();
        let b = toy::icosphere(1, 0.5);
        let cfg = InterpConfig {
            steps: 1,
            ..InterpConfig::default()
        };
        assert!(matches!(
            fit_pair(&a, &b, &cfg, 0),
            Err(TrainError::VertexCountMismatch { .. })
        ));
    }
}
