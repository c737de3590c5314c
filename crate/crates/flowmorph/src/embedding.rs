//! Embedding new observations into a trained deformation space and
//! reconstructing them by template deformation.
//!
//! An observation's latent code is a free variable optimized against the
//! frozen network (auto-decoder style): each iteration deforms the
//! observation to random training shapes through the hub and vice versa.
//! Reconstruction retrieves the nearest training shapes in latent space,
//! fine-tunes a clone of the network on them, deforms each candidate mesh to
//! the embedded code, and keeps the best by evaluation Chamfer.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::flowfield::{FlowModel, LatentCode, PairContext, TapedCode, TapedModel};
use crate::geometry::{
    chamfer, sample_surface, sample_surface_with_normals, ChamferVariant, Mesh, PointCloud,
    SpatialIndex, Vec3,
};
use crate::numerics::{AdamHyper, AdamState, Tape};
use crate::odeint::{deform_mesh, points_to_array, rk4_on_tape, OdeConfig};
use crate::training::{chamfer_sq_on_tape, Checkpoint, LatentTable, TrainError};

/// Knobs for embedding and reconstruction.
#[derive(Debug, Clone, Serialize)]
pub struct EmbedConfig {
    /// Standard deviation of the fresh code's normal initialization.
    pub init_std: f64,
    pub lr: f64,
    pub embed_iters: usize,
    pub fine_tune_iters: usize,
    /// Candidates retrieved for reconstruction.
    pub k: usize,
    /// Training shapes entering each embed step's objective.
    pub shapes_per_step: usize,
    /// Surface samples per training shape for the embed objective.
    pub samples_per_shape: usize,
    /// RK4 depth for objective gradients.
    pub rk4_steps: usize,
    /// Integrator for final candidate deformations and ranking.
    pub eval_ode: OdeConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            init_std: 1e-4,
            lr: 1e-2,
            embed_iters: 30,
            fine_tune_iters: 30,
            k: 5,
            shapes_per_step: 8,
            samples_per_shape: 512,
            rk4_steps: 5,
            eval_ode: OdeConfig::dopri5(1e-4, 1e-4),
        }
    }
}

impl EmbedConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 || self.shapes_per_step == 0 || self.samples_per_shape == 0 || self.rk4_steps == 0 {
            return Err(TrainError::Config("embed counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// A trained space ready for embedding: the checkpoint plus its normalized
/// training meshes in latent-table order.
pub struct TrainedSpace {
    pub checkpoint: Checkpoint,
    pub meshes: Vec<Mesh>,
}

impl TrainedSpace {
    pub fn new(checkpoint: Checkpoint, meshes: Vec<Mesh>) -> Result<TrainedSpace, TrainError> {
        if meshes.len() != checkpoint.latents.len() {
            return Err(TrainError::Config(format!(
                "{} meshes for {} latent codes",
                meshes.len(),
                checkpoint.latents.len()
            )));
        }
        Ok(TrainedSpace { checkpoint, meshes })
    }

    /// Load the checkpoint and re-load its training meshes from the dataset
    /// manifest recorded inside it.
    pub fn load(dir: &std::path::Path) -> Result<TrainedSpace, TrainError> {
        let checkpoint = Checkpoint::load(dir)?;
        let manifest = checkpoint
            .dataset
            .clone()
            .ok_or_else(|| TrainError::Config("checkpoint records no dataset manifest".into()))?;
        let meshes = manifest.load_split(crate::training::Split::Train)?;
        TrainedSpace::new(checkpoint, meshes)
    }
}

/// Record of one embedding run.
#[derive(Debug, Clone, Serialize)]
pub struct EmbedTrace {
    /// Objective on the fixed evaluation set, one entry per iterate
    /// (including the initial code).
    pub objective: Vec<f64>,
    /// Index of the returned iterate.
    pub selected: usize,
}

/// The embedding objective at a candidate code over fixed per-shape clouds
/// (sampled from `seed`); exposed so tests can probe the latent landscape.
pub fn embed_objective(
    space: &TrainedSpace,
    observation: &PointCloud,
    z: &LatentCode,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clouds: Vec<Array2<f64>> = space
        .meshes
        .iter()
        .map(|m| {
            sample_surface(m, cfg.samples_per_shape, rng.gen()).map(|c| points_to_array(&c.points))
        })
        .collect::<Result<_, _>>()?;
    embed_objective_value(
        &space.checkpoint.model,
        z,
        &points_to_array(&observation.points),
        &clouds,
        &space.checkpoint.latents.codes,
        &OdeConfig::rk4(cfg.rk4_steps),
    )
}

fn embed_objective_value(
    model: &FlowModel,
    z_n: &LatentCode,
    observation: &Array2<f64>,
    shape_clouds: &[Array2<f64>],
    shape_codes: &[LatentCode],
    ode: &OdeConfig,
) -> Result<f64, TrainError> {
    let hub = LatentCode::hub(z_n.dim());
    let mut total = 0.0;
    for (cloud, code) in shape_clouds.iter().zip(shape_codes) {
        let to_hub = PairContext::new(z_n.clone(), hub.clone());
        let mid = crate::odeint::deform(model, &to_hub, observation, ode)?;
        let from_hub = PairContext::new(hub.clone(), code.clone());
        let obs_at_i = crate::odeint::deform(model, &from_hub, &mid, ode)?;

        let to_hub_i = PairContext::new(code.clone(), hub.clone());
        let mid_i = crate::odeint::deform(model, &to_hub_i, cloud, ode)?;
        let from_hub_n = PairContext::new(hub.clone(), z_n.clone());
        let shape_at_n = crate::odeint::deform(model, &from_hub_n, &mid_i, ode)?;

        total += chamfer_sq_pair(&obs_at_i, cloud) + chamfer_sq_pair(observation, &shape_at_n);
    }
    Ok(total / shape_clouds.len() as f64)
}

fn chamfer_sq_pair(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let ap = crate::odeint::array_to_points(a);
    let bp = crate::odeint::array_to_points(b);
    let ia = SpatialIndex::build(&ap);
    let ib = SpatialIndex::build(&bp);
    let fwd: f64 = ap.iter().map(|p| ib.nearest(p).1).sum::<f64>() / ap.len() as f64;
    let bwd: f64 = bp.iter().map(|p| ia.nearest(p).1).sum::<f64>() / bp.len() as f64;
    fwd + bwd
}

/// Optimize a latent code for a new observation with the network frozen.
/// Deterministic given the seed. Returns the iterate with the best objective
/// on a fixed evaluation set (so the final objective never exceeds the
/// initial one), plus the objective trace.
pub fn embed(
    space: &TrainedSpace,
    observation: &PointCloud,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<(LatentCode, EmbedTrace), TrainError> {
    cfg.validate()?;
    if observation.is_empty() {
        return Err(TrainError::Geometry(
            crate::geometry::GeometryError::EmptyPointCloud,
        ));
    }
    let model = &space.checkpoint.model;
    let table = &space.checkpoint.latents;
    let dim = table.dim;
    let hub = table.hub();
    let obs = points_to_array(&observation.points);

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).unwrap();
    let mut z_n = LatentCode((0..dim).map(|_| normal.sample(&mut master)).collect());

    // Fixed per-run clouds for both the stochastic steps and the evaluation
    // trace.
    let shape_clouds: Vec<Array2<f64>> = space
        .meshes
        .iter()
        .map(|m| {
            sample_surface(m, cfg.samples_per_shape, master.gen()).map(|c| points_to_array(&c.points))
        })
        .collect::<Result<_, _>>()?;
    let eval_ode = OdeConfig::rk4(cfg.rk4_steps);

    let mut trace = EmbedTrace {
        objective: Vec::with_capacity(cfg.embed_iters + 1),
        selected: 0,
    };
    let initial = embed_objective_value(model, &z_n, &obs, &shape_clouds, &table.codes, &eval_ode)?;
    trace.objective.push(initial);
    let mut best = (initial, z_n.clone(), 0usize);

    let mut adam = AdamState::new(dim);
    let hyper = AdamHyper::default();

    for iter in 0..cfg.embed_iters {
        // Random subset of training shapes for this step's gradient.
        let mut ids: Vec<usize> = (0..table.len()).collect();
        ids.shuffle(&mut master);
        ids.truncate(cfg.shapes_per_step.min(ids.len()));

        let mut grad = vec![0.0; dim];
        for &i in &ids {
            let mut tape = Tape::new();
            let taped = TapedModel::register(&mut tape, model, false)?;
            let code_n = TapedCode::variable(&mut tape, &z_n);
            let code_i = TapedCode::constant(&mut tape, &table.codes[i]);
            let code_hub = TapedCode::constant(&mut tape, &hub);

            // Observation -> hub -> shape i.
            let obs_id = tape.constant(obs.clone());
            let path_n0 = taped.path(&mut tape, &code_n, &code_hub)?;
            let mid = rk4_on_tape(&mut tape, &path_n0, obs_id, (0.0, 1.0), cfg.rk4_steps);
            let path_0i = taped.path(&mut tape, &code_hub, &code_i)?;
            let obs_at_i = rk4_on_tape(&mut tape, &path_0i, mid, (0.0, 1.0), cfg.rk4_steps);

            // Shape i -> hub -> observation code.
            let shape_id = tape.constant(shape_clouds[i].clone());
            let path_i0 = taped.path(&mut tape, &code_i, &code_hub)?;
            let mid_i = rk4_on_tape(&mut tape, &path_i0, shape_id, (0.0, 1.0), cfg.rk4_steps);
            let path_0n = taped.path(&mut tape, &code_hub, &code_n)?;
            let shape_at_n = rk4_on_tape(&mut tape, &path_0n, mid_i, (0.0, 1.0), cfg.rk4_steps);

            let target_index_i =
                SpatialIndex::build(&crate::odeint::array_to_points(&shape_clouds[i]));
            let term1 = chamfer_sq_on_tape(&mut tape, obs_at_i, &shape_clouds[i], &target_index_i);
            let obs_index = SpatialIndex::build(&observation.points);
            let term2 = chamfer_sq_on_tape(&mut tape, shape_at_n, &obs, &obs_index);
            let loss = tape.add(term1, term2);
            let grads = tape.backward(loss).map_err(crate::flowfield::FlowError::from)?;
            let g = grads.dense(code_n.id, (1, dim));
            for (slot, v) in grad.iter_mut().zip(g.iter()) {
                *slot += v;
            }
        }
        let count = ids.len().max(1) as f64;
        for g in &mut grad {
            *g /= count;
        }
        adam.step(&mut z_n.0, &grad, cfg.lr, &hyper)?;

        let value =
            embed_objective_value(model, &z_n, &obs, &shape_clouds, &table.codes, &eval_ode)?;
        trace.objective.push(value);
        if value < best.0 {
            best = (value, z_n.clone(), iter + 1);
        }
    }

    trace.selected = best.2;
    Ok((best.1, trace))
}

/// Training-shape ids ranked by latent-space distance to `z`, ascending;
/// ties break to the lowest id. Errors if `k` exceeds the table.
pub fn retrieve_topk(table: &LatentTable, z: &LatentCode, k: usize) -> Result<Vec<usize>, TrainError> {
    if k > table.len() {
        return Err(TrainError::Config(format!(
            "k = {k} exceeds table size {}",
            table.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = table
        .codes
        .iter()
        .enumerate()
        .map(|(i, code)| {
            let d: f64 = code
                .0
                .iter()
                .zip(&z.0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d, i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, i)| i).collect())
}

/// One deformed candidate with its evaluation Chamfer to the observation.
#[derive(Debug, Clone)]
pub struct CandidateResult {
    pub shape_id: usize,
    pub mesh: Mesh,
    pub chamfer_l1: f64,
}

/// Result of reconstruction-by-deformation: the embedded code and candidates
/// ranked ascending by Chamfer; the first is the selected mesh.
pub struct ReconstructionResult {
    pub code: LatentCode,
    pub candidates: Vec<CandidateResult>,
    pub embed_trace: EmbedTrace,
    /// Summed candidate fine-tune objective at the start and end.
    pub fine_tune_endpoints: (f64, f64),
}

impl ReconstructionResult {
    pub fn selected(&self) -> &CandidateResult {
        &self.candidates[0]
    }
}

/// Embed, retrieve the top-k templates, fine-tune a clone of the network on
/// their deformations to the observation (the code stays frozen after
/// embedding), deform each candidate mesh to the embedded code, and rank by
/// evaluation Chamfer.
pub fn reconstruct(
    space: &TrainedSpace,
    observation: &PointCloud,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<ReconstructionResult, TrainError> {
    cfg.validate()?;
    let (code, embed_trace) = embed(space, observation, cfg, seed)?;
    let k = cfg.k.min(space.checkpoint.latents.len());
    let topk = retrieve_topk(&space.checkpoint.latents, &code, k)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1ee_7ee1_u64);
    let obs = points_to_array(&observation.points);
    let obs_index = SpatialIndex::build(&observation.points);
    let hub = space.checkpoint.latents.hub();

    // Fixed candidate clouds for the fine-tune objective.
    let candidate_clouds: Vec<Array2<f64>> = topk
        .iter()
        .map(|&i| {
            sample_surface(&space.meshes[i], cfg.samples_per_shape, rng.gen())
                .map(|c| points_to_array(&c.points))
        })
        .collect::<Result<_, _>>()?;

    let mut model = space.checkpoint.model.clone();
    let fine_tune_loss = |model: &FlowModel| -> Result<f64, TrainError> {
        let ode = OdeConfig::rk4(cfg.rk4_steps);
        let mut total = 0.0;
        for (&i, cloud) in topk.iter().zip(&candidate_clouds) {
            let to_hub = PairContext::new(space.checkpoint.latents.codes[i].clone(), hub.clone());
            let mid = crate::odeint::deform(model, &to_hub, cloud, &ode)?;
            let from_hub = PairContext::new(hub.clone(), code.clone());
            let at_obs = crate::odeint::deform(model, &from_hub, &mid, &ode)?;
            total += chamfer_sq_pair(&at_obs, &obs);
        }
        Ok(total)
    };

    let initial_loss = fine_tune_loss(&model)?;
    let mut best = (initial_loss, model.clone());
    let mut adams: Vec<(AdamState, AdamState)> = model
        .backbone
        .layers
        .iter()
        .map(|l| (AdamState::new(l.weight.len()), AdamState::new(l.bias.len())))
        .collect();
    let hyper = AdamHyper::default();

    for _ in 0..cfg.fine_tune_iters {
        // Gradient of the summed candidate losses with respect to eta.
        let mut grads_w: Vec<Array2<f64>> = model
            .backbone
            .layers
            .iter()
            .map(|l| Array2::zeros(l.weight.dim()))
            .collect();
        let mut grads_b: Vec<ndarray::Array1<f64>> = model
            .backbone
            .layers
            .iter()
            .map(|l| ndarray::Array1::zeros(l.bias.len()))
            .collect();
        for (&i, cloud) in topk.iter().zip(&candidate_clouds) {
            let mut tape = Tape::new();
            let taped = TapedModel::register(&mut tape, &model, true)?;
            let code_i = TapedCode::constant(&mut tape, &space.checkpoint.latents.codes[i]);
            let code_n = TapedCode::constant(&mut tape, &code);
            let code_hub = TapedCode::constant(&mut tape, &hub);
            let pts = tape.constant(cloud.clone());
            let path_i0 = taped.path(&mut tape, &code_i, &code_hub)?;
            let mid = rk4_on_tape(&mut tape, &path_i0, pts, (0.0, 1.0), cfg.rk4_steps);
            let path_0n = taped.path(&mut tape, &code_hub, &code_n)?;
            let at_obs = rk4_on_tape(&mut tape, &path_0n, mid, (0.0, 1.0), cfg.rk4_steps);
            let loss = chamfer_sq_on_tape(&mut tape, at_obs, &obs, &obs_index);
            let grads = tape.backward(loss).map_err(crate::flowfield::FlowError::from)?;
            for (l, (gw, gb)) in taped.backbone_grads(&grads).into_iter().enumerate() {
                grads_w[l] += &gw;
                grads_b[l] += &gb;
            }
        }
        for (l, layer) in model.backbone.layers.iter_mut().enumerate() {
            let gw: Vec<f64> = grads_w[l].iter().copied().collect();
            let gb: Vec<f64> = grads_b[l].iter().copied().collect();
            adams[l]
                .0
                .step(layer.weight.as_slice_mut().unwrap(), &gw, cfg.lr, &hyper)?;
            adams[l]
                .1
                .step(layer.bias.as_slice_mut().unwrap(), &gb, cfg.lr, &hyper)?;
        }
        let value = fine_tune_loss(&model)?;
        if value < best.0 {
            best = (value, model.clone());
        }
    }
    let final_loss = best.0;
    let model = best.1;

    // Deform each candidate mesh to the embedded code and rank.
    let mut candidates = Vec::with_capacity(topk.len());
    for (rank, &i) in topk.iter().enumerate() {
        let to_hub = PairContext::new(space.checkpoint.latents.codes[i].clone(), hub.clone());
        let mid = deform_mesh(&model, &to_hub, &space.meshes[i], &cfg.eval_ode)?;
        let from_hub = PairContext::new(hub.clone(), code.clone());
        let deformed = deform_mesh(&model, &from_hub, &mid, &cfg.eval_ode)?;
        let samples = sample_surface(
            &deformed,
            cfg.samples_per_shape,
            seed ^ (0xc0ffee + rank as u64),
        )?;
        let score = chamfer(&samples, observation, ChamferVariant::L1Eval)?;
        candidates.push(CandidateResult {
            shape_id: i,
            mesh: deformed,
            chamfer_l1: score,
        });
    }
    candidates.sort_by(|a, b| {
        a.chamfer_l1
            .partial_cmp(&b.chamfer_l1)
            .unwrap()
            .then(a.shape_id.cmp(&b.shape_id))
    });

    Ok(ReconstructionResult {
        code,
        candidates,
        embed_trace,
        fine_tune_endpoints: (initial_loss, final_loss),
    })
}

/// Chamfer-L1 and normal consistency between two meshes, from equal-seed
/// surface samples (identical meshes therefore score 0 and 1 exactly).
/// Normal consistency averages |cos| between each sample's face normal and
/// the face normal at its nearest neighbor on the other mesh, both ways.
pub fn eval_reconstruction(
    mesh: &Mesh,
    reference: &Mesh,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    let (cloud_a, normals_a) = sample_surface_with_normals(mesh, samples, seed)?;
    let (cloud_b, normals_b) = sample_surface_with_normals(reference, samples, seed)?;
    let chamfer_l1 = chamfer(&cloud_a, &cloud_b, ChamferVariant::L1Eval)?;

    let index_a = SpatialIndex::build(&cloud_a.points);
    let index_b = SpatialIndex::build(&cloud_b.points);
    let mut ab = 0.0;
    for (p, n) in cloud_a.points.iter().zip(&normals_a) {
        let (j, _) = index_b.nearest(p);
        ab += n.dot(&normals_b[j]).abs();
    }
    let mut ba = 0.0;
    for (p, n) in cloud_b.points.iter().zip(&normals_b) {
        let (j, _) = index_a.nearest(p);
        ba += n.dot(&normals_a[j]).abs();
    }
    let nc = 0.5 * (ab / samples as f64 + ba / samples as f64);
    Ok((chamfer_l1, nc))
}

/// Noisy sparse observation of a mesh following the benchmark protocol:
/// `count` surface samples with isotropic Gaussian noise of `sigma`.
pub fn noisy_observation(mesh: &Mesh, count: usize, sigma: f64, seed: u64) -> Result<PointCloud, TrainError> {
    let cloud = sample_surface(mesh, count, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b53);
    let normal = Normal::new(0.0, sigma).unwrap();
    let points = cloud
        .points
        .into_iter()
        .map(|p| {
            p + Vec3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            )
        })
        .collect();
    Ok(PointCloud {
        points,
        labels: None,
    })
}

/// Per-shape reconstruction metrics over a mesh list (the benchmark rows).
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub shape: usize,
    pub chamfer_l1: f64,
    pub normal_consistency: f64,
}

/// Reconstruct noisy observations of each mesh and score against the clean
/// mesh. Returns per-shape rows; means are up to the caller.
pub fn benchmark_meshes(
    space: &TrainedSpace,
    targets: &[Mesh],
    cfg: &EmbedConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<MetricsRow>, TrainError> {
    let mut rows = Vec::with_capacity(targets.len());
    for (idx, mesh) in targets.iter().enumerate() {
        let obs = noisy_observation(mesh, 300, 0.05, seed.wrapping_add(idx as u64))?;
        let result = reconstruct(space, &obs, cfg, seed.wrapping_add(0x9000 + idx as u64))?;
        let (chamfer_l1, nc) = eval_reconstruction(
            &result.selected().mesh,
            mesh,
            samples,
            seed.wrapping_add(0x333 + idx as u64),
        )?;
        rows.push(MetricsRow {
            shape: idx,
            chamfer_l1,
            normal_consistency: nc,
        });
    }
    Ok(rows)
}
