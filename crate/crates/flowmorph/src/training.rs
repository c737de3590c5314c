//! Hub-and-spoke auto-decoder training.
//!
//! Every pairwise deformation routes through the zero-code hub: shape i's
//! samples are advected i -> hub -> j and compared to shape j's samples with
//! the squared-L2 Chamfer (and vice versa). Latent codes are free variables
//! optimized jointly with the network. An optional isometry term penalizes
//! relative edge-length change of advected mesh edges.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowfield::{
    FlowError, FlowMode, FlowModel, LatentCode, PairContext, SignMode, SymmetryMode, TapedCode,
    TapedModel,
};
use crate::geometry::{
    normalize_to_unit, sample_surface, GeometryError, Mesh, PointCloud, SpatialIndex, Vec3,
};
use crate::numerics::{
    Activation, AdamHyper, AdamState, CheckpointData, Gradients, MlpParams, NumericsError, Tape,
    TensorEntry, TensorId,
};
use crate::odeint::{deform_cloud, points_to_array, rk4_on_tape, OdeConfig, OdeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("manifest has no train entries")]
    EmptyManifest,
    #[error("vertex count mismatch: {a} vs {b}")]
    VertexCountMismatch { a: usize, b: usize },
    #[error("non-finite loss at step {step}{}", diagnostic.as_ref().map(|p| format!("; diagnostic checkpoint at {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        step: usize,
        diagnostic: Option<PathBuf>,
    },
    #[error("pairwise loss requires the odd-mlp sign mode")]
    PairwiseNeedsOddMlp,
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Latent table.
// ---------------------------------------------------------------------------

/// One latent code per training shape. The hub code is implicit, exactly
/// zero, and never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    pub codes: Vec<LatentCode>,
    pub dim: usize,
}

impl LatentTable {
    /// i.i.d. normal initialization with standard deviation 0.1.
    pub fn init(count: usize, dim: usize, rng: &mut impl Rng) -> LatentTable {
        let normal = Normal::new(0.0, 0.1).unwrap();
        let codes = (0..count)
            .map(|_| LatentCode((0..dim).map(|_| normal.sample(rng)).collect()))
            .collect();
        LatentTable { codes, dim }
    }

    pub fn hub(&self) -> LatentCode {
        LatentCode::hub(self.dim)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

/// Training configuration. The plain-text config file maps onto these fields
/// one to one (`key = value` per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Shape pairs per optimization step.
    pub batch_size: usize,
    pub steps: usize,
    /// Surface samples drawn per shape each step.
    pub samples_per_shape: usize,
    pub lambda_edge: f64,
    /// Edges per shape entering the isometry term each step.
    pub max_edges_per_shape: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub n_f: usize,
    pub activation: Activation,
    pub mode: FlowMode,
    pub symmetry: SymmetryMode,
    pub sign: SignMode,
    /// Fixed-step RK4 depth used while training.
    pub rk4_steps: usize,
    /// Steps between checkpoint writes; 0 disables periodic writes.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            steps: 500,
            samples_per_shape: 512,
            lambda_edge: 0.0,
            max_edges_per_shape: 2000,
            seed: 0,
            latent_dim: 8,
            n_f: 16,
            activation: Activation::Elu,
            mode: FlowMode::Direct,
            symmetry: SymmetryMode::Off,
            sign: SignMode::HubRule,
            rk4_steps: 5,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn training_ode(&self) -> OdeConfig {
        OdeConfig::rk4(self.rk4_steps)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.samples_per_shape == 0 {
            return Err(TrainError::Config("samples_per_shape must be >= 1".into()));
        }
        if self.lambda_edge < 0.0 {
            return Err(TrainError::Config("lambda_edge must be >= 0".into()));
        }
        if self.batch_size == 0 || self.rk4_steps == 0 {
            return Err(TrainError::Config(
                "batch_size and rk4_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Plain-text form: one `key = value` per line, `#` comments.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "samples_per_shape = {}", self.samples_per_shape);
        let _ = writeln!(s, "lambda_edge = {}", self.lambda_edge);
        let _ = writeln!(s, "max_edges_per_shape = {}", self.max_edges_per_shape);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "n_f = {}", self.n_f);
        let _ = writeln!(s, "activation = {}", self.activation.name());
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "symmetry = {}", self.symmetry.name());
        let _ = writeln!(s, "sign = {}", self.sign.name());
        let _ = writeln!(s, "rk4_steps = {}", self.rk4_steps);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    pub fn from_kv_text(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad =
                |what: &str| TrainError::Config(format!("line {}: bad {what} `{value}`", ln + 1));
            match key {
                "lr" => cfg.lr = value.parse().map_err(|_| bad("float"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("count"))?,
                "steps" => cfg.steps = value.parse().map_err(|_| bad("count"))?,
                "samples_per_shape" => {
                    cfg.samples_per_shape = value.parse().map_err(|_| bad("count"))?
                }
                "lambda_edge" => cfg.lambda_edge = value.parse().map_err(|_| bad("float"))?,
                "max_edges_per_shape" => {
                    cfg.max_edges_per_shape = value.parse().map_err(|_| bad("count"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "latent_dim" => cfg.latent_dim = value.parse().map_err(|_| bad("count"))?,
                "n_f" => cfg.n_f = value.parse().map_err(|_| bad("count"))?,
                "activation" => {
                    cfg.activation = Activation::parse(value).ok_or_else(|| bad("activation"))?
                }
                "mode" => cfg.mode = FlowMode::parse(value).ok_or_else(|| bad("mode"))?,
                "symmetry" => {
                    cfg.symmetry = SymmetryMode::parse(value).ok_or_else(|| bad("symmetry"))?
                }
                "sign" => cfg.sign = SignMode::parse(value).ok_or_else(|| bad("sign"))?,
                "rk4_steps" => cfg.rk4_steps = value.parse().map_err(|_| bad("count"))?,
                "checkpoint_every" => {
                    cfg.checkpoint_every = value.parse().map_err(|_| bad("count"))?
                }
                other => {
                    return Err(TrainError::Config(format!(
                        "line {}: unknown key `{other}`",
                        ln + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Dataset manifest.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub mesh: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    /// Load a JSON manifest; relative mesh/label paths are resolved against
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<DatasetManifest, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            for entry in &mut manifest.entries {
                if entry.mesh.is_relative() {
                    entry.mesh = base.join(&entry.mesh);
                }
                if let Some(labels) = &entry.labels {
                    if labels.is_relative() {
                        entry.labels = Some(base.join(labels));
                    }
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn split_entries(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Load, triangulate, attach labels, and normalize every mesh of a split.
    pub fn load_split(&self, split: Split) -> Result<Vec<Mesh>, TrainError> {
        let mut meshes = Vec::new();
        for entry in self.split_entries(split) {
            let format = crate::geometry::MeshFormat::from_path(&entry.mesh).ok_or_else(|| {
                TrainError::Config(format!("unknown mesh format: {}", entry.mesh.display()))
            })?;
            let (mut mesh, _) = crate::geometry::load_mesh(&entry.mesh, format)?;
            if mesh.labels.is_none() {
                if let Some(label_path) = &entry.labels {
                    let text =
                        std::fs::read_to_string(label_path).map_err(|e| io_err(label_path, e))?;
                    let labels: Result<Vec<u32>, _> = text
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(|l| l.trim().parse())
                        .collect();
                    let labels = labels.map_err(|_| {
                        TrainError::Config(format!("bad labels in {}", label_path.display()))
                    })?;
                    mesh = Mesh::with_labels(mesh.vertices, mesh.faces, labels)?;
                }
            }
            let (normalized, _, _) = normalize_to_unit(&mesh)?;
            meshes.push(normalized);
        }
        Ok(meshes)
    }
}

// ---------------------------------------------------------------------------
// Losses (plain evaluations).
// ---------------------------------------------------------------------------

/// Squared-L2 symmetric Chamfer between two point arrays.
fn chamfer_sq_arrays(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let ap: Vec<Vec3> = crate::odeint::array_to_points(a);
    let bp: Vec<Vec3> = crate::odeint::array_to_points(b);
    let ia = SpatialIndex::build(&ap);
    let ib = SpatialIndex::build(&bp);
    let mut a_to_b = 0.0;
    for p in &ap {
        a_to_b += ib.nearest(p).1;
    }
    let mut b_to_a = 0.0;
    for p in &bp {
        b_to_a += ia.nearest(p).1;
    }
    a_to_b / ap.len() as f64 + b_to_a / bp.len() as f64
}

/// Hub-and-spoke pair loss: advect i's samples i -> hub -> j and compare to
/// j's samples, plus the mirror-image term. Uses the training (squared-L2)
/// Chamfer.
pub fn hub_spoke_loss(
    model: &FlowModel,
    table: &LatentTable,
    shape_i: usize,
    shape_j: usize,
    points_i: &PointCloud,
    points_j: &PointCloud,
    cfg: &OdeConfig,
) -> Result<f64, TrainError> {
    let hub = table.hub();
    let z_i = &table.codes[shape_i];
    let z_j = &table.codes[shape_j];
    let p_i = points_to_array(&points_i.points);
    let p_j = points_to_array(&points_j.points);

    let via_hub = |z_from: &LatentCode,
                   z_to: &LatentCode,
                   pts: &Array2<f64>|
     -> Result<Array2<f64>, TrainError> {
        let to_hub = PairContext::new(z_from.clone(), hub.clone());
        let mid = crate::odeint::deform(model, &to_hub, pts, cfg)?;
        let from_hub = PairContext::new(hub.clone(), z_to.clone());
        Ok(crate::odeint::deform(model, &from_hub, &mid, cfg)?)
    };

    let i_to_j = via_hub(z_i, z_j, &p_i)?;
    let j_to_i = via_hub(z_j, z_i, &p_j)?;
    Ok(chamfer_sq_arrays(&i_to_j, &p_j) + chamfer_sq_arrays(&p_i, &j_to_i))
}

/// Direct pair loss without the hub; requires the learned odd sign network.
pub fn pairwise_loss(
    model: &FlowModel,
    table: &LatentTable,
    shape_i: usize,
    shape_j: usize,
    points_i: &PointCloud,
    points_j: &PointCloud,
    cfg: &OdeConfig,
) -> Result<f64, TrainError> {
    if model.sign_mode != SignMode::OddMlp {
        return Err(TrainError::PairwiseNeedsOddMlp);
    }
    let z_i = &table.codes[shape_i];
    let z_j = &table.codes[shape_j];
    let p_i = points_to_array(&points_i.points);
    let p_j = points_to_array(&points_j.points);
    let fwd = PairContext::new(z_i.clone(), z_j.clone());
    let bwd = fwd.reversed();
    let d_ij = crate::odeint::deform(model, &fwd, &p_i, cfg)?;
    let d_ji = crate::odeint::deform(model, &bwd, &p_j, cfg)?;
    Ok(chamfer_sq_arrays(&d_ij, &p_j) + chamfer_sq_arrays(&p_i, &d_ji))
}

/// Mean squared relative edge-length change between a mesh and its deformed
/// vertices. Degenerate source edges are skipped.
pub fn edge_regularizer(mesh_before: &Mesh, vertices_after: &[Vec3]) -> Result<f64, TrainError> {
    if vertices_after.len() != mesh_before.vertex_count() {
        return Err(TrainError::VertexCountMismatch {
            a: mesh_before.vertex_count(),
            b: vertices_after.len(),
        });
    }
    let edges = crate::geometry::edge_lengths(mesh_before);
    let mut total = 0.0;
    let mut count = 0usize;
    for ((a, b), rest) in edges {
        if rest == 0.0 {
            continue;
        }
        let now = (vertices_after[a] - vertices_after[b]).norm();
        let rel = (now - rest) / rest;
        total += rel * rel;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean squared distance between corresponding points.
pub fn vertex_l2_loss(a: &[Vec3], b: &[Vec3]) -> Result<f64, TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::VertexCountMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let total: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    Ok(total / a.len() as f64)
}

// ---------------------------------------------------------------------------
// Losses on the tape.
// ---------------------------------------------------------------------------

/// Squared-L2 symmetric Chamfer between an on-tape point tensor and a fixed
/// target cloud. Nearest-neighbor assignments come from the current values
/// and enter the tape as constants (locally constant around the footpoint).
pub fn chamfer_sq_on_tape(
    tape: &mut Tape,
    deformed: TensorId,
    target: &Array2<f64>,
    target_index: &SpatialIndex,
) -> TensorId {
    let current = crate::odeint::array_to_points(tape.value(deformed));
    let n = current.len();
    let m = target.nrows();
    // A diverged forward pass produces non-finite positions; fall back to
    // index 0 so the NaN reaches the loss value, where the training loop's
    // non-finite check aborts with a diagnostic instead of a panic here.
    let finite = current
        .iter()
        .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite());

    // deformed -> target: pick each row's nearest target point.
    let mut picked = Array2::zeros((n, 3));
    for (r, p) in current.iter().enumerate() {
        let idx = if finite { target_index.nearest(p).0 } else { 0 };
        picked[[r, 0]] = target[[idx, 0]];
        picked[[r, 1]] = target[[idx, 1]];
        picked[[r, 2]] = target[[idx, 2]];
    }
    let picked = tape.constant(picked);
    let diff_a = tape.sub(deformed, picked);
    let sq_a = tape.frob_sq(diff_a);
    let term_a = tape.scale(sq_a, 1.0 / n as f64);

    // target -> deformed: gather the nearest deformed row per target point.
    let mut gather_idx = Vec::with_capacity(m);
    if finite {
        let deformed_index = SpatialIndex::build(&current);
        for r in 0..m {
            let q = Vec3::new(target[[r, 0]], target[[r, 1]], target[[r, 2]]);
            gather_idx.push(deformed_index.nearest(&q).0);
        }
    } else {
        gather_idx.resize(m, 0);
    }
    let gathered = tape.gather_rows(deformed, gather_idx);
    let target_const = tape.constant(target.clone());
    let diff_b = tape.sub(gathered, target_const);
    let sq_b = tape.frob_sq(diff_b);
    let term_b = tape.scale(sq_b, 1.0 / m as f64);

    tape.add(term_a, term_b)
}

/// Mean squared distance to a fixed correspondence target.
pub fn vertex_l2_on_tape(tape: &mut Tape, deformed: TensorId, target: &Array2<f64>) -> TensorId {
    let n = target.nrows();
    let t = tape.constant(target.clone());
    let diff = tape.sub(deformed, t);
    let sq = tape.frob_sq(diff);
    tape.scale(sq, 1.0 / n as f64)
}

/// Edge endpoints and rest lengths prepared for the on-tape isometry term.
pub struct EdgeBatch {
    pub rows_a: Vec<usize>,
    pub rows_b: Vec<usize>,
    pub rest: Vec<f64>,
}

impl EdgeBatch {
    /// Pick up to `max_edges` non-degenerate edges (seeded subset when over
    /// the cap). Returns the batch plus the mesh-vertex indices that must be
    /// advected for it; `rows_a`/`rows_b` index into that list.
    pub fn build(mesh: &Mesh, max_edges: usize, rng: &mut impl Rng) -> (EdgeBatch, Vec<usize>) {
        let mut edges: Vec<((usize, usize), f64)> = crate::geometry::edge_lengths(mesh)
            .into_iter()
            .filter(|(_, rest)| *rest > 0.0)
            .collect();
        if edges.len() > max_edges {
            edges.shuffle(rng);
            edges.truncate(max_edges);
            edges.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        }
        let mut vertex_rows: Vec<usize> = Vec::new();
        let mut row_of = std::collections::HashMap::new();
        let mut rows_a = Vec::with_capacity(edges.len());
        let mut rows_b = Vec::with_capacity(edges.len());
        let mut rest = Vec::with_capacity(edges.len());
        for ((a, b), r) in edges {
            let ra = *row_of.entry(a).or_insert_with(|| {
                vertex_rows.push(a);
                vertex_rows.len() - 1
            });
            let rb = *row_of.entry(b).or_insert_with(|| {
                vertex_rows.push(b);
                vertex_rows.len() - 1
            });
            rows_a.push(ra);
            rows_b.push(rb);
            rest.push(r);
        }
        (
            EdgeBatch {
                rows_a,
                rows_b,
                rest,
            },
            vertex_rows,
        )
    }

    pub fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }

    /// Mean squared relative length change of the advected edge endpoints.
    pub fn loss_on_tape(&self, tape: &mut Tape, advected_vertices: TensorId) -> TensorId {
        let va = tape.gather_rows(advected_vertices, self.rows_a.clone());
        let vb = tape.gather_rows(advected_vertices, self.rows_b.clone());
        let d = tape.sub(va, vb);
        let lens = tape.row_norms(d);
        let e = self.rest.len();
        let rest_col = tape.constant(Array2::from_shape_vec((e, 1), self.rest.clone()).unwrap());
        let inv_rest = tape.constant(
            Array2::from_shape_vec((e, 1), self.rest.iter().map(|r| 1.0 / r).collect()).unwrap(),
        );
        let delta = tape.sub(lens, rest_col);
        let rel = tape.mul(delta, inv_rest);
        let sq = tape.square(rel);
        tape.mean(sq)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

/// Everything needed to resume or serve a trained deformation space.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub latents: LatentTable,
    pub config: TrainConfig,
    pub dataset: Option<DatasetManifest>,
}

fn mlp_tensors(prefix: &str, params: &MlpParams, out: &mut Vec<TensorEntry>) {
    for (l, layer) in params.layers.iter().enumerate() {
        let (rows, cols) = layer.weight.dim();
        out.push(TensorEntry::new(
            format!("{prefix}.w{l}"),
            vec![rows, cols],
            layer.weight.iter().copied().collect(),
        ));
        out.push(TensorEntry::new(
            format!("{prefix}.b{l}"),
            vec![cols],
            layer.bias.to_vec(),
        ));
    }
}

fn mlp_from_tensors(
    prefix: &str,
    widths: &[usize],
    activations: &[Activation],
    data: &CheckpointData,
) -> Result<MlpParams, TrainError> {
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for l in 0..widths.len() - 1 {
        let w_name = format!("{prefix}.w{l}");
        let b_name = format!("{prefix}.b{l}");
        let w = data
            .tensor(&w_name)
            .ok_or_else(|| TrainError::MissingTensor(w_name.clone()))?;
        let b = data
            .tensor(&b_name)
            .ok_or(TrainError::MissingTensor(b_name))?;
        let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
            .map_err(|e| TrainError::Config(e.to_string()))?;
        layers.push(crate::numerics::Layer {
            weight,
            bias: ndarray::Array1::from_vec(b.data.clone()),
            activation: activations[l],
        });
    }
    Ok(MlpParams { layers })
}

impl Checkpoint {
    pub fn to_data(&self) -> CheckpointData {
        let backbone_widths = self.model.backbone.widths();
        let backbone_acts: Vec<&str> = self
            .model
            .backbone
            .layers
            .iter()
            .map(|l| l.activation.name())
            .collect();
        let sign_meta = self.model.sign_net.as_ref().map(|net| {
            serde_json::json!({
                "widths": net.widths(),
                "activations": net.layers.iter().map(|l| l.activation.name()).collect::<Vec<_>>(),
            })
        });
        let meta = serde_json::json!({
            "kind": "flowmorph-checkpoint",
            "version": 1,
            "model": {
                "latent_dim": self.model.latent_dim,
                "n_f": self.model.n_f,
                "mode": self.model.mode.name(),
                "symmetry": self.model.symmetry.name(),
                "sign": self.model.sign_mode.name(),
                "backbone_widths": backbone_widths,
                "backbone_activations": backbone_acts,
                "sign_net": sign_meta,
            },
            "num_shapes": self.latents.len(),
            "train_config": self.config,
            "dataset": self.dataset,
        });
        let mut tensors = Vec::new();
        mlp_tensors("backbone", &self.model.backbone, &mut tensors);
        if let Some(net) = &self.model.sign_net {
            mlp_tensors("sign", net, &mut tensors);
        }
        let mut latent_data = Vec::with_capacity(self.latents.len() * self.latents.dim);
        for code in &self.latents.codes {
            latent_data.extend_from_slice(&code.0);
        }
        tensors.push(TensorEntry::new(
            "latents",
            vec![self.latents.len(), self.latents.dim],
            latent_data,
        ));
        CheckpointData { meta, tensors }
    }

    pub fn from_data(data: &CheckpointData) -> Result<Checkpoint, TrainError> {
        let meta = &data.meta;
        let model_meta = &meta["model"];
        let parse_acts = |v: &serde_json::Value| -> Result<Vec<Activation>, TrainError> {
            v.as_array()
                .ok_or_else(|| TrainError::Config("bad activations list".into()))?
                .iter()
                .map(|a| {
                    a.as_str()
                        .and_then(Activation::parse)
                        .ok_or_else(|| TrainError::Config("bad activation name".into()))
                })
                .collect()
        };
        let widths: Vec<usize> = model_meta["backbone_widths"]
            .as_array()
            .ok_or_else(|| TrainError::Config("missing backbone_widths".into()))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        let acts = parse_acts(&model_meta["backbone_activations"])?;
        let backbone = mlp_from_tensors("backbone", &widths, &acts, data)?;

        let sign_net = if model_meta["sign_net"].is_object() {
            let sw: Vec<usize> = model_meta["sign_net"]["widths"]
                .as_array()
                .ok_or_else(|| TrainError::Config("missing sign widths".into()))?
                .iter()
                .map(|v| v.as_u64().unwrap_or(0) as usize)
                .collect();
            let sa = parse_acts(&model_meta["sign_net"]["activations"])?;
            Some(mlp_from_tensors("sign", &sw, &sa, data)?)
        } else {
            None
        };

        let latent_dim = model_meta["latent_dim"].as_u64().unwrap_or(0) as usize;
        let mode = model_meta["mode"]
            .as_str()
            .and_then(FlowMode::parse)
            .ok_or_else(|| TrainError::Config("bad mode".into()))?;
        let symmetry = model_meta["symmetry"]
            .as_str()
            .and_then(SymmetryMode::parse)
            .ok_or_else(|| TrainError::Config("bad symmetry".into()))?;
        let sign_mode = model_meta["sign"]
            .as_str()
            .and_then(SignMode::parse)
            .ok_or_else(|| TrainError::Config("bad sign".into()))?;
        let n_f = model_meta["n_f"].as_u64().unwrap_or(0) as usize;

        let model = FlowModel {
            backbone,
            sign_net,
            mode,
            symmetry,
            sign_mode,
            latent_dim,
            n_f,
        };
        model.validate()?;

        let latents_entry = data
            .tensor("latents")
            .ok_or_else(|| TrainError::MissingTensor("latents".into()))?;
        let count = latents_entry.shape[0];
        let dim = latents_entry.shape[1];
        let codes = (0..count)
            .map(|i| LatentCode(latents_entry.data[i * dim..(i + 1) * dim].to_vec()))
            .collect();

        let config: TrainConfig = serde_json::from_value(meta["train_config"].clone())
            .map_err(|e| TrainError::Config(format!("bad train_config: {e}")))?;
        let dataset: Option<DatasetManifest> = match &meta["dataset"] {
            serde_json::Value::Null => None,
            v => serde_json::from_value(v.clone())
                .map_err(|e| TrainError::Config(format!("bad dataset: {e}")))?,
        };

        Ok(Checkpoint {
            model,
            latents: LatentTable { codes, dim },
            config,
            dataset,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        Ok(self.to_data().save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<Checkpoint, TrainError> {
        Checkpoint::from_data(&CheckpointData::load(dir)?)
    }
}

// ---------------------------------------------------------------------------
// The training loop.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub chamfer: f64,
    pub edge: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepMetrics>,
}

struct Optimizer {
    backbone: Vec<(AdamState, AdamState)>,
    sign: Vec<AdamState>,
    latents: Vec<AdamState>,
    hyper: AdamHyper,
}

impl Optimizer {
    fn new(model: &FlowModel, table: &LatentTable) -> Optimizer {
        Optimizer {
            backbone: model
                .backbone
                .layers
                .iter()
                .map(|l| (AdamState::new(l.weight.len()), AdamState::new(l.bias.len())))
                .collect(),
            sign: model
                .sign_net
                .iter()
                .flat_map(|net| net.layers.iter().map(|l| AdamState::new(l.weight.len())))
                .collect(),
            latents: table
                .codes
                .iter()
                .map(|c| AdamState::new(c.0.len()))
                .collect(),
            hyper: AdamHyper::default(),
        }
    }
}

/// Accumulated batch gradients for one optimization step.
struct GradAccum {
    backbone: Vec<(Array2<f64>, ndarray::Array1<f64>)>,
    sign: Vec<Array2<f64>>,
    latents: std::collections::BTreeMap<usize, Vec<f64>>,
    pairs: usize,
}

impl GradAccum {
    fn new(model: &FlowModel) -> GradAccum {
        GradAccum {
            backbone: model
                .backbone
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weight.dim()),
                        ndarray::Array1::zeros(l.bias.len()),
                    )
                })
                .collect(),
            sign: model
                .sign_net
                .iter()
                .flat_map(|net| net.layers.iter().map(|l| Array2::zeros(l.weight.dim())))
                .collect(),
            latents: std::collections::BTreeMap::new(),
            pairs: 0,
        }
    }

    fn add_backbone(&mut self, grads: Vec<(Array2<f64>, ndarray::Array1<f64>)>) {
        for ((gw, gb), (aw, ab)) in grads.into_iter().zip(&mut self.backbone) {
            *aw += &gw;
            *ab += &gb;
        }
    }

    fn add_sign(&mut self, grads: Vec<(Array2<f64>, ndarray::Array1<f64>)>) {
        for ((gw, _), acc) in grads.into_iter().zip(&mut self.sign) {
            *acc += &gw;
        }
    }

    fn add_latent(&mut self, shape: usize, grad: &Gradients, id: TensorId, dim: usize) {
        let g = grad.dense(id, (1, dim));
        let entry = self.latents.entry(shape).or_insert_with(|| vec![0.0; dim]);
        for (slot, v) in entry.iter_mut().zip(g.iter()) {
            *slot += v;
        }
    }
}

struct PairLossOutput {
    total: f64,
    chamfer: f64,
    edge: f64,
    grads: Gradients,
    z_i_id: TensorId,
    z_j_id: TensorId,
    backbone: Vec<(Array2<f64>, ndarray::Array1<f64>)>,
    sign: Option<Vec<(Array2<f64>, ndarray::Array1<f64>)>>,
}

/// One hub-and-spoke pair: build the taped loss, backpropagate, and return
/// values plus gradients. Edge batches, when present, are advected alongside
/// the samples in the same integrations.
#[allow(clippy::too_many_arguments)]
fn hub_spoke_pair_grads(
    model: &FlowModel,
    z_i: &LatentCode,
    z_j: &LatentCode,
    samples_i: &Array2<f64>,
    samples_j: &Array2<f64>,
    edge_i: Option<(&EdgeBatch, &Array2<f64>)>,
    edge_j: Option<(&EdgeBatch, &Array2<f64>)>,
    lambda_edge: f64,
    rk4_steps: usize,
) -> Result<PairLossOutput, TrainError> {
    let hub = LatentCode::hub(z_i.dim());
    let mut tape = Tape::new();
    let taped = TapedModel::register(&mut tape, model, true)?;
    let code_i = TapedCode::variable(&mut tape, z_i);
    let code_j = TapedCode::variable(&mut tape, z_j);
    let code_hub = TapedCode::constant(&mut tape, &hub);

    let index_i = SpatialIndex::build(&crate::odeint::array_to_points(samples_i));
    let index_j = SpatialIndex::build(&crate::odeint::array_to_points(samples_j));

    let stack = |samples: &Array2<f64>, edge: &Option<(&EdgeBatch, &Array2<f64>)>| -> Array2<f64> {
        match edge {
            None => samples.clone(),
            Some((_, verts)) => {
                let mut out = Array2::zeros((samples.nrows() + verts.nrows(), 3));
                out.slice_mut(ndarray::s![..samples.nrows(), ..]).assign(samples);
                out.slice_mut(ndarray::s![samples.nrows().., ..]).assign(*verts);
                out
            }
        }
    };

    let advect = |tape: &mut Tape,
                  from: &TapedCode,
                  to: &TapedCode,
                  pts: Array2<f64>|
     -> Result<TensorId, TrainError> {
        let path_a = taped.path(tape, from, &code_hub)?;
        let x0 = tape.constant(pts);
        let mid = rk4_on_tape(tape, &path_a, x0, (0.0, 1.0), rk4_steps);
        let path_b = taped.path(tape, &code_hub, to)?;
        Ok(rk4_on_tape(tape, &path_b, mid, (0.0, 1.0), rk4_steps))
    };

    let n_i = samples_i.nrows();
    let n_j = samples_j.nrows();

    let adv_i = advect(&mut tape, &code_i, &code_j, stack(samples_i, &edge_i))?;
    let adv_j = advect(&mut tape, &code_j, &code_i, stack(samples_j, &edge_j))?;

    let samples_adv_i = tape.gather_rows(adv_i, (0..n_i).collect());
    let samples_adv_j = tape.gather_rows(adv_j, (0..n_j).collect());

    let term1 = chamfer_sq_on_tape(&mut tape, samples_adv_i, samples_j, &index_j);
    let term2 = chamfer_sq_on_tape(&mut tape, samples_adv_j, samples_i, &index_i);
    let chamfer_id = tape.add(term1, term2);

    let mut edge_terms: Vec<TensorId> = Vec::new();
    if lambda_edge > 0.0 {
        if let Some((batch, verts)) = &edge_i {
            if !batch.is_empty() {
                let rows = (n_i..n_i + verts.nrows()).collect();
                let adv_verts = tape.gather_rows(adv_i, rows);
                edge_terms.push(batch.loss_on_tape(&mut tape, adv_verts));
            }
        }
        if let Some((batch, verts)) = &edge_j {
            if !batch.is_empty() {
                let rows = (n_j..n_j + verts.nrows()).collect();
                let adv_verts = tape.gather_rows(adv_j, rows);
                edge_terms.push(batch.loss_on_tape(&mut tape, adv_verts));
            }
        }
    }
    let (total_id, edge_value) = if edge_terms.is_empty() {
        (chamfer_id, 0.0)
    } else {
        let mut acc = edge_terms[0];
        for t in &edge_terms[1..] {
            acc = tape.add(acc, *t);
        }
        let mean_edges = tape.scale(acc, 1.0 / edge_terms.len() as f64);
        let value = tape.scalar(mean_edges);
        (tape.add_scaled(chamfer_id, mean_edges, lambda_edge), value)
    };

    let chamfer_value = tape.scalar(chamfer_id);
    let total = tape.scalar(total_id);
    let grads = tape.backward(total_id).map_err(FlowError::from)?;
    let backbone = taped.backbone_grads(&grads);
    let sign = taped.sign_grads(&grads);
    Ok(PairLossOutput {
        total,
        chamfer: chamfer_value,
        edge: edge_value,
        grads,
        z_i_id: code_i.id,
        z_j_id: code_j.id,
        backbone,
        sign,
    })
}

/// Latent-code gradients of the hub-and-spoke pair loss (no edge terms).
/// The finite-difference invariant suites check these end to end.
pub fn hub_spoke_pair_gradients(
    model: &FlowModel,
    z_i: &LatentCode,
    z_j: &LatentCode,
    samples_i: &Array2<f64>,
    samples_j: &Array2<f64>,
    rk4_steps: usize,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let out = hub_spoke_pair_grads(
        model, z_i, z_j, samples_i, samples_j, None, None, 0.0, rk4_steps,
    )?;
    let dim = z_i.dim();
    let gi = out
        .grads
        .dense(out.z_i_id, (1, dim))
        .into_raw_vec_and_offset()
        .0;
    let gj = out
        .grads
        .dense(out.z_j_id, (1, dim))
        .into_raw_vec_and_offset()
        .0;
    Ok((gi, gj))
}

/// Hub-and-spoke training over the manifest's train split. Deterministic for
/// a fixed seed. When `out_dir` is given, checkpoints, a metrics CSV, and the
/// effective config are written there.
pub fn train(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    let meshes = manifest.load_split(Split::Train)?;
    if meshes.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    train_on_meshes(&meshes, Some(manifest.clone()), cfg, out_dir)
}

/// Training entry point over already-loaded, normalized meshes.
pub fn train_on_meshes(
    meshes: &[Mesh],
    dataset: Option<DatasetManifest>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if meshes.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    let n = meshes.len();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut latent_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut loop_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let mut model = FlowModel::init(
        cfg.latent_dim,
        cfg.n_f,
        cfg.activation,
        cfg.mode,
        cfg.symmetry,
        cfg.sign,
        &mut model_rng,
    )?;
    let mut table = LatentTable::init(n, cfg.latent_dim, &mut latent_rng);
    let mut opt = Optimizer::new(&model, &table);

    let mut history = Vec::with_capacity(cfg.steps);
    let mut csv = String::from("step,total,chamfer,edge\n");

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        std::fs::write(dir.join("effective_config.txt"), cfg.to_kv_text())
            .map_err(|e| io_err(&dir.join("effective_config.txt"), e))?;
    }

    // All unordered pairs; a single-shape set trains the identity round trip.
    let mut all_pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            all_pairs.push((i, j));
        }
    }
    if all_pairs.is_empty() {
        all_pairs.push((0, 0));
    }

    for step in 0..cfg.steps {
        let mut pairs = all_pairs.clone();
        pairs.shuffle(&mut loop_rng);
        pairs.truncate(cfg.batch_size.min(pairs.len()));

        let mut accum = GradAccum::new(&model);
        let mut total = 0.0;
        let mut chamfer_total = 0.0;
        let mut edge_total = 0.0;

        for &(i, j) in &pairs {
            let seed_i: u64 = loop_rng.gen();
            let seed_j: u64 = loop_rng.gen();
            let cloud_i = sample_surface(&meshes[i], cfg.samples_per_shape, seed_i)?;
            let cloud_j = sample_surface(&meshes[j], cfg.samples_per_shape, seed_j)?;
            let samples_i = points_to_array(&cloud_i.points);
            let samples_j = points_to_array(&cloud_j.points);

            let edge_data = if cfg.lambda_edge > 0.0 {
                let (batch_i, rows_i) =
                    EdgeBatch::build(&meshes[i], cfg.max_edges_per_shape, &mut loop_rng);
                let verts_i = points_to_array(
                    &rows_i
                        .iter()
                        .map(|&v| meshes[i].vertices[v])
                        .collect::<Vec<_>>(),
                );
                let (batch_j, rows_j) =
                    EdgeBatch::build(&meshes[j], cfg.max_edges_per_shape, &mut loop_rng);
                let verts_j = points_to_array(
                    &rows_j
                        .iter()
                        .map(|&v| meshes[j].vertices[v])
                        .collect::<Vec<_>>(),
                );
                Some(((batch_i, verts_i), (batch_j, verts_j)))
            } else {
                None
            };

            let out = hub_spoke_pair_grads(
                &model,
                &table.codes[i],
                &table.codes[j],
                &samples_i,
                &samples_j,
                edge_data.as_ref().map(|((b, v), _)| (b, v)),
                edge_data.as_ref().map(|(_, (b, v))| (b, v)),
                cfg.lambda_edge,
                cfg.rk4_steps,
            )?;

            total += out.total;
            chamfer_total += out.chamfer;
            edge_total += out.edge;
            accum.add_backbone(out.backbone);
            if let Some(sign) = out.sign {
                accum.add_sign(sign);
            }
            accum.add_latent(i, &out.grads, out.z_i_id, cfg.latent_dim);
            accum.add_latent(j, &out.grads, out.z_j_id, cfg.latent_dim);
            accum.pairs += 1;
        }

        let batch = accum.pairs.max(1) as f64;
        let metrics = StepMetrics {
            step,
            total: total / batch,
            chamfer: chamfer_total / batch,
            edge: edge_total / batch,
        };
        if !metrics.total.is_finite() {
            let diagnostic = if let Some(dir) = out_dir {
                let path = dir.join("diagnostic");
                let ck = Checkpoint {
                    model: model.clone(),
                    latents: table.clone(),
                    config: cfg.clone(),
                    dataset: dataset.clone(),
                };
                ck.save(&path)?;
                Some(path)
            } else {
                None
            };
            return Err(TrainError::NonFiniteLoss { step, diagnostic });
        }
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            metrics.step, metrics.total, metrics.chamfer, metrics.edge
        );
        history.push(metrics);

        // Parameter update: batch-mean gradients, Adam per tensor. Only the
        // latents of shapes in the batch move.
        for (l, (gw, gb)) in accum.backbone.iter().enumerate() {
            let layer = &mut model.backbone.layers[l];
            let gw_mean: Vec<f64> = gw.iter().map(|v| v / batch).collect();
            let gb_mean: Vec<f64> = gb.iter().map(|v| v / batch).collect();
            opt.backbone[l].0.step(
                layer.weight.as_slice_mut().unwrap(),
                &gw_mean,
                cfg.lr,
                &opt.hyper,
            )?;
            opt.backbone[l].1.step(
                layer.bias.as_slice_mut().unwrap(),
                &gb_mean,
                cfg.lr,
                &opt.hyper,
            )?;
        }
        if let Some(net) = &mut model.sign_net {
            for (l, gw) in accum.sign.iter().enumerate() {
                let gw_mean: Vec<f64> = gw.iter().map(|v| v / batch).collect();
                opt.sign[l].step(
                    net.layers[l].weight.as_slice_mut().unwrap(),
                    &gw_mean,
                    cfg.lr,
                    &opt.hyper,
                )?;
            }
        }
        for (&shape, grad) in &accum.latents {
            let g_mean: Vec<f64> = grad.iter().map(|v| v / batch).collect();
            opt.latents[shape].step(&mut table.codes[shape].0, &g_mean, cfg.lr, &opt.hyper)?;
        }

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let ck = Checkpoint {
                    model: model.clone(),
                    latents: table.clone(),
                    config: cfg.clone(),
                    dataset: dataset.clone(),
                };
                ck.save(&dir.join(format!("step_{:06}", step + 1)))?;
            }
        }
    }

    let checkpoint = Checkpoint {
        model,
        latents: table,
        config: cfg.clone(),
        dataset,
    };
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("final"))?;
        std::fs::write(dir.join("metrics.csv"), csv)
            .map_err(|e| io_err(&dir.join("metrics.csv"), e))?;
    }
    Ok(TrainResult {
        checkpoint,
        history,
    })
}

/// Evaluation Chamfer-L1 between shape i deformed through the hub onto shape
/// j, and shape j itself.
pub fn eval_pair_chamfer(
    checkpoint: &Checkpoint,
    meshes: &[Mesh],
    i: usize,
    j: usize,
    samples: usize,
    seed: u64,
    ode: &OdeConfig,
) -> Result<f64, TrainError> {
    let cloud_i = sample_surface(&meshes[i], samples, seed)?;
    let cloud_j = sample_surface(&meshes[j], samples, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let hub = checkpoint.latents.hub();
    let to_hub = PairContext::new(checkpoint.latents.codes[i].clone(), hub.clone());
    let mid = deform_cloud(&checkpoint.model, &to_hub, &cloud_i, ode)?;
    let from_hub = PairContext::new(hub, checkpoint.latents.codes[j].clone());
    let deformed = deform_cloud(&checkpoint.model, &from_hub, &mid, ode)?;
    Ok(crate::geometry::chamfer(
        &deformed,
        &cloud_j,
        crate::geometry::ChamferVariant::L1Eval,
    )?)
}
