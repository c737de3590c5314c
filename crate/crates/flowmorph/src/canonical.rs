//! Canonicalization and dense correspondence through the hub.
//!
//! Deforming every shape to the zero hub code aligns the collection in one
//! canonical frame; correspondences come from exact nearest-neighbor queries
//! between canonicalized vertex sets, and are scored by the fraction of
//! matched vertex pairs sharing a semantic label (both directions averaged).

use std::path::Path;

use serde::Serialize;

use crate::flowfield::{FlowModel, LatentCode, PairContext};
use crate::geometry::{GeometryError, Mesh, SpatialIndex};
use crate::odeint::{deform_mesh, OdeConfig};
use crate::training::TrainError;

/// For each vertex of the source, the matched target vertex and the distance
/// between their canonical positions.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub target_index: Vec<usize>,
    pub canonical_distance: Vec<f64>,
}

impl Correspondence {
    pub fn len(&self) -> usize {
        self.target_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_index.is_empty()
    }

    /// CSV rows: source index, target index, canonical distance.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,target,canonical_distance\n");
        for (s, (&t, &d)) in self
            .target_index
            .iter()
            .zip(&self.canonical_distance)
            .enumerate()
        {
            out.push_str(&format!("{s},{t},{d}\n"));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Advect a shape's vertices to the hub frame; connectivity and labels are
/// untouched.
pub fn canonicalize(
    model: &FlowModel,
    code: &LatentCode,
    mesh: &Mesh,
    cfg: &OdeConfig,
) -> Result<Mesh, TrainError> {
    let hub = LatentCode::hub(code.dim());
    let ctx = PairContext::new(code.clone(), hub);
    Ok(deform_mesh(model, &ctx, mesh, cfg)?)
}

fn nearest_map(source: &Mesh, target: &Mesh) -> Correspondence {
    let index = SpatialIndex::build(&target.vertices);
    let mut target_index = Vec::with_capacity(source.vertex_count());
    let mut canonical_distance = Vec::with_capacity(source.vertex_count());
    for v in &source.vertices {
        let (idx, d_sq) = index.nearest(v);
        target_index.push(idx);
        canonical_distance.push(d_sq.sqrt());
    }
    Correspondence {
        target_index,
        canonical_distance,
    }
}

/// Dense correspondence from shape i to shape j through canonical space:
/// each canonicalized source vertex matches its exact nearest canonicalized
/// target vertex (ties to the lowest index).
pub fn correspond(
    model: &FlowModel,
    mesh_i: &Mesh,
    code_i: &LatentCode,
    mesh_j: &Mesh,
    code_j: &LatentCode,
    cfg: &OdeConfig,
) -> Result<Correspondence, TrainError> {
    let canon_i = canonicalize(model, code_i, mesh_i, cfg)?;
    let canon_j = canonicalize(model, code_j, mesh_j, cfg)?;
    Ok(nearest_map(&canon_i, &canon_j))
}

/// Baseline: nearest neighbor in the undeformed frame, same tie rule.
pub fn naive_correspond(mesh_i: &Mesh, mesh_j: &Mesh) -> Correspondence {
    nearest_map(mesh_i, mesh_j)
}

/// Semantic matching score for a shape pair.
#[derive(Debug, Clone, Serialize)]
pub struct SmsReport {
    /// Mean of the two directional sub-scores, in [0, 1].
    pub score: f64,
    pub forward_score: f64,
    pub backward_score: f64,
    pub matched_pairs: usize,
}

/// Fraction of matched vertex pairs whose semantic labels agree, averaged
/// over both directions. Requires labels on both meshes.
pub fn sms(
    mesh_i: &Mesh,
    mesh_j: &Mesh,
    forward: &Correspondence,
    backward: &Correspondence,
) -> Result<SmsReport, TrainError> {
    let labels_i = mesh_i
        .labels
        .as_ref()
        .ok_or(TrainError::Geometry(GeometryError::LabelCountMismatch {
            labels: 0,
            vertices: mesh_i.vertex_count(),
        }))?;
    let labels_j = mesh_j
        .labels
        .as_ref()
        .ok_or(TrainError::Geometry(GeometryError::LabelCountMismatch {
            labels: 0,
            vertices: mesh_j.vertex_count(),
        }))?;

    let directional = |labels_from: &[u32], labels_to: &[u32], corr: &Correspondence| -> f64 {
        let hits = labels_from
            .iter()
            .zip(&corr.target_index)
            .filter(|(l, &t)| **l == labels_to[t])
            .count();
        hits as f64 / labels_from.len() as f64
    };
    let forward_score = directional(labels_i, labels_j, forward);
    let backward_score = directional(labels_j, labels_i, backward);
    Ok(SmsReport {
        score: 0.5 * (forward_score + backward_score),
        forward_score,
        backward_score,
        matched_pairs: forward.len() + backward.len(),
    })
}
