//! Triangle meshes, point clouds, surface sampling, nearest-neighbor queries,
//! Chamfer distances, and mesh diagnostics (signed volume, edge lengths,
//! self-intersection counts).
//!
//! Shapes are dimensionless; [`normalize_to_unit`] rescales a mesh so its
//! bounding box is centered at the origin with longest axis 1, which is the
//! frame every learned component assumes.

mod chamfer;
mod intersect;
mod io;
mod kdtree;
mod sampling;

pub use chamfer::{chamfer, ChamferVariant};
pub use intersect::{count_triangle_intersections, count_triangle_intersections_brute, triangles_intersect};
pub use io::{load_mesh, load_point_cloud, save_mesh, LoadReport, MeshFormat};
pub use kdtree::SpatialIndex;
pub use sampling::{sample_surface, sample_surface_with_normals};

use nalgebra::Vector3;
use thiserror::Error;

/// 3D coordinate/vector type used throughout the geometry layer.
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("face index {index} out of range for {vertex_count} vertices")]
    FaceIndexOutOfRange { index: usize, vertex_count: usize },
    #[error("label count {labels} does not match vertex count {vertices}")]
    LabelCountMismatch { labels: usize, vertices: usize },
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("point cloud is empty")]
    EmptyPointCloud,
    #[error("all vertices coincide; zero extent in every axis")]
    ZeroExtent,
    #[error("mesh has no triangle with positive area")]
    AllTrianglesDegenerate,
    #[error("unsupported format for {path}: {message}")]
    UnsupportedFormat { path: String, message: String },
}

/// Triangle mesh: ordered vertices, triangle faces, optional per-vertex
/// semantic label ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub labels: Option<Vec<u32>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        let mesh = Mesh {
            vertices,
            faces,
            labels: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_labels(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        labels: Vec<u32>,
    ) -> Result<Self, GeometryError> {
        if labels.len() != vertices.len() {
            return Err(GeometryError::LabelCountMismatch {
                labels: labels.len(),
                vertices: vertices.len(),
            });
        }
        let mesh = Mesh {
            vertices,
            faces,
            labels: Some(labels),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<(), GeometryError> {
        for face in &self.faces {
            for &idx in face {
                if idx >= self.vertices.len() {
                    return Err(GeometryError::FaceIndexOutOfRange {
                        index: idx,
                        vertex_count: self.vertices.len(),
                    });
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.vertices.len() {
                return Err(GeometryError::LabelCountMismatch {
                    labels: labels.len(),
                    vertices: self.vertices.len(),
                });
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity and labels, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Mesh {
        assert_eq!(vertices.len(), self.vertices.len(), "vertex count must be preserved");
        Mesh {
            vertices,
            faces: self.faces.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        Some((lo, hi))
    }
}

/// Unordered 3D point samples with optional per-point label ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<Vec3>, labels: Vec<u32>) -> Result<Self, GeometryError> {
        if labels.len() != points.len() {
            return Err(GeometryError::LabelCountMismatch {
                labels: labels.len(),
                vertices: points.len(),
            });
        }
        Ok(PointCloud {
            points,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rescale so the bounding box is centered at the origin with longest axis 1.
///
/// Returns the normalized mesh together with the inverse transform:
/// `original = normalized * scale + offset`.
pub fn normalize_to_unit(mesh: &Mesh) -> Result<(Mesh, f64, Vec3), GeometryError> {
    let (lo, hi) = mesh.bounding_box().ok_or(GeometryError::EmptyMesh)?;
    let extent = hi - lo;
    let scale = extent.max();
    if scale <= 0.0 {
        return Err(GeometryError::ZeroExtent);
    }
    let offset = (lo + hi) * 0.5;
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| (v - offset) / scale)
        .collect();
    Ok((mesh.with_vertices(vertices), scale, offset))
}

/// Divergence-theorem signed volume: (1/6) Σ_faces det[v0 v1 v2].
///
/// Meaningful only for closed, consistently oriented meshes; the sign follows
/// the face orientation.
pub fn signed_volume(mesh: &Mesh) -> f64 {
    let mut six_vol = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        six_vol += a.dot(&b.cross(&c));
    }
    six_vol / 6.0
}

/// Undirected edges of the triangle graph with their lengths, ordered by
/// sorted index pair. A face with a repeated vertex contributes a zero-length
/// self edge rather than an error.
pub fn edge_lengths(mesh: &Mesh) -> Vec<((usize, usize), f64)> {
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(mesh.faces.len() * 3);
    for face in &mesh.faces {
        for (a, b) in [(face[0], face[1]), (face[1], face[2]), (face[2], face[0])] {
            edges.push((a.min(b), a.max(b)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
        .into_iter()
        .map(|(a, b)| ((a, b), (mesh.vertices[a] - mesh.vertices[b]).norm()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;

    #[test]
    fn normalize_cube_reports_inverse_transform() {
        let mut cube = toy::unit_cube();
        for v in &mut cube.vertices {
            // unit cube spans -0.5..0.5; rescale to (0,0,0)..(2,2,2)
            *v = *v * 2.0 + Vec3::new(1.0, 1.0, 1.0);
        }
        let (norm, scale, offset) = normalize_to_unit(&cube).unwrap();
        assert_eq!(scale, 2.0);
        assert_eq!(offset, Vec3::new(1.0, 1.0, 1.0));
        let (lo, hi) = norm.bounding_box().unwrap();
        assert_eq!(lo, Vec3::new(-0.5, -0.5, -0.5));
        assert_eq!(hi, Vec3::new(0.5, 0.5, 0.5));
    }

    #[test]
    fn normalize_already_normalized_is_identity() {
        let cube = toy::unit_cube();
        let (_, scale, offset) = normalize_to_unit(&cube).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(offset, Vec3::zeros());
    }

    #[test]
    fn normalize_flat_plate_keeps_zero_extent_axis() {
        let verts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(2.0, 2.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
        ];
        let mesh = Mesh::new(verts, vec![[0, 1, 2], [0, 2, 3]]).unwrap();
        let (norm, scale, _) = normalize_to_unit(&mesh).unwrap();
        assert_eq!(scale, 2.0);
        let (lo, hi) = norm.bounding_box().unwrap();
        assert_eq!(hi.z - lo.z, 0.0);
        assert_eq!(hi.x - lo.x, 1.0);
    }

    #[test]
    fn normalize_degenerate_mesh_errors() {
        let verts = vec![Vec3::new(1.0, 2.0, 3.0); 4];
        let mesh = Mesh::new(verts, vec![[0, 1, 2]]).unwrap();
        assert!(matches!(
            normalize_to_unit(&mesh),
            Err(GeometryError::ZeroExtent)
        ));
    }

    #[test]
    fn cube_volume_is_one() {
        let cube = toy::unit_cube();
        assert!((signed_volume(&cube) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flipped_cube_volume_is_minus_one() {
        let mut cube = toy::unit_cube();
        for f in &mut cube.faces {
            f.swap(1, 2);
        }
        assert!((signed_volume(&cube) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cube_edge_census() {
        let cube = toy::unit_cube();
        let edges = edge_lengths(&cube);
        assert_eq!(edges.len(), 18);
        let unit = edges.iter().filter(|(_, l)| (l - 1.0).abs() < 1e-12).count();
        let diag = edges
            .iter()
            .filter(|(_, l)| (l - 2f64.sqrt()).abs() < 1e-12)
            .count();
        assert_eq!(unit, 12);
        assert_eq!(diag, 6);
    }

    #[test]
    fn degenerate_face_reports_zero_length_edge() {
        let verts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let mesh = Mesh::new(verts, vec![[0, 0, 1]]).unwrap();
        let edges = edge_lengths(&mesh);
        assert_eq!(edges.len(), 2);
        assert_eq!(edges[0], ((0, 0), 0.0));
        assert_eq!(edges[1], ((0, 1), 1.0));
    }

    #[test]
    fn edge_lengths_scale_linearly() {
        let cube = toy::unit_cube();
        let scaled = cube.with_vertices(cube.vertices.iter().map(|v| v * 3.5).collect());
        let base = edge_lengths(&cube);
        let big = edge_lengths(&scaled);
        for ((ea, la), (eb, lb)) in base.iter().zip(&big) {
            assert_eq!(ea, eb);
            assert!((lb - la * 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn face_index_out_of_range_rejected() {
        let verts = vec![Vec3::zeros(); 3];
        assert!(matches!(
            Mesh::new(verts, vec![[0, 1, 9]]),
            Err(GeometryError::FaceIndexOutOfRange { index: 9, .. })
        ));
    }
}
