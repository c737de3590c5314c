//! Area-weighted surface sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GeometryError, Mesh, PointCloud, Vec3};

/// Draw `n` points uniformly over the surface: triangles chosen by area,
/// positions uniform within each triangle via barycentric sampling.
/// Bitwise reproducible for equal seeds. When the mesh carries labels each
/// sample inherits the label of the nearest vertex of its source face.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud, GeometryError> {
    let (points, _, face_ids) = sample_raw(mesh, n, seed)?;
    let labels = mesh.labels.as_ref().map(|labels| {
        points
            .iter()
            .zip(&face_ids)
            .map(|(p, &f)| {
                let face = mesh.faces[f];
                let nearest = face
                    .iter()
                    .min_by(|&&a, &&b| {
                        let da = (mesh.vertices[a] - p).norm_squared();
                        let db = (mesh.vertices[b] - p).norm_squared();
                        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                    })
                    .unwrap();
                labels[*nearest]
            })
            .collect()
    });
    Ok(PointCloud { points, labels })
}

/// Like [`sample_surface`] but also returns the unit normal of each sample's
/// source face (used by the normal-consistency metric).
pub fn sample_surface_with_normals(
    mesh: &Mesh,
    n: usize,
    seed: u64,
) -> Result<(PointCloud, Vec<Vec3>), GeometryError> {
    let (points, normals, _) = sample_raw(mesh, n, seed)?;
    Ok((PointCloud::new(points), normals))
}

fn sample_raw(
    mesh: &Mesh,
    n: usize,
    seed: u64,
) -> Result<(Vec<Vec3>, Vec<Vec3>, Vec<usize>), GeometryError> {
    if mesh.faces.is_empty() {
        return Err(GeometryError::AllTrianglesDegenerate);
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(GeometryError::AllTrianglesDegenerate);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut face_ids = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.gen::<f64>() * total;
        let f = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.triangle(f);
        // Uniform barycentric draw: u = 1 - sqrt(r1), v = sqrt(r1) * r2.
        let r1 = rng.gen::<f64>();
        let r2 = rng.gen::<f64>();
        let s = r1.sqrt();
        let u = 1.0 - s;
        let v = s * r2;
        let w = 1.0 - u - v;
        points.push(a * u + b * v + c * w);
        normals.push(mesh.face_normal(f));
        face_ids.push(f);
    }
    Ok((points, normals, face_ids))
}
