//! Procedural test shapes.
//!
//! Small closed meshes used by the verification suite, the CLI demos, and
//! the test suites: cubes, subdivided boxes, icospheres, flat grids, bent
//! tubes, and a labeled stool family with varying proportions.

use nalgebra::Vector3;
use rand::Rng;

use crate::geometry::{normalize_to_unit, Mesh, Vec3};

/// Axis-aligned unit cube centered at the origin, 12 outward-facing
/// triangles sharing 8 vertices.
pub fn unit_cube() -> Mesh {
    let h = 0.5;
    let vertices = vec![
        Vec3::new(-h, -h, -h),
        Vec3::new(h, -h, -h),
        Vec3::new(h, h, -h),
        Vec3::new(-h, h, -h),
        Vec3::new(-h, -h, h),
        Vec3::new(h, -h, h),
        Vec3::new(h, h, h),
        Vec3::new(-h, h, h),
    ];
    let quads = [
        [0, 3, 2, 1], // bottom (z = -h), outward = -z
        [4, 5, 6, 7], // top
        [0, 1, 5, 4], // front (y = -h)
        [1, 2, 6, 5], // right
        [2, 3, 7, 6], // back
        [3, 0, 4, 7], // left
    ];
    let mut faces = Vec::with_capacity(12);
    for q in quads {
        faces.push([q[0], q[1], q[2]]);
        faces.push([q[0], q[2], q[3]]);
    }
    Mesh::new(vertices, faces).unwrap()
}

/// Closed box surface with each face subdivided into an n-by-n quad grid.
/// Faces do not share vertices across box edges; orientation is outward.
/// All vertices get `label`.
pub fn box_grid(center: Vec3, half: Vec3, n: usize, label: u32) -> Mesh {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // Each entry: (axis normal direction, u axis, v axis) chosen so that
    // u x v points along the outward normal.
    let sides: [(Vec3, Vec3, Vec3); 6] = [
        (Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)),
        (Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 0.0)),
        (Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0)),
        (Vec3::new(0.0, -1.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0)),
        (Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)),
        (Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0)),
    ];
    for (normal, u_axis, v_axis) in sides {
        let base = vertices.len();
        let origin = center + normal.component_mul(&half);
        let u_half = u_axis.component_mul(&half);
        let v_half = v_axis.component_mul(&half);
        for i in 0..=n {
            for j in 0..=n {
                let u = 2.0 * i as f64 / n as f64 - 1.0;
                let v = 2.0 * j as f64 / n as f64 - 1.0;
                vertices.push(origin + u_half * u + v_half * v);
            }
        }
        let stride = n + 1;
        for i in 0..n {
            for j in 0..n {
                let a = base + i * stride + j;
                let b = base + (i + 1) * stride + j;
                let c = base + (i + 1) * stride + j + 1;
                let d = base + i * stride + j + 1;
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
    }
    let labels = vec![label; vertices.len()];
    Mesh::with_labels(vertices, faces, labels).unwrap()
}

/// Icosphere of the given subdivision level and radius, outward oriented.
pub fn icosphere(level: usize, radius: f64) -> Mesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = vec![
        Vec3::new(-1.0, phi, 0.0),
        Vec3::new(1.0, phi, 0.0),
        Vec3::new(-1.0, -phi, 0.0),
        Vec3::new(1.0, -phi, 0.0),
        Vec3::new(0.0, -1.0, phi),
        Vec3::new(0.0, 1.0, phi),
        Vec3::new(0.0, -1.0, -phi),
        Vec3::new(0.0, 1.0, -phi),
        Vec3::new(phi, 0.0, -1.0),
        Vec3::new(phi, 0.0, 1.0),
        Vec3::new(-phi, 0.0, -1.0),
        Vec3::new(-phi, 0.0, 1.0),
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for v in &mut vertices {
        *v = v.normalize();
    }
    for _ in 0..level {
        let mut cache: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(&mut vertices, &mut cache, a, b);
            let bc = midpoint(&mut vertices, &mut cache, b, c);
            let ca = midpoint(&mut vertices, &mut cache, c, a);
            next_faces.push([a, ab, ca]);
            next_faces.push([b, bc, ab]);
            next_faces.push([c, ca, bc]);
            next_faces.push([ab, bc, ca]);
        }
        faces = next_faces;
    }
    for v in &mut vertices {
        *v *= radius;
    }
    Mesh::new(vertices, faces).unwrap()
}

fn midpoint(
    vertices: &mut Vec<Vec3>,
    cache: &mut std::collections::HashMap<(usize, usize), usize>,
    a: usize,
    b: usize,
) -> usize {
    let key = (a.min(b), a.max(b));
    if let Some(&idx) = cache.get(&key) {
        return idx;
    }
    let mid = ((vertices[a] + vertices[b]) * 0.5).normalize();
    vertices.push(mid);
    let idx = vertices.len() - 1;
    cache.insert(key, idx);
    idx
}

/// Flat triangulated grid in the z = 0 plane spanning `side` on x and y.
pub fn plane_grid(n: usize, side: f64) -> Mesh {
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            let x = side * (i as f64 / n as f64 - 0.5);
            let y = side * (j as f64 / n as f64 - 0.5);
            vertices.push(Vec3::new(x, y, 0.0));
        }
    }
    let stride = n + 1;
    let mut faces = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            let a = i * stride + j;
            let b = (i + 1) * stride + j;
            let c = (i + 1) * stride + j + 1;
            let d = i * stride + j + 1;
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Mesh::new(vertices, faces).unwrap()
}

/// A capped tube of `rings` cross-sections along the x axis; the half beyond
/// the hinge at x = 0 is rotated about the y axis by `bend` radians. Two
/// tubes with different bends share topology and vertex order, giving a
/// corresponded pair whose linear interpolation shrinks the elbow.
pub fn bent_tube(rings: usize, segments: usize, length: f64, radius: f64, bend: f64) -> Mesh {
    assert!(rings >= 2 && segments >= 3);
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for r in 0..rings {
        let t = r as f64 / (rings - 1) as f64;
        let x = length * (t - 0.5);
        for s in 0..segments {
            let ang = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            let p = Vec3::new(x, radius * ang.cos(), radius * ang.sin());
            vertices.push(rotate_if_past_hinge(p, bend));
        }
    }
    // Side quads; outward orientation.
    for r in 0..rings - 1 {
        for s in 0..segments {
            let s1 = (s + 1) % segments;
            let a = r * segments + s;
            let b = r * segments + s1;
            let c = (r + 1) * segments + s1;
            let d = (r + 1) * segments + s;
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    // End caps via center fans.
    let start_center = vertices.len();
    vertices.push(rotate_if_past_hinge(Vec3::new(-length * 0.5, 0.0, 0.0), bend));
    let end_center = vertices.len();
    vertices.push(rotate_if_past_hinge(Vec3::new(length * 0.5, 0.0, 0.0), bend));
    for s in 0..segments {
        let s1 = (s + 1) % segments;
        faces.push([start_center, s1, s]);
        let base = (rings - 1) * segments;
        faces.push([end_center, base + s, base + s1]);
    }
    Mesh::new(vertices, faces).unwrap()
}

fn rotate_if_past_hinge(p: Vec3, bend: f64) -> Vec3 {
    if p.x <= 0.0 {
        p
    } else {
        let (s, c) = bend.sin_cos();
        Vec3::new(c * p.x + s * p.z, p.y, -s * p.x + c * p.z)
    }
}

/// Vertex label ids used by the stool family.
pub const LABEL_SEAT: u32 = 0;
pub const LABEL_LEG: u32 = 1;

/// Proportions of a [`stool`]. All stools share topology and vertex order.
#[derive(Debug, Clone, Copy)]
pub struct StoolParams {
    /// Total height claimed by the legs, as a fraction of overall height.
    pub leg_fraction: f64,
    /// Seat slab half-width (x) and half-depth (y).
    pub seat_half_width: f64,
    pub seat_half_depth: f64,
    /// Leg half-thickness.
    pub leg_half: f64,
}

impl StoolParams {
    pub fn sample(rng: &mut impl Rng) -> StoolParams {
        StoolParams {
            leg_fraction: rng.gen_range(0.25..0.75),
            seat_half_width: rng.gen_range(0.25..0.5),
            seat_half_depth: rng.gen_range(0.25..0.5),
            leg_half: rng.gen_range(0.035..0.075),
        }
    }
}

/// A stool: a seat slab on four corner legs, labeled per vertex with
/// [`LABEL_SEAT`] / [`LABEL_LEG`], normalized to the unit box. `n` controls
/// the per-face subdivision of each box.
pub fn stool(params: StoolParams, n: usize) -> Mesh {
    let total_height = 1.0;
    let leg_h = params.leg_fraction * total_height;
    let seat_h = total_height - leg_h;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut labels = Vec::new();

    let mut push = |mesh: Mesh| {
        let base = vertices.len();
        let mesh_labels = mesh.labels.as_ref().unwrap();
        vertices.extend_from_slice(&mesh.vertices);
        labels.extend_from_slice(mesh_labels);
        for f in &mesh.faces {
            faces.push([f[0] + base, f[1] + base, f[2] + base]);
        }
    };

    let seat_center = Vec3::new(0.0, 0.0, leg_h + seat_h * 0.5);
    push(box_grid(
        seat_center,
        Vec3::new(params.seat_half_width, params.seat_half_depth, seat_h * 0.5),
        n,
        LABEL_SEAT,
    ));

    let inset_x = params.seat_half_width - params.leg_half;
    let inset_y = params.seat_half_depth - params.leg_half;
    for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let leg_center = Vec3::new(sx * inset_x, sy * inset_y, leg_h * 0.5);
        push(box_grid(
            leg_center,
            Vec3::new(params.leg_half, params.leg_half, leg_h * 0.5),
            n,
            LABEL_LEG,
        ));
    }

    let mesh = Mesh::with_labels(vertices, faces, labels).unwrap();
    let (normalized, _, _) = normalize_to_unit(&mesh).unwrap();
    normalized
}

/// Evenly spread family of stools parameterized over a seed; deterministic.
pub fn stool_family(count: usize, subdivision: usize, seed: u64) -> Vec<Mesh> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| stool(StoolParams::sample(&mut rng), subdivision))
        .collect()
}

/// Ellipsoid by scaling an icosphere, outward oriented.
pub fn ellipsoid(level: usize, radii: Vec3) -> Mesh {
    let sphere = icosphere(level, 1.0);
    let vertices = sphere
        .vertices
        .iter()
        .map(|v| Vector3::new(v.x * radii.x, v.y * radii.y, v.z * radii.z))
        .collect();
    sphere.with_vertices(vertices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::signed_volume;

    #[test]
    fn icosphere_volume_converges_to_ball_from_below() {
        let exact = 4.0 * std::f64::consts::PI / 3.0;
        let mut previous = 0.0;
        for level in 1..=4 {
            let v = signed_volume(&icosphere(level, 1.0));
            assert!(v > previous, "volume should grow with refinement");
            assert!(v < exact, "inscribed polyhedron stays below the ball");
            previous = v;
        }
        assert!((previous - exact).abs() / exact < 0.01);
    }

    #[test]
    fn box_grid_volume_matches_box() {
        let b = box_grid(Vec3::new(0.1, -0.2, 0.3), Vec3::new(0.5, 0.25, 0.125), 3, 0);
        let expected = 8.0 * 0.5 * 0.25 * 0.125;
        assert!((signed_volume(&b) - expected).abs() < 1e-12);
    }

    #[test]
    fn bent_tube_is_closed_and_positive() {
        let straight = bent_tube(9, 10, 1.0, 0.18, 0.0);
        let bent = bent_tube(9, 10, 1.0, 0.18, 0.9);
        assert_eq!(straight.vertex_count(), bent.vertex_count());
        assert_eq!(straight.faces, bent.faces);
        let v0 = signed_volume(&straight);
        let v1 = signed_volume(&bent);
        assert!(v0 > 0.0);
        // The hinge rotation is rigid per-vertex but shears the hinge ring
        // cells; volumes stay close.
        assert!((v1 - v0).abs() / v0 < 0.2);
    }

    #[test]
    fn stool_family_shares_topology() {
        let family = stool_family(4, 2, 9);
        for m in &family[1..] {
            assert_eq!(m.faces, family[0].faces);
            assert_eq!(m.vertex_count(), family[0].vertex_count());
        }
        let labels = family[0].labels.as_ref().unwrap();
        assert!(labels.contains(&LABEL_SEAT));
        assert!(labels.contains(&LABEL_LEG));
    }
}
