//! Self-intersection counting for triangle meshes.
//!
//! A pair of faces counts when the two closed triangles intersect and the
//! faces share no vertex index (mesh neighbors always touch along their
//! shared edge, so adjacency is skipped). The pair test is a separating-axis
//! test over face normals, edge-edge cross products, and in-plane edge
//! normals, with a tolerance of [`SAT_EPSILON`] on each normalized axis.
//! An axis-aligned bounding-box hierarchy prunes candidate pairs; counts are
//! identical to the brute-force O(m^2) scan.

use super::{Mesh, Vec3};

/// Tolerance applied to every separating-axis projection test.
pub const SAT_EPSILON: f64 = 1e-10;

/// Minimum squared length for a candidate axis to carry any information.
const AXIS_CUTOFF_SQ: f64 = 1e-24;

fn project_gap(axis: Vec3, t1: &[Vec3; 3], t2: &[Vec3; 3], eps: f64) -> bool {
    let len_sq = axis.norm_squared();
    if len_sq < AXIS_CUTOFF_SQ {
        return false;
    }
    let inv_len = 1.0 / len_sq.sqrt();
    let mut min1 = f64::INFINITY;
    let mut max1 = f64::NEG_INFINITY;
    for v in t1 {
        let p = axis.dot(v) * inv_len;
        min1 = min1.min(p);
        max1 = max1.max(p);
    }
    let mut min2 = f64::INFINITY;
    let mut max2 = f64::NEG_INFINITY;
    for v in t2 {
        let p = axis.dot(v) * inv_len;
        min2 = min2.min(p);
        max2 = max2.max(p);
    }
    min1 > max2 + eps || min2 > max1 + eps
}

/// Whether two closed triangles intersect, with a tolerance of `SAT_EPSILON`.
///
/// Touching configurations within the tolerance count as intersecting.
pub fn triangles_intersect(t1: &[Vec3; 3], t2: &[Vec3; 3]) -> bool {
    let eps = SAT_EPSILON;
    let e1 = [t1[1] - t1[0], t1[2] - t1[1], t1[0] - t1[2]];
    let e2 = [t2[1] - t2[0], t2[2] - t2[1], t2[0] - t2[2]];
    let n1 = e1[0].cross(&e1[1]);
    let n2 = e2[0].cross(&e2[1]);

    if project_gap(n1, t1, t2, eps) || project_gap(n2, t1, t2, eps) {
        return false;
    }
    for a in &e1 {
        for b in &e2 {
            if project_gap(a.cross(b), t1, t2, eps) {
                return false;
            }
        }
    }
    // In-plane edge normals decide coplanar and near-coplanar layouts where
    // the axes above are degenerate.
    for e in &e1 {
        if project_gap(n1.cross(e), t1, t2, eps) {
            return false;
        }
    }
    for e in &e2 {
        if project_gap(n2.cross(e), t1, t2, eps) {
            return false;
        }
    }
    true
}

fn shares_vertex(a: &[usize; 3], b: &[usize; 3]) -> bool {
    a.iter().any(|i| b.contains(i))
}

#[derive(Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn of_triangle(t: &[Vec3; 3]) -> Aabb {
        let mut lo = t[0];
        let mut hi = t[0];
        for v in &t[1..] {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        // Expanded by the SAT tolerance so pruning can never drop a pair the
        // tolerant predicate would report.
        let pad = Vec3::repeat(SAT_EPSILON);
        Aabb {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            lo: self.lo.inf(&other.lo),
            hi: self.hi.sup(&other.hi),
        }
    }

    fn overlaps(&self, other: &Aabb) -> bool {
        self.lo.x <= other.hi.x
            && other.lo.x <= self.hi.x
            && self.lo.y <= other.hi.y
            && other.lo.y <= self.hi.y
            && self.lo.z <= other.hi.z
            && other.lo.z <= self.hi.z
    }
}

enum BvhNode {
    Leaf {
        bound: Aabb,
        start: usize,
        end: usize,
    },
    Inner {
        bound: Aabb,
        left: Box<BvhNode>,
        right: Box<BvhNode>,
    },
}

impl BvhNode {
    fn bound(&self) -> &Aabb {
        match self {
            BvhNode::Leaf { bound, .. } => bound,
            BvhNode::Inner { bound, .. } => bound,
        }
    }
}

struct Bvh {
    boxes: Vec<Aabb>,
    order: Vec<usize>,
    root: BvhNode,
}

const BVH_LEAF: usize = 4;

impl Bvh {
    fn build(boxes: Vec<Aabb>) -> Bvh {
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        let len = order.len();
        let root = Self::build_node(&boxes, &mut order, 0, len);
        Bvh { boxes, order, root }
    }

    fn build_node(boxes: &[Aabb], order: &mut [usize], start: usize, end: usize) -> BvhNode {
        let slice = &mut order[start..end];
        let mut bound = boxes[slice[0]];
        for &i in slice.iter() {
            bound = bound.union(&boxes[i]);
        }
        let count = end - start;
        if count <= BVH_LEAF {
            return BvhNode::Leaf { bound, start, end };
        }
        let extent = bound.hi - bound.lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = count / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            let ca = boxes[a].lo[axis] + boxes[a].hi[axis];
            let cb = boxes[b].lo[axis] + boxes[b].hi[axis];
            ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
        });
        let left = Box::new(Self::build_node(boxes, order, start, start + mid));
        let right = Box::new(Self::build_node(boxes, order, start + mid, end));
        BvhNode::Inner { bound, left, right }
    }

    /// Collect candidate pairs (i < j) whose padded boxes overlap.
    fn candidate_pairs(&self, pairs: &mut Vec<(usize, usize)>) {
        self.pairs_within(&self.root, pairs);
    }

    fn pairs_within(&self, node: &BvhNode, pairs: &mut Vec<(usize, usize)>) {
        match node {
            BvhNode::Leaf { start, end, .. } => {
                let ids = &self.order[*start..*end];
                for (k, &i) in ids.iter().enumerate() {
                    for &j in &ids[k + 1..] {
                        if self.boxes[i].overlaps(&self.boxes[j]) {
                            pairs.push((i.min(j), i.max(j)));
                        }
                    }
                }
            }
            BvhNode::Inner { left, right, .. } => {
                self.pairs_within(left, pairs);
                self.pairs_within(right, pairs);
                self.pairs_between(left, right, pairs);
            }
        }
    }

    fn pairs_between(&self, a: &BvhNode, b: &BvhNode, pairs: &mut Vec<(usize, usize)>) {
        if !a.bound().overlaps(b.bound()) {
            return;
        }
        match (a, b) {
            (
                BvhNode::Leaf { start: s1, end: e1, .. },
                BvhNode::Leaf { start: s2, end: e2, .. },
            ) => {
                for &i in &self.order[*s1..*e1] {
                    for &j in &self.order[*s2..*e2] {
                        if self.boxes[i].overlaps(&self.boxes[j]) {
                            pairs.push((i.min(j), i.max(j)));
                        }
                    }
                }
            }
            (BvhNode::Inner { left, right, .. }, _) => {
                self.pairs_between(left, b, pairs);
                self.pairs_between(right, b, pairs);
            }
            (_, BvhNode::Inner { left, right, .. }) => {
                self.pairs_between(a, left, pairs);
                self.pairs_between(a, right, pairs);
            }
        }
    }
}

/// Count non-adjacent face pairs whose closed triangles intersect.
pub fn count_triangle_intersections(mesh: &Mesh) -> usize {
    if mesh.faces.len() < 2 {
        return 0;
    }
    let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
    let boxes: Vec<Aabb> = tris.iter().map(Aabb::of_triangle).collect();
    let bvh = Bvh::build(boxes);
    let mut pairs = Vec::new();
    bvh.candidate_pairs(&mut pairs);
    pairs.sort_unstable();
    pairs.dedup();
    pairs
        .into_iter()
        .filter(|&(i, j)| !shares_vertex(&mesh.faces[i], &mesh.faces[j]))
        .filter(|&(i, j)| triangles_intersect(&tris[i], &tris[j]))
        .count()
}

/// Brute-force reference for [`count_triangle_intersections`].
pub fn count_triangle_intersections_brute(mesh: &Mesh) -> usize {
    let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
    let mut count = 0;
    for i in 0..tris.len() {
        for j in i + 1..tris.len() {
            if shares_vertex(&mesh.faces[i], &mesh.faces[j]) {
                continue;
            }
            if triangles_intersect(&tris[i], &tris[j]) {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mesh;
    use crate::toy;

    #[test]
    fn flat_grid_has_no_intersections() {
        let grid = toy::plane_grid(6, 1.0);
        assert_eq!(count_triangle_intersections(&grid), 0);
    }

    #[test]
    fn crossing_triangles_count_once() {
        // Two triangles forming a plus sign in 3D: one in the xy plane, one in
        // the xz plane, passing through each other.
        let verts = vec![
            Vec3::new(-1.0, -0.5, 0.0),
            Vec3::new(1.0, -0.5, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(-1.0, 0.0, -0.5),
            Vec3::new(1.0, 0.0, -0.5),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let mesh = Mesh::new(verts, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        assert_eq!(count_triangle_intersections(&mesh), 1);
        assert_eq!(count_triangle_intersections_brute(&mesh), 1);
    }

    #[test]
    fn disjoint_triangles_do_not_count() {
        let verts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(0.0, 1.0, 1.0),
        ];
        let mesh = Mesh::new(verts, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        assert_eq!(count_triangle_intersections(&mesh), 0);
    }

    #[test]
    fn adjacent_faces_are_skipped() {
        let cube = toy::unit_cube();
        assert_eq!(count_triangle_intersections(&cube), 0);
    }

    #[test]
    fn coplanar_overlap_detected() {
        let verts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.5, 0.5, 0.0),
            Vec3::new(2.5, 0.5, 0.0),
            Vec3::new(0.5, 2.5, 0.0),
        ];
        let mesh = Mesh::new(verts, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        assert_eq!(count_triangle_intersections(&mesh), 1);
    }
}
