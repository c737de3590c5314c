//! Exact nearest-neighbor index over a point cloud.
//!
//! A bog-standard median-split kd-tree. Queries return exactly the
//! brute-force answer: equal squared distances tie-break to the lowest point
//! index, and both code paths compute the distance with the same expression,
//! so results match bit for bit.

use super::Vec3;

const LEAF_SIZE: usize = 8;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Nearest-neighbor acceleration structure with exact, deterministic results.
pub struct SpatialIndex {
    points: Vec<Vec3>,
    /// Point indices ordered so each leaf owns a contiguous range.
    order: Vec<usize>,
    root: Option<Node>,
}

fn dist_sq(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

impl SpatialIndex {
    pub fn build(points: &[Vec3]) -> SpatialIndex {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = if points.is_empty() {
            None
        } else {
            let len = order.len();
            Some(Self::build_node(points, &mut order, 0, len))
        };
        SpatialIndex {
            points: points.to_vec(),
            order,
            root,
        }
    }

    fn build_node(points: &[Vec3], order: &mut [usize], start: usize, end: usize) -> Node {
        let count = end - start;
        if count <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let slice = &mut order[start..end];
        let mut lo = points[slice[0]];
        let mut hi = lo;
        for &i in slice.iter() {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        if extent[axis] == 0.0 {
            // All points coincide along every axis; no split possible.
            return Node::Leaf { start, end };
        }
        let mid = count / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let value = points[slice[mid]][axis];
        let left = Box::new(Self::build_node(points, order, start, start + mid));
        let right = Box::new(Self::build_node(points, order, start + mid, end));
        Node::Split {
            axis,
            value,
            left,
            right,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> Vec3 {
        self.points[idx]
    }

    /// Index and squared distance of the nearest point; ties go to the lowest
    /// index. Panics on an empty index.
    pub fn nearest(&self, query: &Vec3) -> (usize, f64) {
        let root = self.root.as_ref().expect("nearest on empty SpatialIndex");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(root, query, &mut best);
        best
    }

    fn consider(&self, idx: usize, query: &Vec3, best: &mut (usize, f64)) {
        let d = dist_sq(query, &self.points[idx]);
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
    }

    fn search(&self, node: &Node, query: &Vec3, best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    self.consider(idx, query, best);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, best);
                // <= keeps ties visible to the far subtree so the lowest-index
                // rule is decided over every candidate at the best distance.
                if delta * delta <= best.1 {
                    self.search(far, query, best);
                }
            }
        }
    }

    /// Brute-force reference with the same tie rule.
    pub fn nearest_brute(points: &[Vec3], query: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (idx, p) in points.iter().enumerate() {
            let d = dist_sq(query, p);
            if d < best.1 {
                best = (idx, d);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(1..400);
            let cloud: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
                .collect();
            let index = SpatialIndex::build(&cloud);
            for _ in 0..50 {
                let q = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
                assert_eq!(index.nearest(&q), SpatialIndex::nearest_brute(&cloud, &q));
            }
        }
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // Duplicate points at equal distance from the query.
        let cloud = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
        ];
        let index = SpatialIndex::build(&cloud);
        let (idx, d) = index.nearest(&Vec3::zeros());
        assert_eq!(idx, 0);
        assert_eq!(d, 1.0);
    }

    #[test]
    fn coincident_cloud_is_searchable() {
        let cloud = vec![Vec3::new(0.5, 0.5, 0.5); 40];
        let index = SpatialIndex::build(&cloud);
        let (idx, _) = index.nearest(&Vec3::zeros());
        assert_eq!(idx, 0);
    }
}
