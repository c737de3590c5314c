//! Symmetric Chamfer distances between point clouds.

use super::{GeometryError, PointCloud, SpatialIndex};

/// Which Chamfer convention to evaluate.
///
/// Training uses summed mean squared distances (smooth gradients); evaluation
/// uses the averaged mean-L2 "Chamfer-L1" convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferVariant {
    /// mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2
    SqL2Train,
    /// (mean_a min_b |a-b| + mean_b min_a |a-b|) / 2
    L1Eval,
}

/// Symmetric Chamfer distance between two non-empty clouds.
///
/// Uses a [`SpatialIndex`] per side; results equal the O(n^2) brute force
/// exactly.
pub fn chamfer(a: &PointCloud, b: &PointCloud, variant: ChamferVariant) -> Result<f64, GeometryError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::EmptyPointCloud);
    }
    let index_a = SpatialIndex::build(&a.points);
    let index_b = SpatialIndex::build(&b.points);
    Ok(chamfer_with_indices(a, &index_a, b, &index_b, variant))
}

/// Chamfer with caller-provided indices (callers evaluating one cloud against
/// many can reuse the build).
pub fn chamfer_with_indices(
    a: &PointCloud,
    index_a: &SpatialIndex,
    b: &PointCloud,
    index_b: &SpatialIndex,
    variant: ChamferVariant,
) -> f64 {
    let a_to_b = directed_mean(&a.points, index_b, variant);
    let b_to_a = directed_mean(&b.points, index_a, variant);
    match variant {
        ChamferVariant::SqL2Train => a_to_b + b_to_a,
        ChamferVariant::L1Eval => 0.5 * (a_to_b + b_to_a),
    }
}

fn directed_mean(from: &[super::Vec3], to: &SpatialIndex, variant: ChamferVariant) -> f64 {
    let mut total = 0.0;
    for p in from {
        let (_, d_sq) = to.nearest(p);
        total += match variant {
            ChamferVariant::SqL2Train => d_sq,
            ChamferVariant::L1Eval => d_sq.sqrt(),
        };
    }
    total / from.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    #[test]
    fn self_distance_is_exactly_zero() {
        let cloud = PointCloud::new(vec![
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(-0.4, 0.0, 0.25),
            Vec3::new(0.33, -0.1, 0.0),
        ]);
        assert_eq!(chamfer(&cloud, &cloud, ChamferVariant::SqL2Train).unwrap(), 0.0);
        assert_eq!(chamfer(&cloud, &cloud, ChamferVariant::L1Eval).unwrap(), 0.0);
    }

    #[test]
    fn two_singletons() {
        let a = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.0)]);
        let b = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert!((chamfer(&a, &b, ChamferVariant::SqL2Train).unwrap() - 2.0).abs() < 1e-15);
        assert!((chamfer(&a, &b, ChamferVariant::L1Eval).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let a = PointCloud::new(vec![]);
        let b = PointCloud::new(vec![Vec3::zeros()]);
        assert!(chamfer(&a, &b, ChamferVariant::L1Eval).is_err());
        assert!(chamfer(&b, &a, ChamferVariant::L1Eval).is_err());
    }
}
