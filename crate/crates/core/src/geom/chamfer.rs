//! Bidirectional squared chamfer distance between point clouds.

use super::nn::NnGrid;
use super::{PointCloud, Real};
use crate::error::{Error, Result};

/// Point count above which queries go through the hash grid instead of a
/// brute-force scan. Both paths are exact, so this is purely a speed knob.
const GRID_THRESHOLD: usize = 96;

/// Mean squared distance from every point of `from` to its nearest neighbor
/// in `to`.
pub fn chamfer_directed(from: &PointCloud, to: &PointCloud) -> Result<Real> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::invalid("chamfer distance over an empty cloud"));
    }
    let total: Real = if to.len() > GRID_THRESHOLD {
        let grid = NnGrid::build(&to.points)?;
        from.points.iter().map(|p| grid.nearest(p).1).sum()
    } else {
        from.points
            .iter()
            .map(|p| {
                to.points
                    .iter()
                    .map(|q| (p - q).norm_squared())
                    .fold(Real::INFINITY, Real::min)
            })
            .sum()
    };
    Ok(total / from.len() as Real)
}

/// Symmetric squared chamfer distance:
/// `mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2`.
///
/// Zero iff the clouds cover each other exactly; always nonnegative and
/// symmetric in its arguments.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<Real> {
    Ok(chamfer_directed(a, b)? + chamfer_directed(b, a)?)
}

/// For each point of `from`, the index of its exact nearest neighbor in `to`
/// (ties toward the lower index).
pub fn nearest_neighbor_indices(from: &PointCloud, to: &PointCloud) -> Result<Vec<u32>> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::invalid("nearest neighbors over an empty cloud"));
    }
    if to.len() > GRID_THRESHOLD {
        let grid = NnGrid::build(&to.points)?;
        Ok(from.points.iter().map(|p| grid.nearest(p).0).collect())
    } else {
        Ok(from
            .points
            .iter()
            .map(|p| {
                let mut best = (0u32, Real::INFINITY);
                for (j, q) in to.points.iter().enumerate() {
                    let d2 = (p - q).norm_squared();
                    if d2 < best.1 {
                        best = (j as u32, d2);
                    }
                }
                best.0
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{RigidTransform, Vec3};
    use approx::assert_abs_diff_eq;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn identical_clouds_have_zero_chamfer() {
        let a = cloud(vec![Vec3::new(0.2, 0.4, 0.1), Vec3::new(-0.3, 0.8, 0.5)]);
        assert_eq!(chamfer(&a, &a.clone()).unwrap(), 0.0);
    }

    #[test]
    fn singleton_clouds_give_double_squared_distance() {
        // Points one unit apart: each direction contributes 1^2, so total 2.
        let a = cloud(vec![Vec3::new(0.0, 0.0, 0.0)]);
        let b = cloud(vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_abs_diff_eq!(chamfer(&a, &b).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn asymmetric_counts_average_per_side() {
        // a = {0, 2} on x, b = {1}: a->b means (1+1)/2 = 1, b->a mean = 1, so 2.
        let a = cloud(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)]);
        let b = cloud(vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_abs_diff_eq!(chamfer(&a, &b).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn chamfer_is_symmetric_and_rigid_invariant() {
        let a = cloud(vec![
            Vec3::new(0.1, 0.0, 0.3),
            Vec3::new(0.5, 0.2, -0.1),
            Vec3::new(-0.2, 0.4, 0.2),
        ]);
        let b = cloud(vec![Vec3::new(0.0, 0.1, 0.1), Vec3::new(0.4, -0.2, 0.5)]);
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-15);

        let t = RigidTransform::from_axis_angle(&Vec3::new(0.3, 0.3, -0.8), Vec3::new(2.0, -1.0, 0.5));
        let moved = chamfer(&a.apply_transform(&t), &b.apply_transform(&t)).unwrap();
        assert_abs_diff_eq!(ab, moved, epsilon = 1e-12);
    }

    #[test]
    fn grid_path_matches_brute_path() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        // Above the grid threshold on one side, below on the other.
        let a = cloud((0..300).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect());
        let b = cloud((0..40).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect());
        let fast = chamfer_directed(&b, &a).unwrap();
        let mut slow = 0.0;
        for p in &b.points {
            slow += a
                .points
                .iter()
                .map(|q| (p - q).norm_squared())
                .fold(Real::INFINITY, Real::min);
        }
        slow /= b.len() as Real;
        assert_eq!(fast, slow);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let a = cloud(vec![Vec3::zeros()]);
        let empty = PointCloud::default();
        assert!(chamfer(&a, &empty).is_err());
        assert!(chamfer(&empty, &a).is_err());
    }
}
