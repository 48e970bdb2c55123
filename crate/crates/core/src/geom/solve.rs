//! Closed-form rigid and similarity alignment from weighted correspondences.

use super::{CorrespondenceSet, Mat3, PointCloud, Real, RigidTransform, Vec3};
use crate::error::{Error, Result};

/// Relative singular-value floor below which the correspondence geometry is
/// treated as collinear (rotation not uniquely determined).
const RANK_TOL: Real = 1e-9;

/// Weighted Kabsch alignment: the rigid transform minimizing
/// `sum_k w_k |R s_k + t - t_k|^2`.
///
/// Builds the weighted cross-covariance of centered correspondences,
/// `H = sum_k w_k (s_k - s̄)(t_k - t̄)^T` with weighted centroids `s̄`, `t̄`,
/// takes `H = U Σ V^T` and returns `R = V U^T` (last column of `V` negated
/// when the determinant would be -1) with `t = t̄ - R s̄`.
///
/// Errors: fewer than 3 pairs, non-positive total weight, out-of-range
/// indices, or collinear/coincident geometry.
pub fn weighted_kabsch(
    source: &PointCloud,
    target: &PointCloud,
    corr: &CorrespondenceSet,
) -> Result<RigidTransform> {
    corr.validate(source.len(), target.len())?;
    if corr.len() < 3 {
        return Err(Error::InsufficientMatches(format!(
            "weighted Kabsch needs >= 3 correspondences, got {}",
            corr.len()
        )));
    }
    let total: Real = corr.weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("correspondence weights sum to zero"));
    }

    let mut s_bar = Vec3::zeros();
    let mut t_bar = Vec3::zeros();
    for (&(i, j), &w) in corr.pairs.iter().zip(&corr.weights) {
        s_bar += source.points[i] * w;
        t_bar += target.points[j] * w;
    }
    s_bar /= total;
    t_bar /= total;

    let mut h = Mat3::zeros();
    for (&(i, j), &w) in corr.pairs.iter().zip(&corr.weights) {
        h += (source.points[i] - s_bar) * (target.points[j] - t_bar).transpose() * w;
    }

    let rotation = rotation_from_cross_covariance(&h)?;
    let translation = t_bar - rotation * s_bar;
    RigidTransform::new(rotation, translation)
}

/// Proper rotation closest to the cross-covariance `H` in the Kabsch sense.
///
/// Shared by the batch solver above and the minimal 3-point solver used by
/// the robust estimators.
pub(crate) fn rotation_from_cross_covariance(h: &Mat3) -> Result<Mat3> {
    let svd = nalgebra::SVD::new(*h, true, true);
    let u = svd.u.ok_or_else(|| Error::numerical("SVD failed to produce U"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::numerical("SVD failed to produce V^T"))?;
    let sigma = svd.singular_values;

    // nalgebra returns singular values in descending order; the second one
    // vanishing means the correspondences span at most a line.
    let scale = sigma[0].max(Real::MIN_POSITIVE);
    if sigma[1] <= RANK_TOL * scale {
        return Err(Error::degenerate(
            "correspondences are collinear; rotation is not unique",
        ));
    }

    let mut v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        // Reflection case: flip the direction associated with the smallest
        // singular value.
        for row in 0..3 {
            v[(row, 2)] = -v[(row, 2)];
        }
        r = v * u.transpose();
    }
    Ok(r)
}

/// Umeyama similarity alignment of index-aligned clouds: `(c, T)` minimizing
/// `sum_k |c R s_k + t - t_k|^2` over scale, rotation and translation.
///
/// Used as the scale-calibration baseline. Requires equal-length clouds with
/// at least 3 points and non-degenerate source geometry.
pub fn umeyama_similarity(
    source: &PointCloud,
    target: &PointCloud,
) -> Result<(Real, RigidTransform)> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "umeyama expects index-aligned clouds, got {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::InsufficientMatches(format!(
            "umeyama needs >= 3 points, got {}",
            source.len()
        )));
    }
    let n = source.len() as Real;
    let s_bar = source.centroid()?;
    let t_bar = target.centroid()?;

    let mut cov = Mat3::zeros();
    let mut s_var = 0.0;
    for (s, t) in source.points.iter().zip(&target.points) {
        let ds = s - s_bar;
        cov += (t - t_bar) * ds.transpose();
        s_var += ds.norm_squared();
    }
    cov /= n;
    s_var /= n;
    if s_var <= 0.0 {
        return Err(Error::degenerate("source points coincide; similarity undefined"));
    }

    let svd = nalgebra::SVD::new(cov, true, true);
    let u = svd.u.ok_or_else(|| Error::numerical("SVD failed to produce U"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::numerical("SVD failed to produce V^T"))?;
    let sigma = svd.singular_values;
    if sigma[1] <= RANK_TOL * sigma[0].max(Real::MIN_POSITIVE) {
        return Err(Error::degenerate(
            "aligned points are collinear; similarity is not unique",
        ));
    }

    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d[2] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&d) * v_t;
    let scale = (sigma[0] * d[0] + sigma[1] * d[1] + sigma[2] * d[2]) / s_var;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::numerical(format!("umeyama scale {scale} is not positive")));
    }
    let translation = t_bar - rotation * s_bar * scale;
    Ok((scale, RigidTransform::new(rotation, translation)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tetra() -> PointCloud {
        PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn recovers_quarter_turn_about_z() {
        // Hand-checked: Rz(90) maps (1,0,0)->(0,1,0), (0,1,0)->(-1,0,0).
        let src = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ])
        .unwrap();
        let tgt = PointCloud::new(vec![
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(1.0, 3.0, 3.0),
            Vec3::new(0.0, 2.0, 3.0),
        ])
        .unwrap();
        let t = weighted_kabsch(&src, &tgt, &CorrespondenceSet::index_aligned(3)).unwrap();
        let expected_r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(t.rotation, expected_r, epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, Vec3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn recovers_random_rigid_exactly() {
        let src = tetra();
        let gt = RigidTransform::from_axis_angle(
            &Vec3::new(0.9, -0.4, 0.2),
            Vec3::new(0.05, -0.03, 0.4),
        );
        let tgt = src.apply_transform(&gt);
        let t = weighted_kabsch(&src, &tgt, &CorrespondenceSet::index_aligned(4)).unwrap();
        assert_abs_diff_eq!(t.rotation, gt.rotation, epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, gt.translation, epsilon = 1e-12);
    }

    #[test]
    fn zero_weight_outlier_is_ignored() {
        let src_pts = tetra().points;
        let gt = RigidTransform::from_axis_angle(&Vec3::new(0.2, 0.1, -0.3), Vec3::new(1.0, 0.0, 0.0));
        let mut tgt_pts: Vec<Vec3> = src_pts.iter().map(|p| gt.apply(p)).collect();
        // Append a wildly wrong pair carried with zero weight.
        let mut src_pts = src_pts;
        src_pts.push(Vec3::new(5.0, 5.0, 5.0));
        tgt_pts.push(Vec3::new(-9.0, 4.0, 2.0));
        let src = PointCloud::new(src_pts).unwrap();
        let tgt = PointCloud::new(tgt_pts).unwrap();
        let corr = CorrespondenceSet::new(
            (0..5).map(|i| (i, i)).collect(),
            vec![1.0, 1.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let t = weighted_kabsch(&src, &tgt, &corr).unwrap();
        assert_abs_diff_eq!(t.rotation, gt.rotation, epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, gt.translation, epsilon = 1e-12);
    }

    #[test]
    fn collinear_geometry_is_degenerate() {
        let src = PointCloud::new(
            (0..5).map(|i| Vec3::new(i as Real, 0.0, 0.0)).collect(),
        )
        .unwrap();
        let tgt = src.clone();
        let err = weighted_kabsch(&src, &tgt, &CorrespondenceSet::index_aligned(5));
        assert!(matches!(err, Err(crate::Error::Degenerate(_))));
    }

    #[test]
    fn too_few_pairs_rejected() {
        let src = tetra();
        let corr = CorrespondenceSet::new(vec![(0, 0), (1, 1)], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            weighted_kabsch(&src, &src, &corr),
            Err(crate::Error::InsufficientMatches(_))
        ));
    }

    #[test]
    fn umeyama_recovers_similarity() {
        let src = tetra();
        let gt = RigidTransform::from_axis_angle(&Vec3::new(-0.3, 0.8, 0.1), Vec3::new(0.2, 0.9, -0.4));
        let scale = 2.5;
        let tgt = PointCloud::new(
            src.points.iter().map(|p| gt.rotation * p * scale + gt.translation).collect(),
        )
        .unwrap();
        let (c, t) = umeyama_similarity(&src, &tgt).unwrap();
        assert_abs_diff_eq!(c, scale, epsilon = 1e-12);
        assert_abs_diff_eq!(t.rotation, gt.rotation, epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, gt.translation, epsilon = 1e-12);
    }

    #[test]
    fn umeyama_on_rigid_data_returns_unit_scale() {
        let src = tetra();
        let gt = RigidTransform::from_axis_angle(&Vec3::new(0.4, 0.4, -0.2), Vec3::new(-1.0, 0.3, 0.7));
        let tgt = src.apply_transform(&gt);
        let (c, t) = umeyama_similarity(&src, &tgt).unwrap();
        assert_abs_diff_eq!(c, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.rotation, gt.rotation, epsilon = 1e-12);
    }
}
