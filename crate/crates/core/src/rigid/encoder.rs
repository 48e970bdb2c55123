//! Shared geometric encoder: deterministic grid keypoints, rotation-invariant
//! neighborhood descriptors at two radii, and a small per-point feed-forward
//! network lifting them to the transformer feature width.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{voxel_downsample_indices, NnGrid, PointCloud, Real};
use crate::tape::{ParamSet, Tape, Var};

use super::MatcherConfig;

/// Eight rotation-invariant statistics per aggregation radius.
pub const DESCRIPTOR_WIDTH: usize = 16;

/// Keypoints with their transformer features (inference-side container).
#[derive(Debug, Clone)]
pub struct FeatureCloud {
    pub keypoints: PointCloud,
    /// `n x c` feature matrix, row i belonging to keypoint i.
    pub features: Array2<Real>,
}

/// Deterministic keypoint subset: one input point per occupied voxel.
pub fn select_keypoints(cloud: &PointCloud, voxel: Real) -> Result<Vec<usize>> {
    Ok(voxel_downsample_indices(cloud, voxel)?
        .into_iter()
        .map(|i| i as usize)
        .collect())
}

fn radius_stats(cloud: &PointCloud, grid: &NnGrid, center_idx: usize, r: Real) -> [Real; 8] {
    let p = cloud.points[center_idx];
    let idxs = grid.within_radius(&p, r);
    let n = idxs.len();
    if n == 0 {
        return [0.0; 8];
    }
    let mut mean = crate::geom::Vec3::zeros();
    for &i in &idxs {
        mean += cloud.points[i as usize];
    }
    mean /= n as Real;
    let mut cov = [[0.0_f64; 3]; 3];
    let mut dist_sum = 0.0;
    let mut dist_sq_sum = 0.0;
    for &i in &idxs {
        let q = cloud.points[i as usize];
        let d = q - mean;
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += d[a] * d[b];
            }
        }
        let dp = (q - p).norm();
        dist_sum += dp;
        dist_sq_sum += dp * dp;
    }
    let cov = crate::geom::Mat3::new(
        cov[0][0], cov[0][1], cov[0][2], cov[1][0], cov[1][1], cov[1][2], cov[2][0], cov[2][1],
        cov[2][2],
    ) / n as Real;
    let mut eig: Vec<Real> = cov.symmetric_eigenvalues().iter().cloned().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let trace = (eig[0] + eig[1] + eig[2]).max(0.0);
    let denom = trace + 1e-12;
    let mean_d = dist_sum / n as Real;
    let var_d = (dist_sq_sum / n as Real - mean_d * mean_d).max(0.0);
    [
        (1.0 + n as Real).ln() / 4.0,
        (mean - p).norm() / r,
        eig[0].max(0.0) / denom,
        eig[1].max(0.0) / denom,
        eig[2].max(0.0) / denom,
        trace.sqrt() / r,
        mean_d / r,
        var_d.sqrt() / r,
    ]
}

/// Rotation-invariant local descriptors for the chosen keypoints: occupancy,
/// centroid offset, covariance spectrum shape and scale, and the radial
/// distance profile, at each of the two radii.
pub fn local_descriptors(
    cloud: &PointCloud,
    keypoints: &[usize],
    radii: (Real, Real),
) -> Result<Array2<Real>> {
    if keypoints.is_empty() {
        return Err(Error::invalid("no keypoints to describe"));
    }
    let grid = NnGrid::with_cell_size(&cloud.points, radii.0.max(1e-9))?;
    let mut out = Array2::zeros((keypoints.len(), DESCRIPTOR_WIDTH));
    for (row, &ki) in keypoints.iter().enumerate() {
        let s1 = radius_stats(cloud, &grid, ki, radii.0);
        let s2 = radius_stats(cloud, &grid, ki, radii.1);
        for j in 0..8 {
            out[(row, j)] = s1[j];
            out[(row, 8 + j)] = s2[j];
        }
    }
    Ok(out)
}

/// Runs the descriptor MLP (16 -> 64 -> 64 -> c) on the tape.
pub(crate) fn encoder_ffn(tape: &mut Tape, params: &ParamSet, desc: Var) -> Var {
    let w1 = tape.param(params, "enc.w1");
    let b1 = tape.param(params, "enc.b1");
    let w2 = tape.param(params, "enc.w2");
    let b2 = tape.param(params, "enc.b2");
    let w3 = tape.param(params, "enc.w3");
    let b3 = tape.param(params, "enc.b3");
    let h1 = tape.matmul(desc, w1);
    let h1 = tape.add_row(h1, b1);
    let h1 = tape.relu(h1);
    let h2 = tape.matmul(h1, w2);
    let h2 = tape.add_row(h2, b2);
    let h2 = tape.relu(h2);
    let h3 = tape.matmul(h2, w3);
    tape.add_row(h3, b3)
}

/// Full inference-side encoding: keypoints, descriptors, and features. The
/// forward pass runs on a throwaway tape so training and inference share one
/// code path.
pub fn encode(cloud: &PointCloud, params: &ParamSet, cfg: &MatcherConfig) -> Result<FeatureCloud> {
    if cloud.len() < 64 {
        return Err(Error::invalid(format!(
            "encoder needs at least 64 points, got {}",
            cloud.len()
        )));
    }
    let keypoints = select_keypoints(cloud, cfg.keypoint_voxel)?;
    if keypoints.len() < 8 {
        return Err(Error::invalid(format!(
            "only {} keypoints at voxel {}",
            keypoints.len(),
            cfg.keypoint_voxel
        )));
    }
    let desc = local_descriptors(cloud, &keypoints, cfg.descriptor_radii())?;
    let mut tape = Tape::new();
    let d = tape.leaf(desc);
    let f = encoder_ffn(&mut tape, params, d);
    let features = tape.value(f).clone();
    let kp_points: Vec<_> = keypoints.iter().map(|&i| cloud.points[i]).collect();
    Ok(FeatureCloud {
        keypoints: PointCloud::new(kp_points)?,
        features,
    })
}
