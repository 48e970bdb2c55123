//! Matcher supervision: mutual-nearest-neighbor ground-truth pairs, focal
//! binary cross-entropy on the confidence matrix, and the keypoint transfer
//! distance between a predicted and a reference pose — with tape-side
//! variants so both terms can drive gradients during training.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{NnGrid, PointCloud, Real, RigidTransform};
use crate::tape::{svd_rotation_op, Tape, Var};

use super::fdt::ConfidenceMatrix;

const FOCAL_GAMMA_EXP: i32 = 2;
const FOCAL_ALPHA: Real = 0.25;
const CLAMP_LO: Real = 1e-7;
const CLAMP_HI: Real = 1.0 - 1e-7;

/// Keypoint pairs brought into overlap by the reference pose: `(i, j)` is
/// kept when warped source `i` and target `j` are mutual nearest neighbors
/// closer than `r_gt`.
pub fn gt_correspondences(
    src_kps: &PointCloud,
    tgt_kps: &PointCloud,
    gt: &RigidTransform,
    r_gt: Real,
) -> Result<Vec<(usize, usize)>> {
    if r_gt <= 0.0 {
        return Err(Error::invalid("matching radius must be positive"));
    }
    let warped: Vec<_> = src_kps.points.iter().map(|p| gt.apply(p)).collect();
    let tgt_grid = NnGrid::build(&tgt_kps.points)?;
    let warped_grid = NnGrid::build(&warped)?;
    let r2 = r_gt * r_gt;
    let mut pairs = Vec::new();
    for (i, w) in warped.iter().enumerate() {
        let (j, d2) = tgt_grid.nearest(w);
        if d2 < r2 && warped_grid.nearest(&tgt_kps.points[j as usize]).0 as usize == i {
            pairs.push((i, j as usize));
        }
    }
    Ok(pairs)
}

/// Dense 0/1 supervision matrix from sparse pairs.
pub fn gt_matrix(pairs: &[(usize, usize)], rows: usize, cols: usize) -> Result<Array2<Real>> {
    let mut m = Array2::zeros((rows, cols));
    for &(i, j) in pairs {
        if i >= rows || j >= cols {
            return Err(Error::invalid(format!(
                "pair ({i}, {j}) outside a {rows}x{cols} matrix"
            )));
        }
        m[(i, j)] = 1.0;
    }
    Ok(m)
}

/// Focal binary cross-entropy over every confidence entry, normalized by the
/// positive count. Predictions are clamped to `[1e-7, 1-1e-7]`; the clamp is
/// flat, so entries outside it receive zero gradient.
pub(crate) fn focal_loss_op(tape: &mut Tape, g: Var, gt: Array2<Real>) -> Var {
    let p = tape.value(g);
    assert_eq!(p.dim(), gt.dim(), "confidence/ground-truth shape mismatch");
    let n_pos = gt.iter().filter(|&&v| v > 0.5).count().max(1) as Real;
    let mut total = 0.0;
    for (pv, gv) in p.iter().zip(gt.iter()) {
        let q = pv.clamp(CLAMP_LO, CLAMP_HI);
        total += if *gv > 0.5 {
            -FOCAL_ALPHA * (1.0 - q).powi(FOCAL_GAMMA_EXP) * q.ln()
        } else {
            -(1.0 - FOCAL_ALPHA) * q.powi(FOCAL_GAMMA_EXP) * (1.0 - q).ln()
        };
    }
    let value = Array2::from_elem((1, 1), total / n_pos);
    tape.custom(
        &[g],
        value,
        Box::new(move |up, parents, _| {
            let scale = up[(0, 0)] / n_pos;
            let p = parents[0];
            let mut grad = Array2::zeros(p.dim());
            for ((out, pv), gv) in grad.iter_mut().zip(p.iter()).zip(gt.iter()) {
                if !(CLAMP_LO..=CLAMP_HI).contains(pv) {
                    continue;
                }
                let q = *pv;
                let d = if *gv > 0.5 {
                    FOCAL_ALPHA * (1.0 - q) * (2.0 * q.ln() - (1.0 - q) / q)
                } else {
                    -(1.0 - FOCAL_ALPHA) * (2.0 * q * (1.0 - q).ln() - q * q / (1.0 - q))
                };
                *out = scale * d;
            }
            vec![grad]
        }),
    )
}

/// Scalar focal loss of a confidence matrix against binary supervision.
pub fn loss_corr_value(g: &ConfidenceMatrix, gt: &Array2<Real>) -> Result<Real> {
    if g.values.dim() != gt.dim() {
        return Err(Error::invalid(format!(
            "confidence is {:?} but ground truth is {:?}",
            g.values.dim(),
            gt.dim()
        )));
    }
    if gt.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid("ground-truth matrix must be binary"));
    }
    let mut tape = Tape::new();
    let gv = tape.leaf(g.values.clone());
    let loss = focal_loss_op(&mut tape, gv, gt.clone());
    Ok(tape.value(loss)[(0, 0)])
}

/// Mean distance between the images of `keypoints` under the two poses.
pub fn loss_tran_value(
    t_pred: &RigidTransform,
    t_gt: &RigidTransform,
    keypoints: &PointCloud,
) -> Result<Real> {
    if keypoints.is_empty() {
        return Err(Error::invalid("transfer loss needs at least one keypoint"));
    }
    let total: Real = keypoints
        .points
        .iter()
        .map(|p| (t_pred.apply(p) - t_gt.apply(p)).norm())
        .sum();
    Ok(total / keypoints.len() as Real)
}

fn points_matrix(points: &[nalgebra::Vector3<Real>]) -> Array2<Real> {
    let mut m = Array2::zeros((points.len(), 3));
    for (r, p) in points.iter().enumerate() {
        m[(r, 0)] = p.x;
        m[(r, 1)] = p.y;
        m[(r, 2)] = p.z;
    }
    m
}

/// Weighted rigid fit on the tape: confidence entries at `pairs` become the
/// weights of a closed-form alignment whose rotation flows through the SVD
/// backward. Returns the rotation (3x3) and translation (1x3) vars.
pub(crate) fn differentiable_pose(
    tape: &mut Tape,
    g: Var,
    pairs: &[(usize, usize)],
    src_kps: &PointCloud,
    tgt_kps: &PointCloud,
) -> Result<(Var, Var)> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientMatches(format!(
            "differentiable pose needs >= 3 pairs, got {}",
            pairs.len()
        )));
    }
    let k = pairs.len();
    let s_pts: Vec<_> = pairs.iter().map(|&(i, _)| src_kps.points[i]).collect();
    let t_pts: Vec<_> = pairs.iter().map(|&(_, j)| tgt_kps.points[j]).collect();
    let s = tape.leaf(points_matrix(&s_pts));
    let t = tape.leaf(points_matrix(&t_pts));

    let w_raw = tape.gather_entries(g, pairs.to_vec());
    let total = tape.sum_all(w_raw);
    let denom = tape.broadcast_row(total, k);
    let w = tape.div(w_raw, denom);

    let wt = tape.transpose(w);
    let s_bar = tape.matmul(wt, s);
    let t_bar = tape.matmul(wt, t);
    let s_bar_rows = tape.broadcast_row(s_bar, k);
    let t_bar_rows = tape.broadcast_row(t_bar, k);
    let s_hat = tape.sub(s, s_bar_rows);
    let t_hat = tape.sub(t, t_bar_rows);
    let s_weighted = tape.mul_col(s_hat, w);
    let swt = tape.transpose(s_weighted);
    let h = tape.matmul(swt, t_hat);
    let r = svd_rotation_op(tape, h)?;
    let rt = tape.transpose(r);
    let s_bar_rot = tape.matmul(s_bar, rt);
    let t_row = tape.sub(t_bar, s_bar_rot);
    Ok((r, t_row))
}

/// Transfer loss on the tape: mean distance between `eval_points` mapped by
/// the differentiable pose and by the reference pose.
pub(crate) fn transfer_loss_op(
    tape: &mut Tape,
    g: Var,
    pairs: &[(usize, usize)],
    src_kps: &PointCloud,
    tgt_kps: &PointCloud,
    eval_points: &PointCloud,
    t_gt: &RigidTransform,
) -> Result<Var> {
    if eval_points.is_empty() {
        return Err(Error::invalid("transfer loss needs at least one keypoint"));
    }
    let (r, t_row) = differentiable_pose(tape, g, pairs, src_kps, tgt_kps)?;
    let x = tape.leaf(points_matrix(&eval_points.points));
    let gt_pts: Vec<_> = eval_points.points.iter().map(|p| t_gt.apply(p)).collect();
    let gt_leaf = tape.leaf(points_matrix(&gt_pts));
    let rt = tape.transpose(r);
    let rotated = tape.matmul(x, rt);
    let pred = tape.add_row(rotated, t_row);
    let diff = tape.sub(pred, gt_leaf);
    let sq = tape.mul(diff, diff);
    let row_sums = tape.sum_over_cols(sq);
    let norms = tape.sqrt_eps(row_sums, 1e-18);
    Ok(tape.mean_all(norms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{weighted_kabsch, CorrespondenceSet, Vec3};
    use crate::tape::testutil::{fd_check, randn};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_has_negligible_loss() {
        let gt = gt_matrix(&[(0, 1), (2, 0)], 3, 2).unwrap();
        let g = ConfidenceMatrix::new(gt.clone()).unwrap();
        let loss = loss_corr_value(&g, &gt).unwrap();
        assert!(loss < 1e-5, "perfect prediction scored {loss}");
    }

    #[test]
    fn inverted_prediction_is_maximal() {
        let gt = gt_matrix(&[(0, 0), (1, 2)], 2, 3).unwrap();
        let inverted = ConfidenceMatrix::new(gt.mapv(|v| 1.0 - v)).unwrap();
        let perfect = ConfidenceMatrix::new(gt.clone()).unwrap();
        let bad = loss_corr_value(&inverted, &gt).unwrap();
        let good = loss_corr_value(&perfect, &gt).unwrap();
        assert!(bad > good);
        assert!(bad > 1.0);
    }

    #[test]
    fn single_positive_matches_hand_value() {
        let gt = array![[1.0]];
        let g = ConfidenceMatrix::new(array![[0.5]]).unwrap();
        let expected = -0.25 * 0.25 * 0.5_f64.ln();
        let loss = loss_corr_value(&g, &gt).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_normalized_per_positive() {
        let gt1 = array![[1.0, 0.0]];
        let g1 = ConfidenceMatrix::new(array![[0.5, 0.0]]).unwrap();
        let gt2 = array![[1.0, 0.0], [0.0, 1.0]];
        let g2 = ConfidenceMatrix::new(array![[0.5, 0.0], [0.0, 0.5]]).unwrap();
        let a = loss_corr_value(&g1, &gt1).unwrap();
        let b = loss_corr_value(&g2, &gt2).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_and_nonbinary_gt_are_rejected() {
        let g = ConfidenceMatrix::new(array![[0.5]]).unwrap();
        assert!(loss_corr_value(&g, &array![[1.0, 0.0]]).is_err());
        assert!(loss_corr_value(&g, &array![[0.4]]).is_err());
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = Array2::from_shape_fn((4, 5), |_| rng.gen_range(0.05..0.95));
        let gt = Array2::from_shape_fn((4, 5), |(i, j)| if (i + j) % 3 == 0 { 1.0 } else { 0.0 });
        fd_check(
            &[p],
            |tape, vars| focal_loss_op(tape, vars[0], gt.clone()),
            1e-5,
        );
    }

    #[test]
    fn clamped_entries_get_zero_gradient() {
        let p = array![[1e-9, 0.5]];
        let gt = array![[1.0, 1.0]];
        let mut tape = Tape::new();
        let g = tape.leaf(p);
        let loss = focal_loss_op(&mut tape, g, gt);
        let grads = tape.backward(loss);
        let grad = grads.of(g).unwrap();
        assert_eq!(grad[(0, 0)], 0.0);
        assert!(grad[(0, 1)] != 0.0);
    }

    #[test]
    fn gt_pairs_are_mutual_and_within_radius() {
        let src = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.05, 0.0, 0.0),
            Vec3::new(0.0, 0.05, 0.0),
            Vec3::new(0.4, 0.4, 0.4),
        ])
        .unwrap();
        let pose = RigidTransform::from_axis_angle(&Vec3::new(0.0, 0.0, 0.3), Vec3::new(0.01, -0.02, 0.03));
        // Targets: images of the first three, slightly perturbed, plus a far stray.
        let mut tgt_pts: Vec<Vec3> = src.points[..3]
            .iter()
            .map(|p| pose.apply(p) + Vec3::new(0.0005, -0.0005, 0.0008))
            .collect();
        tgt_pts.push(Vec3::new(-0.5, -0.5, -0.5));
        let tgt = PointCloud::new(tgt_pts).unwrap();
        let pairs = gt_correspondences(&src, &tgt, &pose, 0.003).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn gt_pairs_vanish_when_radius_shrinks() {
        let src = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.05, 0.0, 0.0),
            Vec3::new(0.0, 0.05, 0.0),
        ])
        .unwrap();
        let pose = RigidTransform::identity();
        let tgt = PointCloud::new(
            src.points
                .iter()
                .map(|p| p + Vec3::new(0.002, 0.0, 0.0))
                .collect(),
        )
        .unwrap();
        assert_eq!(gt_correspondences(&src, &tgt, &pose, 0.0005).unwrap(), vec![]);
        assert_eq!(
            gt_correspondences(&src, &tgt, &pose, 0.01).unwrap().len(),
            3
        );
    }

    #[test]
    fn transfer_loss_zero_for_equal_poses_and_linear_in_shift() {
        let kps = PointCloud::new(vec![
            Vec3::new(0.01, 0.02, 0.03),
            Vec3::new(-0.02, 0.01, 0.04),
            Vec3::new(0.03, -0.01, 0.02),
        ])
        .unwrap();
        let pose = RigidTransform::from_axis_angle(&Vec3::new(0.2, -0.1, 0.4), Vec3::new(0.01, 0.02, -0.01));
        assert_eq!(loss_tran_value(&pose, &pose, &kps).unwrap(), 0.0);
        let shifted = RigidTransform::new(
            pose.rotation,
            pose.translation + Vec3::new(0.001, 0.0, 0.0),
        )
        .unwrap();
        let loss = loss_tran_value(&shifted, &pose, &kps).unwrap();
        assert!((loss - 0.001).abs() < 1e-12);
    }

    #[test]
    fn transfer_loss_rejects_empty_keypoints() {
        let kps = PointCloud::new(vec![]).unwrap();
        let pose = RigidTransform::identity();
        assert!(loss_tran_value(&pose, &pose, &kps).is_err());
    }

    #[test]
    fn differentiable_pose_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let src_pts: Vec<Vec3> = (0..10)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let src = PointCloud::new(src_pts).unwrap();
        let pose = RigidTransform::from_axis_angle(&Vec3::new(0.3, 0.2, -0.5), Vec3::new(0.02, -0.01, 0.03));
        let tgt = src.apply_transform(&pose);

        let pairs: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let mut g = Array2::zeros((10, 10));
        for i in 0..10 {
            g[(i, i)] = rng.gen_range(0.2..0.9);
        }
        let weights: Vec<Real> = (0..10).map(|i| g[(i, i)]).collect();

        let mut tape = Tape::new();
        let gv = tape.leaf(g);
        let (r, t) = differentiable_pose(&mut tape, gv, &pairs, &src, &tgt).unwrap();
        let corr = CorrespondenceSet { pairs, weights };
        let reference = weighted_kabsch(&src, &tgt, &corr).unwrap();
        for row in 0..3 {
            for col in 0..3 {
                assert!(
                    (tape.value(r)[(row, col)] - reference.rotation[(row, col)]).abs() < 1e-9
                );
            }
            assert!((tape.value(t)[(0, row)] - reference.translation[row]).abs() < 1e-9);
        }
    }

    #[test]
    fn transfer_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src_pts: Vec<Vec3> = (0..6)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let src = PointCloud::new(src_pts).unwrap();
        let pose = RigidTransform::from_axis_angle(&Vec3::new(-0.2, 0.4, 0.1), Vec3::new(0.01, 0.0, -0.02));
        // Perturbed targets so the fit is not exact and the loss is nonzero.
        let tgt = PointCloud::new(
            src.points
                .iter()
                .map(|p| pose.apply(p) + Vec3::new(rng.gen_range(-2e-3..2e-3), 0.0, 0.0))
                .collect(),
        )
        .unwrap();
        let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        let mut g0 = randn(6, 6, 7).mapv(|v| 0.5 + 0.3 * v.tanh());
        for i in 0..6 {
            g0[(i, i)] += 0.4;
        }
        let src_c = src.clone();
        let tgt_c = tgt.clone();
        let pairs_c = pairs.clone();
        fd_check(
            &[g0],
            move |tape, vars| {
                transfer_loss_op(tape, vars[0], &pairs_c, &src_c, &tgt_c, &src_c, &pose).unwrap()
            },
            1e-4,
        );
    }
}
