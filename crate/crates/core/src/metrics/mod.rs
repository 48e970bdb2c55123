//! Registration quality metrics.
//!
//! Correspondence-level: inlier ratio under the reference pose and the
//! feature matching recall over a set of pairs. Pose-level: registration
//! recall from ground-truth-correspondence RMSE, geodesic rotation error,
//! and Euclidean translation error. Shape-level: 2D Dice overlap and the
//! bidirectional mean closest-point distance in millimeters.
//!
//! Every function here is deliberately small and allocation-light so the
//! test suite can check each one against an independent brute-force
//! reference to tight tolerances.

mod report;

pub use report::{
    line_plot, report_digest, summarize, summary_toml, sweep_csv, sweep_report,
    write_sweep_report, EvalSummary, SummaryStat, SweepArtifacts, SweepPoint, SweepReport,
    SweepRow,
};

use crate::error::{Error, Result};
use crate::geom::{CorrespondenceSet, Mat3, NnGrid, PointCloud, Real, RigidTransform, Vec3};
use crate::recovery::BinaryMask;

/// Default inlier distance for the inlier ratio: 1 cm.
pub const DEFAULT_TAU1: Real = 0.01;
/// Default inlier-ratio cutoff for feature matching recall: 5%.
pub const DEFAULT_TAU2: Real = 0.05;
/// Default RMSE cutoff for registration recall: 1 cm.
pub const DEFAULT_RHO: Real = 0.01;

/// The three decision thresholds the pair metrics depend on, carried with
/// every evaluation so reports stay self-describing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricThresholds {
    /// Correspondence inlier distance in meters.
    pub tau1: Real,
    /// Minimum inlier ratio for a pair to count toward matching recall.
    pub tau2: Real,
    /// RMSE bound in meters under which a pose counts as recalled.
    pub rho: Real,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds { tau1: DEFAULT_TAU1, tau2: DEFAULT_TAU2, rho: DEFAULT_RHO }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2), ("rho", self.rho)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("threshold {name} = {v} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Full metric record for one registered pair. Dice and chamfer are optional
/// because they need rendered masks / warped clouds that rigid-only
/// evaluations do not produce.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairEvaluation {
    /// Fraction of putative matches that are inliers under the reference pose.
    pub inlier_ratio: Real,
    /// Root-mean-square residual of ground-truth correspondences under the
    /// estimated pose, meters.
    pub rmse_m: Real,
    /// Geodesic rotation error, degrees.
    pub rre_deg: Real,
    /// Translation error, millimeters.
    pub rte_mm: Real,
    /// 2D silhouette overlap, when a rendered comparison exists.
    pub dice: Option<Real>,
    /// Bidirectional mean closest-point distance, millimeters.
    pub cd_mm: Option<Real>,
    pub thresholds: MetricThresholds,
}

impl PairEvaluation {
    /// Does this pair count toward feature matching recall?
    pub fn fmr_hit(&self) -> bool {
        self.inlier_ratio > self.thresholds.tau2
    }

    /// Does this pair count toward registration recall?
    pub fn recalled(&self) -> bool {
        self.rmse_m < self.thresholds.rho
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if !(0.0..=1.0).contains(&self.inlier_ratio) {
            return Err(Error::invalid(format!("inlier ratio {} outside [0,1]", self.inlier_ratio)));
        }
        for (name, v) in [("rmse_m", self.rmse_m), ("rre_deg", self.rre_deg), ("rte_mm", self.rte_mm)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if let Some(d) = self.dice {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::invalid(format!("dice {d} outside [0,1]")));
            }
        }
        if let Some(c) = self.cd_mm {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::invalid(format!("cd_mm {c} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Assembles the record from one registered pair: putative matches are
    /// judged against the reference pose, the reference correspondences
    /// against the estimated pose, and the pose error against the reference
    /// directly. `dice` and `cd_mm` pass through when available.
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        putative: &CorrespondenceSet,
        gt_corr: &CorrespondenceSet,
        source: &PointCloud,
        target: &PointCloud,
        gt_pose: &RigidTransform,
        est_pose: &RigidTransform,
        dice: Option<Real>,
        cd_mm: Option<Real>,
        thresholds: MetricThresholds,
    ) -> Result<PairEvaluation> {
        let eval = PairEvaluation {
            inlier_ratio: inlier_ratio(putative, source, target, gt_pose, thresholds.tau1)?,
            rmse_m: rmse_under_pose(gt_corr, source, target, est_pose)?,
            rre_deg: rre(&est_pose.rotation, &gt_pose.rotation),
            rte_mm: rte(&est_pose.translation, &gt_pose.translation),
            dice,
            cd_mm,
            thresholds,
        };
        eval.validate()?;
        Ok(eval)
    }
}

/// Fraction of putative pairs `(s_i, t_j)` with `‖T(s_i) − t_j‖ < tau1`
/// under the reference transform. Errors on an empty set — a matcher that
/// produced nothing has no ratio, and silently reporting 0 would skew
/// averages.
pub fn inlier_ratio(
    corr: &CorrespondenceSet,
    source: &PointCloud,
    target: &PointCloud,
    gt_pose: &RigidTransform,
    tau1: Real,
) -> Result<Real> {
    if !tau1.is_finite() || tau1 <= 0.0 {
        return Err(Error::invalid(format!("tau1 = {tau1} must be > 0")));
    }
    if corr.is_empty() {
        return Err(Error::invalid("inlier ratio of zero correspondences"));
    }
    corr.validate(source.len(), target.len())?;
    let hits = corr
        .pairs
        .iter()
        .filter(|&&(i, j)| (gt_pose.apply(&source.points[i]) - target.points[j]).norm() < tau1)
        .count();
    Ok(hits as Real / corr.len() as Real)
}

/// Feature matching recall: the fraction of pairs whose inlier ratio exceeds
/// `tau2` (strictly).
pub fn fmr(pair_irs: &[Real], tau2: Real) -> Result<Real> {
    if !tau2.is_finite() || tau2 <= 0.0 {
        return Err(Error::invalid(format!("tau2 = {tau2} must be > 0")));
    }
    if pair_irs.is_empty() {
        return Err(Error::invalid("matching recall over zero pairs"));
    }
    for &ir in pair_irs {
        if !(0.0..=1.0).contains(&ir) {
            return Err(Error::invalid(format!("inlier ratio {ir} outside [0,1]")));
        }
    }
    let hits = pair_irs.iter().filter(|&&ir| ir > tau2).count();
    Ok(hits as Real / pair_irs.len() as Real)
}

/// Root-mean-square residual `sqrt(mean ‖T(s_i) − t_j‖²)` of reference
/// correspondences under an estimated transform.
pub fn rmse_under_pose(
    corr: &CorrespondenceSet,
    source: &PointCloud,
    target: &PointCloud,
    pose: &RigidTransform,
) -> Result<Real> {
    if corr.is_empty() {
        return Err(Error::invalid("RMSE over zero correspondences"));
    }
    corr.validate(source.len(), target.len())?;
    let total: Real = corr
        .pairs
        .iter()
        .map(|&(i, j)| (pose.apply(&source.points[i]) - target.points[j]).norm_squared())
        .sum();
    Ok((total / corr.len() as Real).sqrt())
}

/// Fraction of pairs whose RMSE is below `rho` (strictly).
pub fn registration_recall(rmses: &[Real], rho: Real) -> Result<Real> {
    if !rho.is_finite() || rho <= 0.0 {
        return Err(Error::invalid(format!("rho = {rho} must be > 0")));
    }
    if rmses.is_empty() {
        return Err(Error::invalid("recall over zero pairs"));
    }
    for &r in rmses {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::invalid(format!("RMSE {r} must be finite and >= 0")));
        }
    }
    let hits = rmses.iter().filter(|&&r| r < rho).count();
    Ok(hits as Real / rmses.len() as Real)
}

/// Geodesic distance between two rotations in degrees:
/// `arccos((trace(R_predᵀ R_gt) − 1) / 2)`. The cosine is clamped so
/// rotations that differ only by rounding never produce NaN.
pub fn rre(r_pred: &Mat3, r_gt: &Mat3) -> Real {
    let cos = ((r_pred.transpose() * r_gt).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Euclidean distance between two translations, reported in millimeters.
pub fn rte(t_pred: &Vec3, t_gt: &Vec3) -> Real {
    (t_pred - t_gt).norm() * 1000.0
}

/// Dice overlap `2|a∩b| / (|a| + |b|)` of two binary masks. Two empty masks
/// are identical, so their overlap is 1.
pub fn dice2d(a: &BinaryMask, b: &BinaryMask) -> Result<Real> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let inter = a.data.iter().zip(&b.data).filter(|&(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as Real / total as Real)
}

/// Bidirectional mean closest-point distance in millimeters: the average of
/// the two directional means of Euclidean (not squared) nearest-neighbor
/// distances. This is the reporting metric; the squared form used as a
/// training objective lives in [`crate::geom::chamfer`].
pub fn cd3d(a: &PointCloud, b: &PointCloud) -> Result<Real> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("closest-point distance of an empty cloud"));
    }
    let d_ab = mean_closest(a, b)?;
    let d_ba = mean_closest(b, a)?;
    Ok(0.5 * (d_ab + d_ba) * 1000.0)
}

/// Mean Euclidean nearest-neighbor distance from each point of `from` to
/// the set `to`, meters.
fn mean_closest(from: &PointCloud, to: &PointCloud) -> Result<Real> {
    let grid = NnGrid::build(&to.points)?;
    let total: Real = from.points.iter().map(|p| grid.nearest(p).1.sqrt()).sum();
    Ok(total / from.len() as Real)
}
