//! Principal-axis extent and the scale factor between two clouds.
//!
//! The extent of a cloud is measured along the eigenvector of its covariance
//! with the largest eigenvalue. The default reading is the peak-to-peak spread
//! of the projections; a percentile variant trims outliers and a standard
//! deviation variant is exposed for callers that prefer a moment-based scale.

use super::{Mat3, PointCloud, Real, Vec3};
use crate::error::{Error, Result};

/// How projections onto the principal axis are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtentMode {
    /// max - min of the projections.
    PeakToPeak,
    /// Difference between the given upper and lower percentiles (e.g. 1, 99),
    /// robust to stray points.
    Percentile(Real, Real),
    /// Standard deviation of the projections.
    StdDev,
}

/// Unit eigenvector of the covariance matrix with the largest eigenvalue.
///
/// The covariance is centered and normalized by the point count. Errors when
/// the cloud has fewer than 2 points or all points coincide (no preferred
/// direction). The sign of the axis is fixed so its largest-magnitude
/// component is positive, making the result deterministic.
pub fn principal_axis(cloud: &PointCloud) -> Result<Vec3> {
    if cloud.len() < 2 {
        return Err(Error::invalid(format!(
            "principal axis needs >= 2 points, got {}",
            cloud.len()
        )));
    }
    let centroid = cloud.centroid()?;
    let mut cov = Mat3::zeros();
    for p in &cloud.points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= cloud.len() as Real;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut best = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    if eig.eigenvalues[best] <= 0.0 || eig.eigenvalues[best] < 1e-24 {
        return Err(Error::degenerate("all points coincide; principal axis undefined"));
    }
    let mut axis: Vec3 = eig.eigenvectors.column(best).into();
    axis.normalize_mut();
    // Deterministic sign: largest-magnitude component positive.
    let mut lead = 0;
    for i in 1..3 {
        if axis[i].abs() > axis[lead].abs() {
            lead = i;
        }
    }
    if axis[lead] < 0.0 {
        axis = -axis;
    }
    Ok(axis)
}

/// Extent of the cloud along its principal axis, using [`ExtentMode::PeakToPeak`].
pub fn pca_extent(cloud: &PointCloud) -> Result<Real> {
    pca_extent_with(cloud, ExtentMode::PeakToPeak)
}

/// Extent of the cloud along its principal axis under the chosen reduction.
pub fn pca_extent_with(cloud: &PointCloud, mode: ExtentMode) -> Result<Real> {
    let axis = principal_axis(cloud)?;
    let mut proj: Vec<Real> = cloud.points.iter().map(|p| p.dot(&axis)).collect();
    match mode {
        ExtentMode::PeakToPeak => {
            let lo = proj.iter().cloned().fold(Real::INFINITY, Real::min);
            let hi = proj.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            Ok(hi - lo)
        }
        ExtentMode::Percentile(lo_pct, hi_pct) => {
            if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
                return Err(Error::invalid(format!(
                    "bad percentile range ({lo_pct}, {hi_pct})"
                )));
            }
            proj.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Ok(percentile(&proj, hi_pct) - percentile(&proj, lo_pct))
        }
        ExtentMode::StdDev => {
            let mean = proj.iter().sum::<Real>() / proj.len() as Real;
            let var = proj.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / proj.len() as Real;
            Ok(var.sqrt())
        }
    }
}

/// Linear-interpolated percentile of an ascending-sorted slice.
fn percentile(sorted: &[Real], pct: Real) -> Real {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = pct / 100.0 * (n - 1) as Real;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as Real;
    sorted[lo] * (1.0 - frac) + sorted[hi.min(n - 1)] * frac
}

/// Ratio of principal-axis extents `reference / reconstruction`.
///
/// This is the global scale applied to a backprojected cloud so its dominant
/// spread matches the reference model. Errors when either extent is degenerate
/// or the reconstruction extent is numerically zero.
pub fn scale_factor(reference: &PointCloud, reconstruction: &PointCloud) -> Result<Real> {
    let num = pca_extent(reference)?;
    let den = pca_extent(reconstruction)?;
    if den <= Real::EPSILON * num.max(1.0) {
        return Err(Error::degenerate("reconstruction has zero extent; scale undefined"));
    }
    let s = num / den;
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::numerical(format!("scale factor {s} is not a positive real")));
    }
    Ok(s)
}
