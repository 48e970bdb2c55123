//! Recovery of the visible metric surface from a masked monocular depth map.
//!
//! A depth map with unknown global scale is backprojected through the pinhole
//! intrinsics, then rescaled so the spread of the reconstruction along its
//! principal axis matches the reference model. Because the backprojection is
//! linear in depth, a global rescaling of the input depth cancels exactly in
//! the output.

use std::path::Path;

use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{pca_extent, scale_factor, CameraIntrinsics, PointCloud, Real};

/// Dense depth raster in meters; entries `<= 0` or non-finite are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Real>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "depth raster of {} values does not fill {width}x{height}",
                data.len()
            )));
        }
        Ok(DepthMap { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        DepthMap { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Real {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        let d = self.at(row, col);
        d.is_finite() && d > 0.0
    }

    /// Returns a copy with every depth multiplied by `s`.
    pub fn scaled(&self, s: Real) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|d| d * s).collect(),
        }
    }
}

/// Binary pixel mask; `true` marks pixels belonging to the target surface.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "mask of {} values does not fill {width}x{height}",
                data.len()
            )));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Bookkeeping from a recovery run.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    /// Pixels that were masked in and carried valid depth.
    pub used_pixels: usize,
    /// Masked-in pixels dropped for invalid depth.
    pub dropped_pixels: usize,
    /// Global scale applied to the backprojection.
    pub sigma: Real,
}

/// Backprojects every masked pixel with valid depth to a camera-frame point
/// `((u - cx) d / fx, (v - cy) d / fy, d)`.
///
/// Pixels are visited in row-major order, so output order is deterministic.
/// Errors when the rasters disagree in size or no pixel survives.
pub fn backproject(
    depth: &DepthMap,
    mask: &BinaryMask,
    intrinsics: &CameraIntrinsics,
) -> Result<(PointCloud, RecoveryReport)> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(Error::invalid(format!(
            "depth {}x{} vs mask {}x{}",
            depth.width, depth.height, mask.width, mask.height
        )));
    }
    if depth.width != intrinsics.width || depth.height != intrinsics.height {
        return Err(Error::invalid(format!(
            "depth {}x{} vs intrinsics {}x{}",
            depth.width, depth.height, intrinsics.width, intrinsics.height
        )));
    }
    let mut points = Vec::new();
    let mut dropped = 0usize;
    for v in 0..depth.height {
        for u in 0..depth.width {
            if !mask.at(v, u) {
                continue;
            }
            if !depth.is_valid(v, u) {
                dropped += 1;
                continue;
            }
            points.push(intrinsics.backproject(u as Real, v as Real, depth.at(v, u)));
        }
    }
    if points.is_empty() {
        return Err(Error::invalid("no masked pixel carries valid depth"));
    }
    let used = points.len();
    Ok((
        PointCloud::new(points)?,
        RecoveryReport { used_pixels: used, dropped_pixels: dropped, sigma: 1.0 },
    ))
}

/// Recovers the visible surface at the reference model's scale.
///
/// Computes the raw backprojection, estimates the global scale as the ratio
/// of principal-axis extents (reference over reconstruction), and scales the
/// backprojection about the camera origin. The output extent matches the
/// reference extent exactly, and multiplying the input depth by any positive
/// constant leaves the output unchanged up to roundoff.
pub fn scale_consistent_recover(
    reference: &PointCloud,
    depth: &DepthMap,
    mask: &BinaryMask,
    intrinsics: &CameraIntrinsics,
) -> Result<(PointCloud, RecoveryReport)> {
    let (raw, mut report) = backproject(depth, mask, intrinsics)?;
    if raw.len() < 2 {
        return Err(Error::degenerate("recovery needs at least 2 surface pixels"));
    }
    let sigma = scale_factor(reference, &raw)?;
    report.sigma = sigma;
    Ok((raw.scale(sigma), report))
}

/// Source of depth maps for a given frame directory.
///
/// Implementations may return metric depth or depth known only up to scale;
/// downstream recovery removes the global scale either way.
pub trait DepthProvider {
    fn depth_for(&self, frame_dir: &Path) -> Result<DepthMap>;
}

/// Reads the ground-truth depth raster stored with the frame.
pub struct MetricDepthProvider;

impl DepthProvider for MetricDepthProvider {
    fn depth_for(&self, frame_dir: &Path) -> Result<DepthMap> {
        crate::io::read_pgm16(&frame_dir.join("depth.pgm"))
    }
}

/// Emulates a relative-depth estimator: the stored ground-truth depth times a
/// seeded per-frame global scale drawn uniformly from `[0.25, 4]`.
pub struct SyntheticRelativeDepth {
    pub seed: u64,
}

impl SyntheticRelativeDepth {
    /// The scale this provider will apply for a given frame directory.
    pub fn scale_for(&self, frame_dir: &Path) -> Real {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(frame_dir.to_string_lossy().as_bytes());
        let digest = hasher.finalize();
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&digest[..8]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed_bytes));
        rng.gen_range(0.25..=4.0)
    }
}

impl DepthProvider for SyntheticRelativeDepth {
    fn depth_for(&self, frame_dir: &Path) -> Result<DepthMap> {
        let gt = crate::io::read_pgm16(&frame_dir.join("depth.pgm"))?;
        Ok(gt.scaled(self.scale_for(frame_dir)))
    }
}

/// Sanity check helper: extent agreement between a recovery and its reference.
pub fn extent_mismatch(reference: &PointCloud, recovered: &PointCloud) -> Result<Real> {
    let a = pca_extent(reference)?;
    let b = pca_extent(recovered)?;
    Ok(((a - b) / a).abs())
}
