//! Value types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use super::{Mat3, Real, Vec3};
use crate::error::{Error, Result};

/// Per-point feature block stored row-major with uniform width.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    width: usize,
    data: Vec<Real>,
}

impl Features {
    pub fn new(width: usize, data: Vec<Real>) -> Result<Self> {
        if width == 0 || data.len() % width != 0 {
            return Err(Error::invalid(format!(
                "feature block of {} values does not tile width {}",
                data.len(),
                width
            )));
        }
        Ok(Features { width, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[Real] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }
}

/// Unordered set of 3D points with optional per-point features.
///
/// Points must be finite; ops that require non-empty input check at call time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub features: Option<Features>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(PointCloud { points, features: None })
    }

    pub fn with_features(points: Vec<Vec3>, features: Features) -> Result<Self> {
        if features.len() != points.len() {
            return Err(Error::invalid(format!(
                "{} feature rows for {} points",
                features.len(),
                points.len()
            )));
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.features = Some(features);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Returns the transformed cloud `R p + t` per point; features carry over
    /// unchanged.
    pub fn apply_transform(&self, transform: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| transform.apply(p)).collect(),
            features: self.features.clone(),
        }
    }

    /// Uniformly scales every point about the origin.
    pub fn scale(&self, s: Real) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p * s).collect(),
            features: self.features.clone(),
        }
    }

    pub fn centroid(&self) -> Result<Vec3> {
        if self.is_empty() {
            return Err(Error::invalid("centroid of empty cloud"));
        }
        let sum: Vec3 = self.points.iter().sum();
        Ok(sum / self.points.len() as Real)
    }

    /// Axis-aligned bounding box as (min, max); errors on empty input.
    pub fn bbox(&self) -> Result<(Vec3, Vec3)> {
        if self.is_empty() {
            return Err(Error::invalid("bounding box of empty cloud"));
        }
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Ok((lo, hi))
    }

    /// Length of the bounding-box diagonal.
    pub fn bbox_diagonal(&self) -> Result<Real> {
        let (lo, hi) = self.bbox()?;
        Ok((hi - lo).norm())
    }
}

/// Rigid transform `p -> R p + t` with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Tolerance on `R^T R = I` and `det R = 1` accepted by the constructor.
const ROTATION_TOL: Real = 1e-9;

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Mat3::identity()).norm();
        if dev > ROTATION_TOL * 10.0 {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (|R^T R - I| = {dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL * 10.0 {
            return Err(Error::invalid(format!("rotation determinant {det} != 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation is non-finite"));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Composition: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Rotation from an axis-angle vector (Rodrigues), stable near zero.
    pub fn from_axis_angle(omega: &Vec3, translation: Vec3) -> RigidTransform {
        RigidTransform { rotation: rodrigues(omega), translation }
    }

    /// Row-major `[R | t]` flattened to 12 numbers.
    pub fn to_flat(&self) -> [Real; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn from_flat(v: &[Real; 12]) -> Result<Self> {
        let rotation = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        RigidTransform::new(rotation, Vec3::new(v[3], v[7], v[11]))
    }
}

/// Rodrigues rotation matrix, with the small-angle Taylor fallback expressed
/// in powers of `theta^2` so the map stays smooth through zero.
pub(crate) fn rodrigues(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let (a, b) = rodrigues_coeffs(theta2);
    let k = skew(omega);
    Mat3::identity() + k * a + k * k * b
}

/// Coefficients (sin(t)/t, (1-cos(t))/t^2) as smooth functions of t^2.
pub(crate) fn rodrigues_coeffs(theta2: Real) -> (Real, Real) {
    if theta2 < 1e-8 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    }
}

pub(crate) fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Pinhole camera intrinsics in pixel units.
///
/// Pixel `(row v, col u)` samples the ray through image coordinates `(u, v)`;
/// projection is `u = fx X/Z + cx`, `v = fy Y/Z + cy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: Real, fy: Real, cx: Real, cy: Real, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !(0.0..width as Real).contains(&cx) || !(0.0..height as Real).contains(&cy) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Projects a camera-frame point to image coordinates (u, v); `z` must be
    /// positive for the result to be meaningful.
    #[inline]
    pub fn project(&self, p: &Vec3) -> (Real, Real) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Lifts image coordinates plus depth to a camera-frame point.
    #[inline]
    pub fn backproject(&self, u: Real, v: Real, depth: Real) -> Vec3 {
        Vec3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }
}

/// Indexed correspondence pairs `(source_idx, target_idx)` with nonnegative
/// weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub weights: Vec<Real>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(usize, usize)>, weights: Vec<Real>) -> Result<Self> {
        if pairs.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} pairs with {} weights",
                pairs.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("correspondence weights must be finite and >= 0"));
        }
        Ok(CorrespondenceSet { pairs, weights })
    }

    /// Uniform unit weights over index-aligned pairs `(i, i)`.
    pub fn index_aligned(n: usize) -> Self {
        CorrespondenceSet { pairs: (0..n).map(|i| (i, i)).collect(), weights: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks every index against the given cloud sizes.
    pub fn validate(&self, source_len: usize, target_len: usize) -> Result<()> {
        for &(i, j) in &self.pairs {
            if i >= source_len || j >= target_len {
                return Err(Error::invalid(format!(
                    "correspondence ({i}, {j}) out of range for {source_len}/{target_len} points"
                )));
            }
        }
        Ok(())
    }
}

/// Triangle mesh with validated face indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("mesh contains non-finite vertices"));
        }
        let n = vertices.len() as u32;
        for (fi, f) in faces.iter().enumerate() {
            if f[0] >= n || f[1] >= n || f[2] >= n {
                return Err(Error::invalid(format!("face {fi} references vertex beyond {n}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {fi} repeats a vertex index")));
            }
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn vertex_cloud(&self) -> PointCloud {
        PointCloud { points: self.vertices.clone(), features: None }
    }

    pub fn apply_transform(&self, transform: &RigidTransform) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|p| transform.apply(p)).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn face_area(&self, f: &[u32; 3]) -> Real {
        let a = self.vertices[f[0] as usize];
        let b = self.vertices[f[1] as usize];
        let c = self.vertices[f[2] as usize];
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn mean_edge_length(&self) -> Result<Real> {
        if self.faces.is_empty() {
            return Err(Error::invalid("mesh has no faces"));
        }
        let mut total = 0.0;
        for f in &self.faces {
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                total += (self.vertices[f[i] as usize] - self.vertices[f[j] as usize]).norm();
            }
        }
        // Shared edges are counted from both sides; the mean is unaffected.
        Ok(total / (3 * self.faces.len()) as Real)
    }

    /// Area-weighted uniform surface samples, deterministic for a given seed.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<PointCloud> {
        use rand::{Rng, SeedableRng};
        if self.faces.is_empty() {
            return Err(Error::invalid("cannot sample a mesh without faces"));
        }
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in &self.faces {
            total += self.face_area(f);
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Err(Error::degenerate("mesh has zero surface area"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.gen_range(0.0..total);
            let fi = cumulative.partition_point(|&c| c < target).min(self.faces.len() - 1);
            let f = &self.faces[fi];
            let (mut r1, r2): (Real, Real) = (rng.gen(), rng.gen());
            r1 = r1.sqrt();
            let (a, b, c) = (
                self.vertices[f[0] as usize],
                self.vertices[f[1] as usize],
                self.vertices[f[2] as usize],
            );
            points.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
        }
        PointCloud::new(points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn transform_rotates_and_translates() {
        // 90 degree rotation about z maps +x to +y.
        let rot = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let t = RigidTransform::new(rot, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let p = t.apply(&Vec3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p, Vec3::new(0.0, 1.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn inverse_round_trips() {
        let omega = Vec3::new(0.3, -0.2, 0.9);
        let t = RigidTransform::from_axis_angle(&omega, Vec3::new(0.1, 0.2, -0.3));
        let round = t.compose(&t.inverse());
        assert_abs_diff_eq!(round.rotation, Mat3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(round.translation, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn improper_rotation_rejected() {
        let reflect = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn rodrigues_matches_nalgebra() {
        let omega = Vec3::new(0.4, 0.1, -0.7);
        let ours = rodrigues(&omega);
        let theirs = nalgebra::Rotation3::from_scaled_axis(omega);
        assert_abs_diff_eq!(ours, *theirs.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn flat_round_trip() {
        let t = RigidTransform::from_axis_angle(&Vec3::new(0.1, 0.5, -0.2), Vec3::new(1.0, 2.0, 3.0));
        let back = RigidTransform::from_flat(&t.to_flat()).unwrap();
        assert_abs_diff_eq!(back.rotation, t.rotation, epsilon = 1e-14);
        assert_abs_diff_eq!(back.translation, t.translation, epsilon = 1e-14);
    }

    #[test]
    fn intrinsics_validate_ranges() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 0.0, 4, 4).is_err());
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        // Unit focal length, zero principal point: pixel (0,0) at depth 1 lifts
        // to the optical axis.
        assert_abs_diff_eq!(k.backproject(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn projection_inverts_backprojection() {
        let k = CameraIntrinsics::new(300.0, 320.0, 127.5, 130.0, 256, 256).unwrap();
        let p = k.backproject(17.0, 203.0, 0.37);
        let (u, v) = k.project(&p);
        assert_abs_diff_eq!(u, 17.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 203.0, epsilon = 1e-12);
    }

    #[test]
    fn mesh_validation_rejects_bad_faces() {
        let verts = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(TriMesh::new(verts.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::new(verts.clone(), vec![[0, 1, 1]]).is_err());
        assert!(TriMesh::new(verts, vec![[0, 1, 2]]).is_ok());
    }

    #[test]
    fn surface_samples_live_on_triangle() {
        let mesh = TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y()],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let cloud = mesh.sample_surface(128, 3).unwrap();
        assert_eq!(cloud.len(), 128);
        for p in &cloud.points {
            assert!(p.z.abs() < 1e-12);
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x + p.y <= 1.0 + 1e-12);
        }
        // Same seed reproduces the exact sample set.
        let again = mesh.sample_surface(128, 3).unwrap();
        assert_eq!(cloud, again);
    }
}
