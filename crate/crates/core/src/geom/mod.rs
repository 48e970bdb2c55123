//! Core geometric types and operations: point clouds, triangle meshes, rigid
//! transforms, pinhole intrinsics, correspondence sets, and the closed-form
//! alignment solvers built on them.

mod chamfer;
mod downsample;
mod nn;
mod pca;
mod solve;
mod types;

pub use chamfer::{chamfer, chamfer_directed, nearest_neighbor_indices};
pub use downsample::{subsample, voxel_downsample, voxel_downsample_indices};
pub use nn::NnGrid;
pub use pca::{pca_extent, pca_extent_with, principal_axis, scale_factor, ExtentMode};
pub use solve::{umeyama_similarity, weighted_kabsch};
pub(crate) use solve::rotation_from_cross_covariance;
pub use types::{
    CameraIntrinsics, CorrespondenceSet, Features, PointCloud, RigidTransform, TriMesh,
};

/// Scalar type used across the toolkit.
pub type Real = f64;
/// 3-vector of [`Real`].
pub type Vec3 = nalgebra::Vector3<Real>;
/// 3x3 matrix of [`Real`].
pub type Mat3 = nalgebra::Matrix3<Real>;
