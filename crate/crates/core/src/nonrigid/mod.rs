//! Non-rigid refinement: a coarse-to-fine deformation pyramid fitted per
//! registration pair, and a learned per-point similarity gate that keeps
//! structurally unsupported regions anchored to their rigid placement.

mod gate;
mod pyramid;

pub use gate::{
    compute_gate, gate_on_tape, init_gate_params, local_features, low_rank_attention,
    similarity_gate, GateConfig, SimilarityGate,
};
pub use pyramid::{
    apply_level, fit_pyramid, level_trace_csv, posenc, DeformationPyramid, FitConfig, FitReport,
    LevelTrace, PyramidFit, PyramidLevel, LEVEL_CSV_HEADER,
};

use ndarray::Array2;

use crate::error::Result;
use crate::geom::{PointCloud, Real, Vec3};

pub(crate) fn cloud_matrix(cloud: &PointCloud) -> Array2<Real> {
    let mut m = Array2::zeros((cloud.len(), 3));
    for (i, p) in cloud.points.iter().enumerate() {
        m[(i, 0)] = p.x;
        m[(i, 1)] = p.y;
        m[(i, 2)] = p.z;
    }
    m
}

pub(crate) fn rows_to_cloud(rows: &Array2<Real>) -> Result<PointCloud> {
    PointCloud::new(
        rows.rows()
            .into_iter()
            .map(|r| Vec3::new(r[0], r[1], r[2]))
            .collect(),
    )
}
