//! Partial-to-global point cloud registration for deformable anatomy.
//!
//! The pipeline aligns a partial intraoperative surface, recovered from
//! masked monocular depth, to a complete preoperative organ model:
//!
//! 1. [`recovery`] — backproject masked depth and restore metric scale by
//!    matching principal-axis extents against the preoperative model.
//! 2. [`rigid`] — learned correspondence matching (local descriptors plus a
//!    position-aware transformer) and robust pose estimation.
//! 3. [`nonrigid`] — a coarse-to-fine deformation pyramid gated by learned
//!    structural similarity, so unobserved regions stay rigid.
//! 4. [`render`] — a differentiable silhouette/depth rasterizer providing
//!    the self-supervised training signal for the gate.
//! 5. [`synth`] — procedural desk-scale scenes with exact ground truth for
//!    training and evaluation.
//! 6. [`metrics`] — registration quality measures and sweep reports.
//! 7. [`pipeline`] — configuration, artifacts, and the command entrypoints
//!    behind the `p2g` binary.

pub mod error;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod nonrigid;
pub mod recovery;
pub mod render;
pub mod rigid;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
