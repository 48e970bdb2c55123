//! Procedural desk-scale scenes: organ-like meshes, seeded camera shells,
//! analytic ground-truth deformations, depth-writing occluders, and a
//! reproducible on-disk dataset format.

mod dataset;
mod deform;
mod organ;
mod scene;

pub use dataset::{
    dataset_digest, generate_dataset, load_sample, load_scene_mesh, open_dataset, scene_dir,
    scene_splits, view_dir, DatasetConfig, DatasetIndex, DatasetSummary, LoadedSample,
    SampleLocator,
};
pub(crate) use dataset::mix_seed;
pub use deform::{deform_gt, deform_point, BulgeParams, DeformParams};
pub use organ::{gen_organ, icosphere};
pub use scene::{
    add_noise, default_intrinsics, look_at_pose, place_occluders, render_sample, sample_deform,
    sample_view, synthesize_view, SynthConfig, ViewSample,
};

use crate::geom::Real;

/// Standard normal draw via Box-Muller.
pub(crate) fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> Real {
    use rand::Rng;
    let u1: Real = rng.gen_range(1e-12..1.0);
    let u2: Real = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}
