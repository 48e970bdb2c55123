//! Learned rigid registration: keypoint encoding, a position-aware
//! transformer that produces soft correspondences between the complete
//! model cloud and the partial visible cloud, robust pose estimators, and
//! the supervised training loop.

mod encoder;
mod estimate;
mod fdt;
mod loss;
mod rotary;
mod train;

pub use encoder::{encode, local_descriptors, select_keypoints, FeatureCloud, DESCRIPTOR_WIDTH};
pub use estimate::{estimate_pose, Estimator};
pub use fdt::{
    dual_softmax, fdt_forward, match_confidence, select_correspondences, ConfidenceMatrix,
};
pub use loss::{gt_correspondences, loss_corr_value, loss_tran_value};
pub use rotary::{rotary_matrix, rotary_tables};
pub use train::{
    match_and_estimate, train_rigid, MatchDiagnostics, TrainConfig, TrainSummary, EPOCH_CSV_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Real;
use crate::tape::ParamSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture knobs for the matcher. `c` must stay divisible by 6 so the
/// rotary operator can pair feature dimensions with the three coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    /// Feature width through the transformer.
    pub c: usize,
    /// Attention heads; must divide `c`.
    pub heads: usize,
    /// Number of (self + cross) attention blocks.
    pub blocks: usize,
    /// Keypoint grid spacing in meters.
    pub keypoint_voxel: Real,
    /// Confidence threshold for correspondence selection.
    pub eta: Real,
    /// Maximum correspondences kept per pair.
    pub topk: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            c: 96,
            heads: 4,
            blocks: 2,
            keypoint_voxel: 0.008,
            eta: 0.15,
            topk: 500,
            seed: 17,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c % 6 != 0 {
            return Err(Error::invalid("feature width must be divisible by 6"));
        }
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::invalid("heads must divide the feature width"));
        }
        if self.blocks == 0 {
            return Err(Error::invalid("need at least one attention block"));
        }
        if self.keypoint_voxel <= 0.0 {
            return Err(Error::invalid("keypoint voxel must be positive"));
        }
        if !(0.0 < self.eta && self.eta < 1.0) {
            return Err(Error::invalid("eta must lie in (0,1)"));
        }
        if self.topk < 3 {
            return Err(Error::invalid("topk must be at least 3"));
        }
        Ok(())
    }

    /// Local-descriptor aggregation radii, tied to the keypoint spacing.
    pub fn descriptor_radii(&self) -> (Real, Real) {
        (2.5 * self.keypoint_voxel, 5.0 * self.keypoint_voxel)
    }
}

/// Freshly initialized matcher parameters: He-initialized linear layers,
/// zero biases, unit layer-norm gains.
pub fn init_matcher_params(cfg: &MatcherConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let c = cfg.c;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamSet::new();
    p.init_he("enc.w1", DESCRIPTOR_WIDTH, 64, &mut rng);
    p.init_zeros("enc.b1", 1, 64);
    p.init_he("enc.w2", 64, 64, &mut rng);
    p.init_zeros("enc.b2", 1, 64);
    p.init_he("enc.w3", 64, c, &mut rng);
    p.init_zeros("enc.b3", 1, c);
    for b in 0..cfg.blocks {
        for kind in ["self", "cross"] {
            let pre = format!("blk{b}.{kind}");
            p.init_xavier(&format!("{pre}.wq"), c, c, &mut rng);
            p.init_xavier(&format!("{pre}.wk"), c, c, &mut rng);
            p.init_xavier(&format!("{pre}.wv"), c, c, &mut rng);
            p.init_he(&format!("{pre}.mlp.w1"), 2 * c, 2 * c, &mut rng);
            p.init_zeros(&format!("{pre}.mlp.b1"), 1, 2 * c);
            p.init_he(&format!("{pre}.mlp.w2"), 2 * c, c, &mut rng);
            p.init_zeros(&format!("{pre}.mlp.b2"), 1, c);
            p.init_const(&format!("{pre}.ln.gamma"), 1, c, 1.0);
            p.init_zeros(&format!("{pre}.ln.beta"), 1, c);
        }
    }
    p.init_xavier("match.ws", c, c, &mut rng);
    p.init_xavier("match.wt", c, c, &mut rng);
    Ok(p)
}
