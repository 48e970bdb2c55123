//! Supervised training of the matcher on a synthetic dataset, plus the
//! match-and-estimate path shared by evaluation and the command-line tools.
//!
//! Preprocessing is done once and cached in memory: per scene the model
//! cloud, its keypoints and descriptors; per view the backprojected visible
//! cloud, its keypoints and descriptors, and mutual-nearest ground-truth
//! pairs. Each optimization step rebuilds only the parameter-dependent part
//! of the graph (descriptor MLP, attention blocks, confidence head).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{
    subsample, voxel_downsample, CorrespondenceSet, PointCloud, Real, RigidTransform, Vec3,
};
use crate::recovery::backproject;
use crate::synth::{load_sample, load_scene_mesh, mix_seed, open_dataset, scene_splits};
use crate::tape::{
    read_checkpoint, write_checkpoint, Adam, Checkpoint, Optimizer, ParamSet, Sgd, Tape, Var,
};

use super::encoder::{encode, encoder_ffn, local_descriptors, select_keypoints, FeatureCloud};
use super::estimate::{estimate_pose, Estimator};
use super::fdt::{
    confidence_on_tape, fdt_forward, fdt_on_tape, match_confidence, select_correspondences,
    top_k_correspondences, ConfidenceMatrix,
};
use super::loss::{focal_loss_op, gt_correspondences, gt_matrix, transfer_loss_op};
use super::rotary::rotary_tables;
use super::{init_matcher_params, MatcherConfig};

/// Success thresholds used for validation: pose recall at 10 mm RMSE and
/// correspondence inliers at 10 mm.
const VAL_RHO: Real = 0.01;
const VAL_TAU1: Real = 0.01;

pub const EPOCH_CSV_HEADER: &str =
    "epoch,loss,loss_corr,loss_tran,val_rr,val_ir,tran_skipped,seconds";

/// Training hyperparameters. `stop_at_rr`/`stop_at_ir` above 1.0 disable
/// early stopping (recall and inlier ratio never exceed 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: Real,
    pub momentum: Real,
    pub batch_size: usize,
    /// "sgd" or "adam".
    pub optimizer: String,
    pub seed: u64,
    pub lambda_corr: Real,
    pub lambda_tran: Real,
    /// Mutual-nearest-neighbor radius for ground-truth pairs, meters.
    pub r_gt: Real,
    /// Grid spacing applied to backprojected target clouds, meters.
    pub target_voxel: Real,
    /// Point budget per cloud before keypoint selection.
    pub n_points: usize,
    /// Confidence entries feeding the differentiable pose during training.
    pub pose_pairs: usize,
    /// Validation views per epoch; 0 = the whole validation split.
    pub val_cap: usize,
    pub stop_at_rr: Real,
    pub stop_at_ir: Real,
    pub matcher: MatcherConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            lr: 1e-4,
            momentum: 0.9,
            batch_size: 2,
            optimizer: "sgd".to_string(),
            seed: 0,
            lambda_corr: 1.0,
            lambda_tran: 1.0,
            r_gt: 0.003,
            target_voxel: 0.001,
            n_points: 8192,
            pose_pairs: 64,
            val_cap: 64,
            stop_at_rr: 2.0,
            stop_at_ir: 2.0,
            matcher: MatcherConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.matcher.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if !(self.lr > 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid("bad learning rate or momentum"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.optimizer != "sgd" && self.optimizer != "adam" {
            return Err(Error::invalid(format!(
                "unknown optimizer '{}'",
                self.optimizer
            )));
        }
        if !(self.r_gt > 0.0) || !(self.target_voxel > 0.0) {
            return Err(Error::invalid("radii and voxel sizes must be positive"));
        }
        if self.n_points < 64 || self.pose_pairs < 3 {
            return Err(Error::invalid("point or pose-pair budget too small"));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the TOML serialization of the config; stamped into
/// checkpoints so resumed runs cannot silently change hyperparameters.
pub fn train_config_digest(cfg: &TrainConfig) -> Result<String> {
    let text = toml::to_string(cfg)
        .map_err(|e| Error::invalid(format!("config not serializable: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

struct PreparedScene {
    kps: PointCloud,
    desc: Array2<Real>,
}

struct PreparedView {
    scene_slot: usize,
    scene: usize,
    view: usize,
    kps: PointCloud,
    desc: Array2<Real>,
    gt_pairs: Vec<(usize, usize)>,
    pose: RigidTransform,
    /// (camera point, model point) pairs; kept only for validation views.
    gt_corr: Vec<(Vec3, Vec3)>,
}

struct Prepared {
    scenes: Vec<PreparedScene>,
    train_views: Vec<PreparedView>,
    val_views: Vec<PreparedView>,
    skipped_views: usize,
}

fn prepare_view_cloud(
    sample: &crate::synth::LoadedSample,
    cfg: &TrainConfig,
) -> Result<(PointCloud, Array2<Real>)> {
    let (raw, _) = backproject(&sample.depth, &sample.mask, &sample.intrinsics)?;
    let gridded = voxel_downsample(&raw, cfg.target_voxel)?;
    let cloud = subsample(
        &gridded,
        cfg.n_points,
        mix_seed(cfg.seed, sample.scene as u64, 4000 + sample.view as u64),
    )?;
    if cloud.len() < 64 {
        return Err(Error::invalid(format!(
            "visible cloud too small: {} points",
            cloud.len()
        )));
    }
    let kpi = select_keypoints(&cloud, cfg.matcher.keypoint_voxel)?;
    if kpi.len() < 8 {
        return Err(Error::invalid(format!("only {} keypoints", kpi.len())));
    }
    let desc = local_descriptors(&cloud, &kpi, cfg.matcher.descriptor_radii())?;
    let kps = PointCloud::new(kpi.iter().map(|&i| cloud.points[i]).collect())?;
    Ok((kps, desc))
}

fn prepare(root: &Path, cfg: &TrainConfig) -> Result<Prepared> {
    let (index, locators) = open_dataset(root)?;
    let (train_scenes, val_scenes, _) = scene_splits(index.scenes);
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::invalid(format!(
            "{} scenes split into empty train or validation set",
            index.scenes
        )));
    }

    let mut scenes = Vec::new();
    let mut slot_of: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in train_scenes.iter().chain(val_scenes.iter()) {
        let mesh = load_scene_mesh(&index.root, s)?;
        let cloud = mesh.sample_surface(cfg.n_points, mix_seed(cfg.seed, s as u64, 11))?;
        let kpi = select_keypoints(&cloud, cfg.matcher.keypoint_voxel)?;
        if kpi.len() < 8 {
            return Err(Error::invalid(format!(
                "scene {s}: only {} model keypoints",
                kpi.len()
            )));
        }
        let desc = local_descriptors(&cloud, &kpi, cfg.matcher.descriptor_radii())?;
        let kps = PointCloud::new(kpi.iter().map(|&i| cloud.points[i]).collect())?;
        slot_of.insert(s, scenes.len());
        scenes.push(PreparedScene { kps, desc });
    }

    let mut train_views = Vec::new();
    let mut val_views = Vec::new();
    let mut skipped = 0usize;
    for loc in &locators {
        let Some(&slot) = slot_of.get(&loc.scene) else {
            continue; // held-out test scene
        };
        let sample = load_sample(loc)?;
        let (kps, desc) = match prepare_view_cloud(&sample, cfg) {
            Ok(pair) => pair,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let gt_pairs = gt_correspondences(&scenes[slot].kps, &kps, &sample.pose, cfg.r_gt)?;
        let is_val = val_scenes.contains(&loc.scene);
        let view = PreparedView {
            scene_slot: slot,
            scene: loc.scene,
            view: loc.view,
            kps,
            desc,
            gt_pairs,
            pose: sample.pose,
            gt_corr: if is_val { sample.gt_corr } else { Vec::new() },
        };
        if is_val {
            val_views.push(view);
        } else {
            train_views.push(view);
        }
    }
    if train_views.is_empty() {
        return Err(Error::invalid("no usable training views after filtering"));
    }
    if val_views.is_empty() {
        return Err(Error::invalid("no usable validation views after filtering"));
    }
    Ok(Prepared {
        scenes,
        train_views,
        val_views,
        skipped_views: skipped,
    })
}

/// Indices of the `k` largest entries, ordered by value descending.
fn top_entries(values: &Array2<Real>, k: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize, Real)> = values
        .indexed_iter()
        .map(|((i, j), &v)| (i, j, v))
        .collect();
    let cmp = |a: &(usize, usize, Real), b: &(usize, usize, Real)| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    };
    let k = k.min(all.len());
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all.into_iter().map(|(i, j, _)| (i, j)).collect()
}

struct SampleLoss {
    total: Var,
    corr_value: Real,
    tran_value: Real,
    tran_skipped: bool,
}

fn sample_loss(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &TrainConfig,
    scene: &PreparedScene,
    view: &PreparedView,
) -> Result<SampleLoss> {
    let m = &cfg.matcher;
    let src_rot = rotary_tables(&scene.kps.points, m.c)?;
    let tgt_rot = rotary_tables(&view.kps.points, m.c)?;
    let sd = tape.leaf(scene.desc.clone());
    let td = tape.leaf(view.desc.clone());
    let fs0 = encoder_ffn(tape, params, sd);
    let ft0 = encoder_ffn(tape, params, td);
    let (fs, ft) = fdt_on_tape(tape, params, m, fs0, &src_rot, ft0, &tgt_rot);
    let g = confidence_on_tape(tape, params, m, fs, ft);

    let gt = gt_matrix(&view.gt_pairs, scene.kps.len(), view.kps.len())?;
    let l_corr = focal_loss_op(tape, g, gt);
    let corr_value = tape.value(l_corr)[(0, 0)];

    // The pose loss always reads the current best-confidence entries; the
    // selection itself is outside the gradient.
    let pose_pairs = top_entries(tape.value(g), cfg.pose_pairs);
    let tran = transfer_loss_op(tape, g, &pose_pairs, &scene.kps, &view.kps, &scene.kps, &view.pose);
    let (total, tran_value, tran_skipped) = match tran {
        Ok(l_tran) => {
            let tv = tape.value(l_tran)[(0, 0)];
            let a = tape.scale(l_corr, cfg.lambda_corr);
            let b = tape.scale(l_tran, cfg.lambda_tran);
            (tape.add(a, b), tv, false)
        }
        Err(Error::Degenerate(_)) | Err(Error::InsufficientMatches(_)) => {
            (tape.scale(l_corr, cfg.lambda_corr), 0.0, true)
        }
        Err(e) => return Err(e),
    };
    Ok(SampleLoss {
        total,
        corr_value,
        tran_value,
        tran_skipped,
    })
}

fn features_from_desc(params: &ParamSet, desc: &Array2<Real>) -> Array2<Real> {
    let mut tape = Tape::new();
    let d = tape.leaf(desc.clone());
    let f = encoder_ffn(&mut tape, params, d);
    tape.value(f).clone()
}

/// Match a validation view and score it: did WSVD on the selected pairs land
/// within `VAL_RHO` RMSE of the stored surface correspondences, and what
/// fraction of selected pairs are inliers under the reference pose?
fn validate_view(
    params: &ParamSet,
    m: &MatcherConfig,
    scene: &PreparedScene,
    view: &PreparedView,
) -> Result<(bool, Real)> {
    let src = FeatureCloud {
        keypoints: scene.kps.clone(),
        features: features_from_desc(params, &scene.desc),
    };
    let tgt = FeatureCloud {
        keypoints: view.kps.clone(),
        features: features_from_desc(params, &view.desc),
    };
    let (fs, ft) = fdt_forward(&src, &tgt, params, m)?;
    let g = match_confidence(&fs, &ft, params, m)?;
    let corr = match select_correspondences(&g, m.eta, m.topk) {
        Ok(c) => c,
        Err(Error::InsufficientMatches(_)) => top_k_correspondences(&g, m.topk)?,
        Err(e) => return Err(e),
    };

    let inliers = corr
        .pairs
        .iter()
        .filter(|&&(i, j)| {
            (view.pose.apply(&scene.kps.points[i]) - view.kps.points[j]).norm() < VAL_TAU1
        })
        .count();
    let ir = inliers as Real / corr.len() as Real;

    let success = match estimate_pose(&scene.kps, &view.kps, &corr, Estimator::Wsvd, 0) {
        Ok(pose) => {
            let mse: Real = view
                .gt_corr
                .iter()
                .map(|(cam, model)| (pose.apply(model) - cam).norm_squared())
                .sum::<Real>()
                / view.gt_corr.len().max(1) as Real;
            mse.sqrt() < VAL_RHO
        }
        Err(_) => false,
    };
    Ok((success, ir))
}

fn validate(params: &ParamSet, cfg: &TrainConfig, prepared: &Prepared) -> Result<(Real, Real)> {
    let cap = if cfg.val_cap == 0 {
        prepared.val_views.len()
    } else {
        cfg.val_cap.min(prepared.val_views.len())
    };
    let mut successes = 0usize;
    let mut ir_sum = 0.0;
    for view in prepared.val_views.iter().take(cap) {
        let (ok, ir) = validate_view(
            params,
            &cfg.matcher,
            &prepared.scenes[view.scene_slot],
            view,
        )?;
        successes += ok as usize;
        ir_sum += ir;
    }
    Ok((
        successes as Real / cap as Real,
        ir_sum / cap as Real,
    ))
}

fn build_optimizer(cfg: &TrainConfig) -> Result<Box<dyn Optimizer>> {
    match cfg.optimizer.as_str() {
        "sgd" => Ok(Box::new(Sgd::new(cfg.lr, cfg.momentum))),
        "adam" => Ok(Box::new(Adam::new(cfg.lr))),
        other => Err(Error::invalid(format!("unknown optimizer '{other}'"))),
    }
}

fn model_params_only(full: &ParamSet) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, arr) in full.iter() {
        if !name.starts_with("opt.") {
            p.insert(name, arr.clone());
        }
    }
    p
}

/// Outcome of a training run (possibly resumed).
#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Epochs executed by this call.
    pub epochs_run: usize,
    /// Mean training loss per executed epoch.
    pub epoch_losses: Vec<Real>,
    pub val_rrs: Vec<Real>,
    pub val_irs: Vec<Real>,
    pub best_epoch: usize,
    pub best_val_rr: Real,
    pub best_val_ir: Real,
    /// Parameters at the best validation recall.
    pub params: ParamSet,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub csv_path: PathBuf,
    pub skipped_views: usize,
    pub stopped_early: bool,
}

/// Trains the matcher on the dataset at `root`, writing per-epoch metrics,
/// a best-validation checkpoint, and a resumable last checkpoint to
/// `out_dir`. A partial run restarts from `last.ckpt` as long as the config
/// digest matches.
pub fn train_rigid(root: &Path, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let digest = train_config_digest(cfg)?;
    let matcher_toml = toml::to_string(&cfg.matcher)
        .map_err(|e| Error::invalid(format!("matcher config not serializable: {e}")))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let csv_path = out_dir.join("epochs.csv");

    let prepared = prepare(root, cfg)?;

    let mut optimizer = build_optimizer(cfg)?;
    let (mut params, start_epoch) = if last_path.is_file() {
        let ckpt = read_checkpoint(&last_path)?;
        if ckpt.config_digest != digest {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint {} was trained with a different config (digest {} vs {})",
                last_path.display(),
                ckpt.config_digest,
                digest
            )));
        }
        optimizer.import_state(&ckpt.params, "opt");
        let next = ckpt
            .meta_value("next_epoch")
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(0);
        (model_params_only(&ckpt.params), next)
    } else {
        (init_matcher_params(&cfg.matcher)?, 0)
    };

    let mut best_val_rr = if best_path.is_file() {
        read_checkpoint(&best_path)?
            .meta_value("val_rr")
            .and_then(|s| s.parse::<Real>().ok())
            .unwrap_or(-1.0)
    } else {
        -1.0
    };
    let mut best_val_ir = -1.0;
    let mut best_epoch = start_epoch;
    let mut best_params = params.clone();

    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    let csv_empty = csv
        .metadata()
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    if csv_empty {
        writeln!(csv, "{EPOCH_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    }

    let mut summary = TrainSummary {
        epochs_run: 0,
        epoch_losses: Vec::new(),
        val_rrs: Vec::new(),
        val_irs: Vec::new(),
        best_epoch,
        best_val_rr: best_val_rr.max(0.0),
        best_val_ir: 0.0,
        params: params.clone(),
        best_checkpoint: best_path.clone(),
        last_checkpoint: last_path.clone(),
        csv_path: csv_path.clone(),
        skipped_views: prepared.skipped_views,
        stopped_early: false,
    };

    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..prepared.train_views.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 7777, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut corr_sum = 0.0;
        let mut tran_sum = 0.0;
        let mut tran_skipped = 0usize;
        let mut seen = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut sample_vars = Vec::with_capacity(batch.len());
            for &vi in batch {
                let view = &prepared.train_views[vi];
                let scene = &prepared.scenes[view.scene_slot];
                let s = sample_loss(&mut tape, &params, cfg, scene, view)?;
                let total_value = tape.value(s.total)[(0, 0)];
                if !total_value.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite loss at epoch {} on scene {} view {}: corr {}, tran {}",
                        epoch + 1,
                        view.scene,
                        view.view,
                        s.corr_value,
                        s.tran_value
                    )));
                }
                loss_sum += total_value;
                corr_sum += s.corr_value;
                tran_sum += s.tran_value;
                tran_skipped += s.tran_skipped as usize;
                seen += 1;
                sample_vars.push(s.total);
            }
            let mut acc = sample_vars[0];
            for &v in &sample_vars[1..] {
                acc = tape.add(acc, v);
            }
            let batch_loss = tape.scale(acc, 1.0 / batch.len() as Real);
            let grads = tape.backward(batch_loss);
            optimizer.step(&mut params, &grads);
        }

        let (val_rr, val_ir) = validate(&params, cfg, &prepared)?;
        let mean_loss = loss_sum / seen as Real;
        summary.epoch_losses.push(mean_loss);
        summary.val_rrs.push(val_rr);
        summary.val_irs.push(val_ir);
        summary.epochs_run += 1;

        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.4},{:.4},{},{:.1}",
            epoch + 1,
            mean_loss,
            corr_sum / seen as Real,
            tran_sum / seen as Real,
            val_rr,
            val_ir,
            tran_skipped,
            started.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&csv_path, e))?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;

        if val_rr > best_val_rr {
            best_val_rr = val_rr;
            best_val_ir = val_ir;
            best_epoch = epoch + 1;
            best_params = params.clone();
            let mut ckpt = Checkpoint {
                config_digest: digest.clone(),
                meta: Vec::new(),
                params: best_params.clone(),
            };
            ckpt.set_meta("kind", "rigid");
            ckpt.set_meta("epoch", &format!("{}", epoch + 1));
            ckpt.set_meta("val_rr", &format!("{val_rr:.6}"));
            ckpt.set_meta("val_ir", &format!("{val_ir:.6}"));
            ckpt.set_meta("matcher", &matcher_toml);
            write_checkpoint(&best_path, &ckpt)?;
        }

        let mut resumable = params.clone();
        optimizer.export_state(&mut resumable, "opt");
        let mut last = Checkpoint {
            config_digest: digest.clone(),
            meta: Vec::new(),
            params: resumable,
        };
        last.set_meta("kind", "rigid-resume");
        last.set_meta("next_epoch", &format!("{}", epoch + 1));
        write_checkpoint(&last_path, &last)?;

        if val_rr >= cfg.stop_at_rr && val_ir >= cfg.stop_at_ir {
            summary.stopped_early = true;
            break;
        }
    }

    summary.best_epoch = best_epoch;
    summary.best_val_rr = best_val_rr.max(0.0);
    summary.best_val_ir = best_val_ir.max(0.0);
    summary.params = best_params;
    Ok(summary)
}

/// Diagnostics from the full matching path.
#[derive(Debug, Clone)]
pub struct MatchDiagnostics {
    pub src_keypoints: PointCloud,
    pub tgt_keypoints: PointCloud,
    pub confidence: ConfidenceMatrix,
    /// True when no entry cleared the confidence threshold and the top-k
    /// fallback supplied the correspondences instead.
    pub used_fallback: bool,
}

/// Encodes both clouds, runs the matcher, selects correspondences (falling
/// back to the unthresholded top-k when nothing clears the threshold), and
/// estimates the rigid pose.
pub fn match_and_estimate(
    src: &PointCloud,
    tgt: &PointCloud,
    params: &ParamSet,
    cfg: &MatcherConfig,
    estimator: Estimator,
    seed: u64,
) -> Result<(RigidTransform, CorrespondenceSet, MatchDiagnostics)> {
    let src_fc = encode(src, params, cfg)?;
    let tgt_fc = encode(tgt, params, cfg)?;
    let (fs, ft) = fdt_forward(&src_fc, &tgt_fc, params, cfg)?;
    let g = match_confidence(&fs, &ft, params, cfg)?;
    let (corr, used_fallback) = match select_correspondences(&g, cfg.eta, cfg.topk) {
        Ok(c) => (c, false),
        Err(Error::InsufficientMatches(_)) => (top_k_correspondences(&g, cfg.topk)?, true),
        Err(e) => return Err(e),
    };
    let pose = estimate_pose(&src_fc.keypoints, &tgt_fc.keypoints, &corr, estimator, seed)?;
    Ok((
        pose,
        corr,
        MatchDiagnostics {
            src_keypoints: src_fc.keypoints,
            tgt_keypoints: tgt_fc.keypoints,
            confidence: g,
            used_fallback,
        },
    ))
}
