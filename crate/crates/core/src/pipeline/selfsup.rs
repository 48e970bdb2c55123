//! Phase-2 self-supervised training of the similarity gate. The matcher
//! stays frozen — its checkpoint file is hashed before and after and any
//! change aborts the run — while the gate parameters learn from rendering
//! losses: each step fits a deformation pyramid under the current gate, then
//! backpropagates silhouette/mask/geometry losses through the gated blend
//! into the gate network alone.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, PointCloud, Real, TriMesh};
use crate::nonrigid::{compute_gate, fit_pyramid, gate_on_tape, init_gate_params, FitConfig, GateConfig};
use crate::recovery::{scale_consistent_recover, BinaryMask};
use crate::render::{render, render_op, total_loss, total_loss_op, LossWeights, RenderConfig};
use crate::rigid::{match_and_estimate, MatcherConfig};
use crate::synth::{load_sample, load_scene_mesh, open_dataset, scene_splits};
use crate::tape::{read_checkpoint, write_checkpoint, Adam, Checkpoint, Optimizer, ParamSet, Tape};

use super::estimator_from_str;

/// Hyperparameters of the self-supervised phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfsupConfig {
    pub epochs: usize,
    pub lr: Real,
    /// Samples whose losses are averaged on one tape before each step.
    pub batch: usize,
    pub seed: u64,
    /// Estimator used when precomputing the frozen rigid poses.
    pub estimator: String,
    /// Surface points sampled per scene mesh as the deformation source.
    pub surface_samples: usize,
    /// Cap on training/validation scenes (0 = use the whole split).
    pub max_scenes: usize,
    /// Cap on views per scene (0 = all).
    pub max_views: usize,
    pub gate: GateConfig,
    pub fit: FitConfig,
    pub render: RenderConfig,
    pub weights: LossWeights,
}

impl Default for SelfsupConfig {
    fn default() -> Self {
        SelfsupConfig {
            epochs: 80,
            lr: 1e-4,
            batch: 2,
            seed: 31,
            estimator: "lgr".into(),
            surface_samples: 512,
            max_scenes: 0,
            max_views: 0,
            gate: GateConfig::default(),
            fit: FitConfig::default(),
            render: RenderConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl SelfsupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("phase 2 needs at least one epoch"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.surface_samples < 8 {
            return Err(Error::invalid("surface_samples must be at least 8"));
        }
        estimator_from_str(&self.estimator)?;
        self.gate.validate()?;
        self.fit.validate()?;
        self.weights.validate()?;
        Ok(())
    }
}

/// Hex SHA-256 of the TOML form of the phase-2 config.
pub fn selfsup_config_digest(cfg: &SelfsupConfig) -> Result<String> {
    let text =
        toml::to_string(cfg).map_err(|e| Error::invalid(format!("config not serializable: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub const SELF_EPOCH_CSV_HEADER: &str = "epoch,train_loss,post_loss,val_loss,seconds";

/// Outcome of a phase-2 run (possibly resumed).
#[derive(Debug)]
pub struct SelfsupSummary {
    pub epochs_run: usize,
    /// Render loss over the training set with the starting gate, measured by
    /// the same procedure as the per-epoch evaluations.
    pub initial_loss: Real,
    /// Mean optimization loss per executed epoch.
    pub epoch_losses: Vec<Real>,
    /// Post-epoch evaluation over the training set.
    pub post_losses: Vec<Real>,
    /// Post-epoch evaluation over the validation scenes.
    pub val_losses: Vec<Real>,
    pub best_epoch: usize,
    pub best_val_loss: Real,
    /// SHA-256 of the frozen matcher checkpoint file before/after training;
    /// the run fails if they differ.
    pub rigid_digest_before: String,
    pub rigid_digest_after: String,
    /// Samples dropped because the frozen matcher could not pose them.
    pub skipped_samples: usize,
    pub gate_params: ParamSet,
}

/// One training sample with everything the phase-2 step needs, posed once by
/// the frozen matcher.
struct PosedSample {
    fit_source: PointCloud,
    view_cloud: PointCloud,
    posed_verts: PointCloud,
    posed_rows: Array2<Real>,
    faces: Vec<[u32; 3]>,
    mask: BinaryMask,
    k: CameraIntrinsics,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn cloud_rows(cloud: &PointCloud) -> Array2<Real> {
    let mut m = Array2::zeros((cloud.len(), 3));
    for (i, p) in cloud.points.iter().enumerate() {
        m[(i, 0)] = p.x;
        m[(i, 1)] = p.y;
        m[(i, 2)] = p.z;
    }
    m
}

fn capped<'a>(scenes: &'a [usize], cap: usize) -> &'a [usize] {
    if cap == 0 || cap >= scenes.len() {
        scenes
    } else {
        &scenes[..cap]
    }
}

/// Loads and poses every usable sample of the given scenes with the frozen
/// matcher. Samples the matcher cannot pose are skipped and counted.
fn prepare_samples(
    root: &Path,
    scenes: &[usize],
    views_per_scene: usize,
    matcher_params: &ParamSet,
    matcher: &MatcherConfig,
    cfg: &SelfsupConfig,
) -> Result<(Vec<PosedSample>, usize)> {
    let estimator = estimator_from_str(&cfg.estimator)?;
    let views = if cfg.max_views == 0 {
        views_per_scene
    } else {
        cfg.max_views.min(views_per_scene)
    };
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for &scene in scenes {
        let mesh = load_scene_mesh(root, scene)?;
        let model_cloud = mesh.vertex_cloud();
        let surface = mesh.sample_surface(cfg.surface_samples, cfg.seed ^ (scene as u64))?;
        for view in 0..views {
            let loc = crate::synth::SampleLocator {
                scene,
                view,
                dir: crate::synth::view_dir(root, scene, view),
            };
            let sample = load_sample(&loc)?;
            let (view_cloud, _) = match scale_consistent_recover(
                &model_cloud,
                &sample.depth,
                &sample.mask,
                &sample.intrinsics,
            ) {
                Ok(v) => v,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let posed = match match_and_estimate(
                &model_cloud,
                &view_cloud,
                matcher_params,
                matcher,
                estimator,
                cfg.seed ^ ((scene * 1009 + view) as u64),
            ) {
                Ok((pose, _, _)) => pose,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let posed_mesh = mesh.apply_transform(&posed);
            let posed_verts = posed_mesh.vertex_cloud();
            out.push(PosedSample {
                fit_source: surface.apply_transform(&posed),
                view_cloud,
                posed_rows: cloud_rows(&posed_verts),
                posed_verts,
                faces: posed_mesh.faces.clone(),
                mask: sample.mask,
                k: sample.intrinsics,
            });
        }
    }
    Ok((out, skipped))
}

/// Fits a pyramid under the current gate and returns the ungated warp of the
/// mesh vertices next to their rigid placement. A fit that failed to beat
/// the rigid placement contributes a zero delta.
fn warp_delta(sample: &PosedSample, gate_params: &ParamSet, cfg: &SelfsupConfig) -> Result<Array2<Real>> {
    let gate = compute_gate(&sample.fit_source, &sample.view_cloud, gate_params)?;
    let fit = fit_pyramid(&sample.fit_source, &sample.view_cloud, Some(&gate), &cfg.fit)?;
    if fit.report.clamped_to_rigid {
        return Ok(Array2::zeros(sample.posed_rows.dim()));
    }
    let warped = fit.pyramid.apply(&sample.posed_verts)?;
    Ok(cloud_rows(&warped) - &sample.posed_rows)
}

/// Render loss of one sample under the current gate, without a tape.
fn sample_loss(sample: &PosedSample, gate_params: &ParamSet, cfg: &SelfsupConfig) -> Result<Real> {
    let delta = warp_delta(sample, gate_params, cfg)?;
    let vert_gate = compute_gate(&sample.posed_verts, &sample.view_cloud, gate_params)?;
    let mut verts = Vec::with_capacity(sample.posed_verts.len());
    for (i, p) in sample.posed_verts.points.iter().enumerate() {
        let g = vert_gate.values[i];
        verts.push(crate::geom::Vec3::new(
            p.x + g * delta[(i, 0)],
            p.y + g * delta[(i, 1)],
            p.z + g * delta[(i, 2)],
        ));
    }
    let mesh = TriMesh::new(verts, sample.faces.clone())?;
    let out = render(&mesh, &sample.k, &cfg.render)?;
    total_loss(&out, &sample.mask, &sample.view_cloud, &cfg.weights, &sample.k)
}

fn eval_set(samples: &[PosedSample], gate_params: &ParamSet, cfg: &SelfsupConfig) -> Result<Real> {
    if samples.is_empty() {
        return Ok(Real::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(s, gate_params, cfg)?;
    }
    Ok(total / samples.len() as Real)
}

/// Adds one sample's gated render loss to the batch tape and returns its
/// loss variable. The gradient reaches the gate through the blend
/// `verts = rigid + g ⊙ (warp − rigid)`; the pyramid warp itself is held
/// constant within the step.
fn sample_loss_on_tape(
    tape: &mut Tape,
    sample: &PosedSample,
    gate_params: &ParamSet,
    cfg: &SelfsupConfig,
) -> Result<crate::tape::Var> {
    let delta_rows = warp_delta(sample, gate_params, cfg)?;
    let g = gate_on_tape(tape, gate_params, &sample.posed_verts, &sample.view_cloud)?;
    let posed = tape.leaf(sample.posed_rows.clone());
    let delta = tape.leaf(delta_rows);
    let gated = tape.mul_col(delta, g);
    let verts = tape.add(posed, gated);
    let (sil, depth) = render_op(tape, verts, &sample.faces, &sample.k, &cfg.render)?;
    total_loss_op(tape, sil, depth, &sample.mask, &sample.view_cloud, &cfg.weights, &sample.k)
}

/// Trains the similarity gate against rendering losses with the matcher
/// frozen. Resumes from `out_dir/last.ckpt` when present.
pub fn train_selfsup(
    root: &Path,
    rigid_ckpt_path: &Path,
    matcher_fallback: &MatcherConfig,
    cfg: &SelfsupConfig,
    out_dir: &Path,
) -> Result<SelfsupSummary> {
    cfg.validate()?;
    let digest = selfsup_config_digest(cfg)?;
    let rigid_digest_before = file_sha256(rigid_ckpt_path)?;
    let rigid_ckpt = read_checkpoint(rigid_ckpt_path)?;
    match rigid_ckpt.meta_value("kind") {
        Some("rigid") => {}
        other => {
            return Err(Error::ArtifactMismatch(format!(
                "{rigid_ckpt_path:?} is not a phase-1 checkpoint (kind {other:?})"
            )))
        }
    }
    let matcher: MatcherConfig = match rigid_ckpt.meta_value("matcher") {
        Some(text) => toml::from_str(text).map_err(|e| Error::parse(rigid_ckpt_path, e.to_string()))?,
        None => matcher_fallback.clone(),
    };

    let (index, _) = open_dataset(root)?;
    let (train_scenes, val_scenes, _) = scene_splits(index.scenes);
    let (train_samples, skipped_train) = prepare_samples(
        root,
        capped(&train_scenes, cfg.max_scenes),
        index.views_per_scene,
        &rigid_ckpt.params,
        &matcher,
        cfg,
    )?;
    let (val_samples, _) = prepare_samples(
        root,
        capped(&val_scenes, cfg.max_scenes),
        index.views_per_scene,
        &rigid_ckpt.params,
        &matcher,
        cfg,
    )?;
    if train_samples.is_empty() {
        return Err(Error::InsufficientMatches(
            "the frozen matcher posed no training sample".into(),
        ));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let csv_path = out_dir.join("epochs.csv");

    let mut optimizer = Adam::new(cfg.lr);
    let (mut gate_params, start_epoch) = if last_path.is_file() {
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
        let mut p = ParamSet::new();
        for (name, arr) in ckpt.params.iter() {
            if !name.starts_with("opt.") {
                p.insert(name, arr.clone());
            }
        }
        (p, next)
    } else {
        (init_gate_params(&cfg.gate)?, 0)
    };

    let mut best_val_loss = if best_path.is_file() {
        read_checkpoint(&best_path)?
            .meta_value("val_loss")
            .and_then(|s| s.parse::<Real>().ok())
            .unwrap_or(Real::INFINITY)
    } else {
        Real::INFINITY
    };
    let mut best_epoch = start_epoch;
    let mut best_params = gate_params.clone();

    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    let csv_empty = csv.metadata().map(|m| m.len() == 0).unwrap_or(true);
    if csv_empty {
        writeln!(csv, "{SELF_EPOCH_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    }

    let initial_loss = eval_set(&train_samples, &gate_params, cfg)?;

    let mut summary = SelfsupSummary {
        epochs_run: 0,
        initial_loss,
        epoch_losses: Vec::new(),
        post_losses: Vec::new(),
        val_losses: Vec::new(),
        best_epoch,
        best_val_loss,
        rigid_digest_before: rigid_digest_before.clone(),
        rigid_digest_after: String::new(),
        skipped_samples: skipped_train,
        gate_params: gate_params.clone(),
    };

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let mut acc: Option<crate::tape::Var> = None;
            for &i in chunk {
                let loss = sample_loss_on_tape(&mut tape, &train_samples[i], &gate_params, cfg)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, loss),
                    None => loss,
                });
            }
            let total = acc.expect("chunks are never empty");
            let batch_loss = tape.scale(total, 1.0 / chunk.len() as Real);
            let loss_v = tape.value(batch_loss)[(0, 0)];
            if !loss_v.is_finite() {
                return Err(Error::numerical("phase-2 loss became non-finite"));
            }
            let grads = tape.backward(batch_loss);
            optimizer.step(&mut gate_params, &grads);
            loss_sum += loss_v;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as Real;

        let post_loss = eval_set(&train_samples, &gate_params, cfg)?;
        let val_loss = eval_set(&val_samples, &gate_params, cfg)?;
        summary.epoch_losses.push(train_loss);
        summary.post_losses.push(post_loss);
        summary.val_losses.push(val_loss);
        summary.epochs_run += 1;

        writeln!(
            csv,
            "{},{:.9},{:.9},{:.9},{:.3}",
            epoch + 1,
            train_loss,
            post_loss,
            val_loss,
            started.elapsed().as_secs_f64()
        )
        .map_err(|e| Error::io(&csv_path, e))?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;

        // Scenes may be too few to carve out a validation split; fall back
        // to the training-set evaluation for model selection then.
        let selection = if val_loss.is_nan() { post_loss } else { val_loss };
        if selection < best_val_loss {
            best_val_loss = selection;
            best_epoch = epoch + 1;
            best_params = gate_params.clone();
            let mut ckpt = Checkpoint {
                config_digest: digest.clone(),
                meta: Vec::new(),
                params: best_params.clone(),
            };
            ckpt.set_meta("kind", "selfsup");
            ckpt.set_meta("epoch", &format!("{}", epoch + 1));
            ckpt.set_meta("val_loss", &format!("{best_val_loss:.9}"));
            ckpt.set_meta("rigid_ckpt_sha256", &rigid_digest_before);
            write_checkpoint(&best_path, &ckpt)?;
        }

        let mut resumable = gate_params.clone();
        optimizer.export_state(&mut resumable, "opt");
        let mut last = Checkpoint {
            config_digest: digest.clone(),
            meta: Vec::new(),
            params: resumable,
        };
        last.set_meta("kind", "selfsup-resume");
        last.set_meta("next_epoch", &format!("{}", epoch + 1));
        write_checkpoint(&last_path, &last)?;
    }

    summary.rigid_digest_after = file_sha256(rigid_ckpt_path)?;
    if summary.rigid_digest_after != rigid_digest_before {
        return Err(Error::ArtifactMismatch(
            "the frozen matcher checkpoint changed during phase 2".into(),
        ));
    }
    summary.best_epoch = best_epoch;
    summary.best_val_loss = best_val_loss;
    summary.gate_params = best_params;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_selfsup_config_is_valid() {
        SelfsupConfig::default().validate().unwrap();
    }

    #[test]
    fn config_digest_tracks_every_field() {
        let cfg = SelfsupConfig::default();
        let a = selfsup_config_digest(&cfg).unwrap();
        let mut other = cfg.clone();
        other.surface_samples += 1;
        assert_ne!(selfsup_config_digest(&other).unwrap(), a);
        assert_eq!(selfsup_config_digest(&cfg).unwrap(), a);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = SelfsupConfig::default();
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
        cfg.batch = 2;
        cfg.estimator = "nope".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scene_cap_keeps_a_prefix() {
        let scenes = vec![3, 5, 9, 11];
        assert_eq!(capped(&scenes, 0), &scenes[..]);
        assert_eq!(capped(&scenes, 2), &[3, 5]);
        assert_eq!(capped(&scenes, 9), &scenes[..]);
    }
}
