//! Single-pair registration: masked depth in, pose + warped mesh + overlay
//! out. This is the inference path — it never sees a ground-truth transform,
//! so the quality report only contains quantities observable from the inputs
//! themselves (match counts, chamfer against the recovered cloud, silhouette
//! agreement with the provided mask).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{chamfer, CameraIntrinsics, PointCloud, Real, RigidTransform, TriMesh};
use crate::io::{
    read_depth_text, read_pbm, read_pgm16, read_ply_mesh, write_ply_mesh, write_transform_kv,
    KeyValues,
};
use crate::metrics::dice2d;
use crate::nonrigid::{
    compute_gate, fit_pyramid, level_trace_csv, FitConfig, FitReport, SimilarityGate,
};
use crate::recovery::{scale_consistent_recover, BinaryMask, DepthMap, RecoveryReport};
use crate::render::{overlay_image, render, write_png, RenderConfig, RenderOutput};
use crate::rigid::{match_and_estimate, MatchDiagnostics, MatcherConfig};
use crate::tape::{read_checkpoint, Checkpoint, ParamSet};

use super::estimator_from_str;

/// Inference-time knobs for one registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    /// Pose estimator: "wsvd", "ransac50k", or "lgr".
    pub estimator: String,
    /// Seed for the estimator and for surface sampling.
    pub seed: u64,
    /// When false the pose is final and no deformation is fitted.
    pub nonrigid: bool,
    /// Surface points sampled from the preoperative mesh as the deformation
    /// fitting source.
    pub surface_samples: usize,
    pub fit: FitConfig,
    pub render: RenderConfig,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        RegisterConfig {
            estimator: "lgr".into(),
            seed: 99,
            nonrigid: true,
            surface_samples: 1024,
            fit: FitConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl RegisterConfig {
    pub fn validate(&self) -> Result<()> {
        estimator_from_str(&self.estimator)?;
        if self.surface_samples < 8 {
            return Err(Error::invalid("surface_samples must be at least 8"));
        }
        self.fit.validate()?;
        Ok(())
    }
}

/// File inputs for [`cmd_register`].
#[derive(Debug, Clone)]
pub struct RegisterInputs {
    pub preop: PathBuf,
    pub depth: PathBuf,
    pub mask: PathBuf,
    pub intrinsics: PathBuf,
    pub ckpt: PathBuf,
    pub gate_ckpt: Option<PathBuf>,
    pub out: PathBuf,
}

/// Ground-truth-free quality report for one registration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterQuality {
    /// Pixels that survived masking and depth validity.
    pub recovered_points: usize,
    /// Correspondences fed to the pose estimator.
    pub matches: usize,
    /// Mean confidence of the selected correspondences.
    pub mean_confidence: Real,
    /// True when no pair cleared the confidence threshold and the
    /// unthresholded top-k fallback supplied the set.
    pub used_fallback: bool,
    /// Squared bidirectional chamfer of the rigidly posed samples against the
    /// recovered cloud.
    pub rigid_chamfer: Real,
    /// Same quantity after deformation (equals `rigid_chamfer` when the
    /// non-rigid stage is disabled or clamped).
    pub final_chamfer: Real,
    /// True when no warp beat the rigid placement.
    pub clamped_to_rigid: bool,
    /// Dice between the warped mesh's hard silhouette and the input mask.
    pub silhouette_dice: Real,
}

/// Everything [`register_pair`] produces in memory.
#[derive(Debug)]
pub struct RegisterOutcome {
    pub pose: RigidTransform,
    pub warped_mesh: TriMesh,
    pub view_cloud: PointCloud,
    pub recovery: RecoveryReport,
    pub diagnostics: MatchDiagnostics,
    pub fit_report: Option<FitReport>,
    pub render: RenderOutput,
    pub quality: RegisterQuality,
}

/// Reads `fx/fy/cx/cy/width/height` from a key-value text file.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let kv = KeyValues::read(path)?;
    CameraIntrinsics::new(
        kv.get_real("fx")?,
        kv.get_real("fy")?,
        kv.get_real("cx")?,
        kv.get_real("cy")?,
        kv.get_usize("width")?,
        kv.get_usize("height")?,
    )
}

fn read_depth_any(path: &Path) -> Result<DepthMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm16(path),
        _ => read_depth_text(path),
    }
}

/// Checks that a checkpoint is of the expected kind, guarding against e.g. a
/// resume or gate checkpoint passed where matcher weights are expected.
fn expect_kind(ckpt: &Checkpoint, path: &Path, want: &str) -> Result<()> {
    match ckpt.meta_value("kind") {
        Some(kind) if kind == want => Ok(()),
        Some(kind) => Err(Error::ArtifactMismatch(format!(
            "{path:?} is a '{kind}' checkpoint, expected '{want}'"
        ))),
        None => Err(Error::ArtifactMismatch(format!(
            "{path:?} carries no checkpoint kind marker"
        ))),
    }
}

/// Matcher architecture recorded in the checkpoint, falling back to the
/// stock architecture when absent.
pub(crate) fn matcher_from_ckpt(ckpt: &Checkpoint, path: &Path) -> Result<MatcherConfig> {
    match ckpt.meta_value("matcher") {
        Some(text) => toml::from_str(text).map_err(|e| Error::parse(path, e.to_string())),
        None => Ok(MatcherConfig::default()),
    }
}

fn gate_for(
    source: &PointCloud,
    target: &PointCloud,
    gate_params: Option<&ParamSet>,
) -> Result<Option<SimilarityGate>> {
    match gate_params {
        Some(p) => Ok(Some(compute_gate(source, target, p)?)),
        None => Ok(None),
    }
}

/// Grayscale rendering of the observed depth, used as the overlay backdrop.
fn depth_backdrop(depth: &DepthMap) -> image::RgbImage {
    let mut lo = Real::INFINITY;
    let mut hi = Real::NEG_INFINITY;
    for r in 0..depth.height {
        for c in 0..depth.width {
            if depth.is_valid(r, c) {
                lo = lo.min(depth.at(r, c));
                hi = hi.max(depth.at(r, c));
            }
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::RgbImage::new(depth.width as u32, depth.height as u32);
    for r in 0..depth.height {
        for c in 0..depth.width {
            let g = if depth.is_valid(r, c) {
                // Near surfaces render bright so the organ stands out.
                (230.0 - 180.0 * (depth.at(r, c) - lo) / span) as u8
            } else {
                16
            };
            img.put_pixel(c as u32, r as u32, image::Rgb([g, g, g]));
        }
    }
    img
}

fn hard_silhouette(out: &RenderOutput) -> Result<BinaryMask> {
    BinaryMask::new(
        out.width,
        out.height,
        out.silhouette.iter().map(|&s| s > 0.5).collect(),
    )
}

/// Full inference on already-loaded inputs. `matcher_params` are the frozen
/// phase-1 weights; `gate_params`, when given, gate the deformation.
pub fn register_pair(
    mesh: &TriMesh,
    depth: &DepthMap,
    mask: &BinaryMask,
    k: &CameraIntrinsics,
    matcher_params: &ParamSet,
    matcher: &MatcherConfig,
    gate_params: Option<&ParamSet>,
    cfg: &RegisterConfig,
) -> Result<RegisterOutcome> {
    cfg.validate()?;
    let model_cloud = mesh.vertex_cloud();
    let (view_cloud, recovery) = scale_consistent_recover(&model_cloud, depth, mask, k)?;

    let estimator = estimator_from_str(&cfg.estimator)?;
    let (pose, corr, diagnostics) = match_and_estimate(
        &model_cloud,
        &view_cloud,
        matcher_params,
        matcher,
        estimator,
        cfg.seed,
    )?;

    let posed_mesh = mesh.apply_transform(&pose);
    let fit_source = mesh
        .sample_surface(cfg.surface_samples, cfg.seed)?
        .apply_transform(&pose);
    let rigid_chamfer = chamfer(&fit_source, &view_cloud)?;

    let mut warped_mesh = posed_mesh.clone();
    let mut fit_report = None;
    let mut final_chamfer = rigid_chamfer;
    let mut clamped = true;
    if cfg.nonrigid {
        let gate = gate_for(&fit_source, &view_cloud, gate_params)?;
        let fit = fit_pyramid(&fit_source, &view_cloud, gate.as_ref(), &cfg.fit)?;
        final_chamfer = fit.report.final_chamfer;
        clamped = fit.report.clamped_to_rigid;
        if !fit.report.clamped_to_rigid {
            let posed_verts = posed_mesh.vertex_cloud();
            let warped_verts = match gate_params {
                // The fitted gate is per-source-sample; mesh vertices need
                // their own gate values from the same parameters.
                Some(p) => {
                    let vert_gate = compute_gate(&posed_verts, &view_cloud, p)?;
                    fit.pyramid.apply_gated(&posed_verts, &vert_gate)?
                }
                None => fit.pyramid.apply(&posed_verts)?,
            };
            warped_mesh = TriMesh::new(warped_verts.points, posed_mesh.faces.clone())?;
        }
        fit_report = Some(fit.report);
    }

    let render_out = render(&warped_mesh, k, &cfg.render)?;
    let silhouette_dice = dice2d(&hard_silhouette(&render_out)?, mask)?;

    let mean_confidence = if corr.weights.is_empty() {
        0.0
    } else {
        corr.weights.iter().sum::<Real>() / corr.weights.len() as Real
    };
    let quality = RegisterQuality {
        recovered_points: view_cloud.len(),
        matches: corr.len(),
        mean_confidence,
        used_fallback: diagnostics.used_fallback,
        rigid_chamfer,
        final_chamfer,
        clamped_to_rigid: clamped,
        silhouette_dice,
    };
    Ok(RegisterOutcome {
        pose,
        warped_mesh,
        view_cloud,
        recovery,
        diagnostics,
        fit_report,
        render: render_out,
        quality,
    })
}

/// Loads the file inputs, runs [`register_pair`], and writes all artifacts
/// (pose, warped mesh, overlay, quality report, level trace) into `out`.
pub fn cmd_register(inputs: &RegisterInputs, cfg: &RegisterConfig) -> Result<RegisterOutcome> {
    cfg.validate()?;
    let mesh = read_ply_mesh(&inputs.preop)?;
    let depth = read_depth_any(&inputs.depth)?;
    let mask = read_pbm(&inputs.mask)?;
    let k = read_intrinsics(&inputs.intrinsics)?;

    let ckpt = read_checkpoint(&inputs.ckpt)?;
    expect_kind(&ckpt, &inputs.ckpt, "rigid")?;
    let matcher = matcher_from_ckpt(&ckpt, &inputs.ckpt)?;
    let gate_ckpt = match &inputs.gate_ckpt {
        Some(path) => {
            let g = read_checkpoint(path)?;
            expect_kind(&g, path, "selfsup")?;
            Some(g)
        }
        None => None,
    };

    let outcome = register_pair(
        &mesh,
        &depth,
        &mask,
        &k,
        &ckpt.params,
        &matcher,
        gate_ckpt.as_ref().map(|g| &g.params),
        cfg,
    )?;

    let out = &inputs.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_transform_kv(&out.join("pose.txt"), &outcome.pose)?;
    write_ply_mesh(&out.join("warped.ply"), &outcome.warped_mesh)?;
    let (overlay, _clipped) = overlay_image(&depth_backdrop(&depth), &outcome.warped_mesh, &k)?;
    write_png(&out.join("overlay.png"), &overlay)?;
    if let Some(report) = &outcome.fit_report {
        crate::io::write_bytes(
            &out.join("level_trace.csv"),
            level_trace_csv(&report.levels).as_bytes(),
        )?;
    }
    let quality_text = toml::to_string(&outcome.quality)
        .map_err(|e| Error::invalid(format!("quality report not serializable: {e}")))?;
    crate::io::write_bytes(&out.join("quality.toml"), quality_text.as_bytes())?;

    let mut stamp = KeyValues::new();
    stamp.push("stage", "register");
    stamp.push("ckpt_digest", &ckpt.params.digest());
    if let Some(g) = &gate_ckpt {
        stamp.push("gate_digest", &g.params.digest());
    }
    stamp.write(&out.join("run.txt"))?;
    Ok(outcome)
}
