//! On-disk dataset generation and loading.
//!
//! Layout under the dataset root:
//!
//! ```text
//! dataset.txt                manifest (digest, seed, counts)
//! s000/mesh.ply              model-frame organ mesh, shared by its views
//! s000/v000/depth.pgm        16-bit scene depth with a meters-per-step scale
//! s000/v000/mask.pbm         organ visibility mask
//! s000/v000/pose.txt         ground-truth model-to-camera transform
//! s000/v000/meta.txt         intrinsics, overlap, deformation, digest
//! s000/v000/corr.txt         sampled (camera point, model point) pairs
//! ```
//!
//! Generation is a pure function of the configuration: every scene and view
//! draws from its own counter-derived random stream, so datasets are
//! bit-reproducible and any sample can be regenerated in isolation.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Real, RigidTransform, TriMesh, Vec3};
use crate::io::{
    read_pbm, read_pgm16, read_ply_mesh, read_transform, write_pbm, write_pgm16, write_ply_mesh,
    write_transform_kv, KeyValues,
};
use crate::recovery::{BinaryMask, DepthMap};

use super::deform::{BulgeParams, DeformParams};
use super::organ::gen_organ;
use super::scene::{default_intrinsics, synthesize_view, SynthConfig, ViewSample};

/// Full dataset recipe; the SHA-256 of its TOML form is the dataset digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scenes: usize,
    pub views_per_scene: usize,
    pub view: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 7,
            scenes: 40,
            views_per_scene: 60,
            view: SynthConfig::default(),
        }
    }
}

/// Hex SHA-256 of the TOML serialization of the config.
pub fn dataset_digest(cfg: &DatasetConfig) -> Result<String> {
    let text = toml::to_string(cfg)
        .map_err(|e| Error::invalid(format!("config not serializable: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Counter-derived sub-seed (splitmix64 finalizer over seed and two indices).
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn scene_dir(root: &Path, scene: usize) -> PathBuf {
    root.join(format!("s{scene:03}"))
}

pub fn view_dir(root: &Path, scene: usize, view: usize) -> PathBuf {
    scene_dir(root, scene).join(format!("v{view:03}"))
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub root: PathBuf,
    pub digest: String,
    pub scenes: usize,
    pub views_per_scene: usize,
}

fn write_corr(path: &Path, corr: &[(Vec3, Vec3)]) -> Result<()> {
    let mut out = String::with_capacity(corr.len() * 160 + 16);
    out.push_str(&format!("{}\n", corr.len()));
    for (cam, model) in corr {
        out.push_str(&format!(
            "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
            cam.x, cam.y, cam.z, model.x, model.y, model.z
        ));
    }
    crate::io::write_bytes(path, out.as_bytes())
}

fn read_corr(path: &Path) -> Result<Vec<(Vec3, Vec3)>> {
    let text = crate::io::read_to_string(path)?;
    let mut lines = text.lines();
    let count: usize = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty correspondence file"))?
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, "bad correspondence count"))?;
    let mut corr = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<Real> = line
            .split_whitespace()
            .map(|t| t.parse::<Real>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, format!("bad number on line {}", i + 2)))?;
        if vals.len() != 6 {
            return Err(Error::parse(path, format!("line {} needs 6 values", i + 2)));
        }
        corr.push((
            Vec3::new(vals[0], vals[1], vals[2]),
            Vec3::new(vals[3], vals[4], vals[5]),
        ));
    }
    if corr.len() != count {
        return Err(Error::parse(
            path,
            format!("expected {count} pairs, found {}", corr.len()),
        ));
    }
    Ok(corr)
}

fn meta_for(sample: &ViewSample, scene: usize, view: usize, digest: &str) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.push("scene", scene);
    kv.push("view", view);
    kv.push("config_digest", digest);
    let k = &sample.intrinsics;
    kv.push_real("fx", k.fx);
    kv.push_real("fy", k.fy);
    kv.push_real("cx", k.cx);
    kv.push_real("cy", k.cy);
    kv.push("width", k.width);
    kv.push("height", k.height);
    kv.push_real("overlap", sample.overlap);
    kv.push("occluder_count", sample.occluders.len());
    let d = &sample.deform;
    kv.push_real("deform_axis_x", d.axis.x);
    kv.push_real("deform_axis_y", d.axis.y);
    kv.push_real("deform_axis_z", d.axis.z);
    kv.push_real("deform_pivot_x", d.pivot.x);
    kv.push_real("deform_pivot_y", d.pivot.y);
    kv.push_real("deform_pivot_z", d.pivot.z);
    kv.push_real("deform_rate", d.rate);
    kv.push("bulge_present", u8::from(d.bulge.is_some()));
    if let Some(b) = &d.bulge {
        kv.push_real("bulge_center_x", b.center.x);
        kv.push_real("bulge_center_y", b.center.y);
        kv.push_real("bulge_center_z", b.center.z);
        kv.push_real("bulge_amplitude", b.amplitude);
        kv.push_real("bulge_width", b.width);
    }
    kv
}

fn deform_from_meta(kv: &KeyValues) -> Result<DeformParams> {
    let bulge = if kv.get_usize("bulge_present")? == 1 {
        Some(BulgeParams {
            center: Vec3::new(
                kv.get_real("bulge_center_x")?,
                kv.get_real("bulge_center_y")?,
                kv.get_real("bulge_center_z")?,
            ),
            amplitude: kv.get_real("bulge_amplitude")?,
            width: kv.get_real("bulge_width")?,
        })
    } else {
        None
    };
    Ok(DeformParams {
        axis: Vec3::new(
            kv.get_real("deform_axis_x")?,
            kv.get_real("deform_axis_y")?,
            kv.get_real("deform_axis_z")?,
        ),
        pivot: Vec3::new(
            kv.get_real("deform_pivot_x")?,
            kv.get_real("deform_pivot_y")?,
            kv.get_real("deform_pivot_z")?,
        ),
        rate: kv.get_real("deform_rate")?,
        bulge,
    })
}

/// Generates every scene and view under `root`. Fails if a view cannot be
/// synthesized; partial output is left on disk for inspection.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetSummary> {
    if cfg.scenes == 0 || cfg.views_per_scene == 0 {
        return Err(Error::invalid("dataset needs at least one scene and view"));
    }
    let digest = dataset_digest(cfg)?;
    let k = default_intrinsics();
    for scene in 0..cfg.scenes {
        let organ = gen_organ(mix_seed(cfg.seed, scene as u64, 0));
        let sdir = scene_dir(root, scene);
        write_ply_mesh(&sdir.join("mesh.ply"), &organ)?;
        for view in 0..cfg.views_per_scene {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, scene as u64, view as u64 + 1));
            let sample = synthesize_view(&organ, &cfg.view, &k, &mut rng)?;
            let vdir = view_dir(root, scene, view);
            write_pgm16(&vdir.join("depth.pgm"), &sample.depth)?;
            write_pbm(&vdir.join("mask.pbm"), &sample.mask)?;
            write_transform_kv(&vdir.join("pose.txt"), &sample.pose)?;
            meta_for(&sample, scene, view, &digest).write(&vdir.join("meta.txt"))?;
            write_corr(&vdir.join("corr.txt"), &sample.gt_corr)?;
        }
    }
    let mut manifest = KeyValues::new();
    manifest.push("digest", &digest);
    manifest.push("seed", cfg.seed);
    manifest.push("scenes", cfg.scenes);
    manifest.push("views_per_scene", cfg.views_per_scene);
    manifest.write(&root.join("dataset.txt"))?;
    Ok(DatasetSummary {
        root: root.to_path_buf(),
        digest,
        scenes: cfg.scenes,
        views_per_scene: cfg.views_per_scene,
    })
}

#[derive(Debug, Clone)]
pub struct SampleLocator {
    pub scene: usize,
    pub view: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub digest: String,
    pub scenes: usize,
    pub views_per_scene: usize,
}

/// Reads the manifest and enumerates every sample directory.
pub fn open_dataset(root: &Path) -> Result<(DatasetIndex, Vec<SampleLocator>)> {
    let manifest = KeyValues::read(&root.join("dataset.txt"))?;
    let index = DatasetIndex {
        root: root.to_path_buf(),
        digest: manifest
            .get("digest")
            .ok_or_else(|| Error::parse(root.join("dataset.txt"), "missing digest"))?
            .to_string(),
        scenes: manifest.get_usize("scenes")?,
        views_per_scene: manifest.get_usize("views_per_scene")?,
    };
    let mut locators = Vec::with_capacity(index.scenes * index.views_per_scene);
    for scene in 0..index.scenes {
        for view in 0..index.views_per_scene {
            let dir = view_dir(root, scene, view);
            if !dir.is_dir() {
                return Err(Error::invalid(format!("missing sample dir {dir:?}")));
            }
            locators.push(SampleLocator { scene, view, dir });
        }
    }
    Ok((index, locators))
}

pub fn load_scene_mesh(root: &Path, scene: usize) -> Result<TriMesh> {
    read_ply_mesh(&scene_dir(root, scene).join("mesh.ply"))
}

/// A sample read back from disk. Depth is quantized by the 16-bit encoding;
/// everything else round-trips exactly.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub scene: usize,
    pub view: usize,
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub depth: DepthMap,
    pub mask: BinaryMask,
    pub gt_corr: Vec<(Vec3, Vec3)>,
    pub overlap: Real,
    pub deform: DeformParams,
}

pub fn load_sample(loc: &SampleLocator) -> Result<LoadedSample> {
    let meta = KeyValues::read(&loc.dir.join("meta.txt"))?;
    let intrinsics = CameraIntrinsics::new(
        meta.get_real("fx")?,
        meta.get_real("fy")?,
        meta.get_real("cx")?,
        meta.get_real("cy")?,
        meta.get_usize("width")?,
        meta.get_usize("height")?,
    )?;
    Ok(LoadedSample {
        scene: meta.get_usize("scene")?,
        view: meta.get_usize("view")?,
        pose: read_transform(&loc.dir.join("pose.txt"))?,
        intrinsics,
        depth: read_pgm16(&loc.dir.join("depth.pgm"))?,
        mask: read_pbm(&loc.dir.join("mask.pbm"))?,
        gt_corr: read_corr(&loc.dir.join("corr.txt"))?,
        overlap: meta.get_real("overlap")?,
        deform: deform_from_meta(&meta)?,
    })
}

/// Deterministic 60/20/20 split over scene indices.
pub fn scene_splits(scenes: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let train_end = ((scenes as f64) * 0.6).round().max(1.0) as usize;
    let val_end = (((scenes as f64) * 0.8).round() as usize).max(train_end);
    let train = (0..train_end.min(scenes)).collect();
    let val = (train_end.min(scenes)..val_end.min(scenes)).collect();
    let test = (val_end.min(scenes)..scenes).collect();
    (train, val, test)
}
