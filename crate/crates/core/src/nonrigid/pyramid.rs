//! Hierarchical test-time deformation of a rigidly-placed cloud.
//!
//! Each pyramid level is a small per-point network over a sinusoidal
//! encoding of the previous level's positions; its seven outputs split into
//! a per-point axis-angle motion, a translation, and a confidence that
//! blends the motion with the identity. Levels are optimized one at a time,
//! coarse to fine, against chamfer distance. An optional per-point
//! similarity gate blends the finest level's result back toward the rigid
//! input, so unsupported regions keep their rigid placement.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gate::SimilarityGate;
use super::{cloud_matrix, rows_to_cloud};
use crate::error::{Error, Result};
use crate::geom::{chamfer, PointCloud, Real, Vec3};
use crate::synth::mix_seed;
use crate::tape::{
    chamfer_op, rodrigues_points_op, rodrigues_u, Adam, Optimizer, ParamSet, Tape, Var,
};

/// Knobs for [`fit_pyramid`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Number of pyramid levels, ordered coarse to fine.
    pub levels: usize,
    /// Offset added to the level index in the frequency exponent, so level
    /// `l` encodes positions at frequency `2^(l + freq_offset)`.
    pub freq_offset: i32,
    /// Hidden width of each level's network.
    pub hidden: usize,
    /// Learning rate of the per-level optimizer.
    pub lr: Real,
    /// Iteration cap per level.
    pub max_iters: usize,
    /// A level stops once it has gone [`STALL_PATIENCE`] consecutive
    /// iterations without improving its best chamfer by this relative
    /// amount.
    pub rel_tol: Real,
    pub seed: u64,
}

/// Consecutive non-improving iterations tolerated before a level stops.
const STALL_PATIENCE: usize = 10;

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            levels: 10,
            freq_offset: -3,
            hidden: 128,
            lr: 1e-4,
            max_iters: 100,
            rel_tol: 1e-4,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("pyramid needs at least one level"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("level networks need a positive width"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("per-level iteration cap must be positive"));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol >= 0.0) {
            return Err(Error::invalid("relative tolerance must be nonnegative"));
        }
        Ok(())
    }
}

fn level_frequency(level: usize, freq_offset: i32) -> Real {
    (2.0_f64).powi(level as i32 + freq_offset)
}

fn posenc_rows(rows: &Array2<Real>, level: usize, freq_offset: i32) -> Array2<Real> {
    let nu = level_frequency(level, freq_offset);
    let n = rows.nrows();
    let mut out = Array2::zeros((n, 6));
    for i in 0..n {
        for j in 0..3 {
            let arg = nu * rows[(i, j)];
            out[(i, j)] = arg.sin();
            out[(i, j + 3)] = arg.cos();
        }
    }
    out
}

/// Per-point sinusoidal encoding at one pyramid level's frequency:
/// `[sin(nu x), sin(nu y), sin(nu z), cos(nu x), cos(nu y), cos(nu z)]`.
pub fn posenc(points: &PointCloud, level: usize, freq_offset: i32) -> Array2<Real> {
    posenc_rows(&cloud_matrix(points), level, freq_offset)
}

/// One point moved by a per-point rigid motion, blended with the identity:
/// the first three motion numbers are an axis-angle rotation, the last three
/// a translation, and `conf` interpolates between staying put and following
/// the motion fully. Mirrors the differentiable kernel bit for bit.
fn moved_point(p: Vec3, motion_row: &[Real], conf: Real) -> Vec3 {
    let om = Vec3::new(motion_row[0], motion_row[1], motion_row[2]);
    let (a, b, _, _) = rodrigues_u(om.norm_squared());
    let cx = om.cross(&p);
    let dx = om.cross(&cx);
    let rotated = p + cx * a + dx * b;
    let moved = rotated + Vec3::new(motion_row[3], motion_row[4], motion_row[5]);
    let delta = moved - p;
    p + delta * conf
}

fn apply_motion_rows(base: &Array2<Real>, motion: &Array2<Real>, conf: &[Real]) -> Array2<Real> {
    let n = base.nrows();
    let mut out = Array2::zeros((n, 3));
    for i in 0..n {
        let p = Vec3::new(base[(i, 0)], base[(i, 1)], base[(i, 2)]);
        let row: Vec<Real> = motion.row(i).to_vec();
        let q = moved_point(p, &row, conf[i]);
        out[(i, 0)] = q.x;
        out[(i, 1)] = q.y;
        out[(i, 2)] = q.z;
    }
    out
}

/// Applies a per-point motion field to a cloud. `motion` is `n x 6`
/// (axis-angle then translation) and `confidence` blends each point between
/// identity (0) and the full motion (1). Zero motion is exactly the
/// identity for any confidence.
pub fn apply_level(
    points: &PointCloud,
    motion: &Array2<Real>,
    confidence: &[Real],
) -> Result<PointCloud> {
    let n = points.len();
    if motion.dim() != (n, 6) {
        return Err(Error::invalid(format!(
            "motion must be {n} x 6, got {:?}",
            motion.dim()
        )));
    }
    if confidence.len() != n {
        return Err(Error::invalid("one confidence value per point required"));
    }
    if confidence
        .iter()
        .any(|c| !c.is_finite() || !(0.0..=1.0).contains(c))
    {
        return Err(Error::invalid("confidence values must lie in [0,1]"));
    }
    if motion.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("motion field contains non-finite values"));
    }
    rows_to_cloud(&apply_motion_rows(&cloud_matrix(points), motion, confidence))
}

/// Gate blend with exact endpoints: gate 0 reproduces the rigid row bit for
/// bit, gate 1 reproduces the warped row bit for bit.
fn blend_rows(rigid: &Array2<Real>, warped: &Array2<Real>, gate: &[Real]) -> Array2<Real> {
    let mut out = Array2::zeros(rigid.dim());
    for (i, &g) in gate.iter().enumerate() {
        for j in 0..rigid.ncols() {
            out[(i, j)] = if g == 0.0 {
                rigid[(i, j)]
            } else if g == 1.0 {
                warped[(i, j)]
            } else {
                rigid[(i, j)] + g * (warped[(i, j)] - rigid[(i, j)])
            };
        }
    }
    out
}

fn gate_blend_op(tape: &mut Tape, warped: Var, rigid: &Array2<Real>, gate: &[Real]) -> Var {
    let value = blend_rows(rigid, tape.value(warped), gate);
    let gate: Vec<Real> = gate.to_vec();
    tape.custom(
        &[warped],
        value,
        Box::new(move |g, _, _| {
            let mut out = g.clone();
            for (i, &gv) in gate.iter().enumerate() {
                for j in 0..out.ncols() {
                    out[(i, j)] *= gv;
                }
            }
            vec![out]
        }),
    )
}

/// One level of the fitted pyramid: its index, frequency offset, and the
/// parameters of its per-point network (`w1/b1/w2/b2/w3/b3`).
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub level: usize,
    pub freq_offset: i32,
    pub params: ParamSet,
}

const LEVEL_PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

fn check_level_params(params: &ParamSet) -> Result<usize> {
    for name in LEVEL_PARAM_NAMES {
        if !params.contains(name) {
            return Err(Error::invalid(format!("missing level parameter {name}")));
        }
    }
    let hidden = params.get("w1").unwrap().ncols();
    let shapes = [
        ("w1", (6, hidden)),
        ("b1", (1, hidden)),
        ("w2", (hidden, hidden)),
        ("b2", (1, hidden)),
        ("w3", (hidden, 7)),
        ("b3", (1, 7)),
    ];
    for (name, want) in shapes {
        if params.get(name).unwrap().dim() != want {
            return Err(Error::invalid(format!("level parameter {name} has a wrong shape")));
        }
    }
    Ok(hidden)
}

fn init_level_params(hidden: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.init_he("w1", 6, hidden, &mut rng);
    p.init_zeros("b1", 1, hidden);
    p.init_he("w2", hidden, hidden, &mut rng);
    p.init_zeros("b2", 1, hidden);
    // Zero final layer: every level starts as the exact identity motion.
    p.init_zeros("w3", hidden, 7);
    p.init_zeros("b3", 1, 7);
    p
}

fn level_forward_plain(params: &ParamSet, enc: &Array2<Real>) -> (Array2<Real>, Vec<Real>) {
    let w1 = params.get("w1").unwrap();
    let b1 = params.get("b1").unwrap();
    let w2 = params.get("w2").unwrap();
    let b2 = params.get("b2").unwrap();
    let w3 = params.get("w3").unwrap();
    let b3 = params.get("b3").unwrap();
    let h1 = (enc.dot(w1) + b1).mapv(|x: Real| x.max(0.0));
    let h2 = (h1.dot(w2) + b2).mapv(|x: Real| x.max(0.0));
    let out = h2.dot(w3) + b3;
    let motion = out.slice(s![.., 0..6]).to_owned();
    let conf: Vec<Real> = out
        .column(6)
        .iter()
        .map(|&x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    (motion, conf)
}

/// A fitted stack of levels, replayable on any cloud of the same frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationPyramid {
    levels: Vec<PyramidLevel>,
}

impl DeformationPyramid {
    pub fn new(levels: Vec<PyramidLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("pyramid needs at least one level"));
        }
        for (i, lvl) in levels.iter().enumerate() {
            if lvl.level != i + 1 {
                return Err(Error::invalid(
                    "pyramid levels must be contiguous and ordered by increasing frequency",
                ));
            }
            check_level_params(&lvl.params)?;
        }
        Ok(DeformationPyramid { levels })
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    fn replay_rows(&self, rows: &Array2<Real>) -> Array2<Real> {
        let mut cur = rows.clone();
        for lvl in &self.levels {
            let enc = posenc_rows(&cur, lvl.level, lvl.freq_offset);
            let (motion, conf) = level_forward_plain(&lvl.params, &enc);
            cur = apply_motion_rows(&cur, &motion, &conf);
        }
        cur
    }

    /// Replays every level on `cloud` without gating.
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        if cloud.is_empty() {
            return Err(Error::invalid("cannot warp an empty cloud"));
        }
        rows_to_cloud(&self.replay_rows(&cloud_matrix(cloud)))
    }

    /// Replays every level, then blends the result toward the input by the
    /// per-point gate.
    pub fn apply_gated(&self, cloud: &PointCloud, gate: &SimilarityGate) -> Result<PointCloud> {
        if gate.len() != cloud.len() {
            return Err(Error::invalid("gate length must match the cloud"));
        }
        let rigid = cloud_matrix(cloud);
        let warped = self.replay_rows(&rigid);
        rows_to_cloud(&blend_rows(&rigid, &warped, &gate.values))
    }

    /// Flattens every level into one parameter set (names `lvl{i}.*`) plus
    /// the shared frequency offset, for checkpointing.
    pub fn to_param_set(&self) -> ParamSet {
        let mut out = ParamSet::new();
        out.insert(
            "freq_offset",
            Array2::from_elem((1, 1), self.levels[0].freq_offset as Real),
        );
        for lvl in &self.levels {
            for name in LEVEL_PARAM_NAMES {
                out.insert(
                    &format!("lvl{}.{name}", lvl.level),
                    lvl.params.get(name).unwrap().clone(),
                );
            }
        }
        out
    }

    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        let freq_offset = ps
            .get("freq_offset")
            .ok_or_else(|| Error::invalid("missing freq_offset entry"))?[(0, 0)]
            .round() as i32;
        let mut levels = Vec::new();
        for level in 1.. {
            let prefix = format!("lvl{level}.");
            if !ps.contains(&format!("{prefix}w1")) {
                break;
            }
            let mut params = ParamSet::new();
            for name in LEVEL_PARAM_NAMES {
                let arr = ps
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::invalid(format!("missing {prefix}{name}")))?;
                params.insert(name, arr.clone());
            }
            levels.push(PyramidLevel { level, freq_offset, params });
        }
        DeformationPyramid::new(levels)
    }
}

/// Optimization trace of one level.
#[derive(Debug, Clone)]
pub struct LevelTrace {
    pub level: usize,
    /// Optimizer steps taken before the level stopped.
    pub iterations: usize,
    pub chamfer_before: Real,
    pub chamfer_after: Real,
}

pub const LEVEL_CSV_HEADER: &str = "level,iterations,chamfer_before,chamfer_after";

/// Per-level chamfer trace as CSV, one line per level.
pub fn level_trace_csv(traces: &[LevelTrace]) -> String {
    let mut out = String::from(LEVEL_CSV_HEADER);
    for t in traces {
        out.push_str(&format!(
            "\n{},{},{:.9},{:.9}",
            t.level, t.iterations, t.chamfer_before, t.chamfer_after
        ));
    }
    out.push('\n');
    out
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub rigid_chamfer: Real,
    pub final_chamfer: Real,
    pub levels: Vec<LevelTrace>,
    /// Set when a non-finite loss stopped the fit early; the result is the
    /// last finite state.
    pub aborted: bool,
    /// Set when no warp beat the rigid placement and the output cloud was
    /// clamped back to the input.
    pub clamped_to_rigid: bool,
}

pub struct PyramidFit {
    pub warped: PointCloud,
    pub pyramid: DeformationPyramid,
    pub report: FitReport,
}

fn rows_to_vecs(rows: &Array2<Real>) -> Vec<Vec3> {
    rows.rows()
        .into_iter()
        .map(|r| Vec3::new(r[0], r[1], r[2]))
        .collect()
}

/// Builds one level's candidate on the tape. Returns the ungated warp and
/// the loss candidate (gated toward `rigid_rows` on the finest level when a
/// gate is present).
fn level_candidate_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    enc: &Array2<Real>,
    s_prev: &Array2<Real>,
    base_vecs: &[Vec3],
    gate_vals: Option<&[Real]>,
    rigid_rows: &Array2<Real>,
) -> (Var, Var) {
    let x = tape.leaf(enc.clone());
    let w1 = tape.param(params, "w1");
    let b1 = tape.param(params, "b1");
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let w2 = tape.param(params, "w2");
    let b2 = tape.param(params, "b2");
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    let h = tape.relu(h);
    let w3 = tape.param(params, "w3");
    let b3 = tape.param(params, "b3");
    let out = tape.matmul(h, w3);
    let out = tape.add_row(out, b3);
    let omega = tape.slice_cols(out, 0, 3);
    let trans = tape.slice_cols(out, 3, 6);
    let logit = tape.slice_cols(out, 6, 7);
    let conf = tape.sigmoid(logit);
    let rotated = rodrigues_points_op(tape, omega, base_vecs);
    let moved = tape.add(rotated, trans);
    let base = tape.leaf(s_prev.clone());
    let delta = tape.sub(moved, base);
    let scaled = tape.mul_col(delta, conf);
    let warped = tape.add(base, scaled);
    let candidate = match gate_vals {
        Some(g) => gate_blend_op(tape, warped, rigid_rows, g),
        None => warped,
    };
    (warped, candidate)
}

/// Fits the pyramid to align `source` (already rigidly placed) with
/// `target`, optimizing levels coarse to fine and keeping each level's best
/// iterate, so chamfer never increases relative to the input. With a gate,
/// the finest level is optimized through the gate blend and the returned
/// cloud is the blended one.
pub fn fit_pyramid(
    source: &PointCloud,
    target: &PointCloud,
    gate: Option<&SimilarityGate>,
    cfg: &FitConfig,
) -> Result<PyramidFit> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("pyramid fitting needs nonempty clouds"));
    }
    if let Some(g) = gate {
        if g.len() != source.len() {
            return Err(Error::invalid(format!(
                "gate has {} values for {} source points",
                g.len(),
                source.len()
            )));
        }
    }
    let rigid_rows = cloud_matrix(source);
    let rigid_chamfer = chamfer(source, target)?;
    let mut s_prev = rigid_rows.clone();
    let mut current_chamfer = rigid_chamfer;
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut traces = Vec::with_capacity(cfg.levels);
    let mut aborted = false;
    // Chamfer and blended rows of the gated finest level, when applicable.
    let mut final_gated: Option<(Real, Array2<Real>)> = None;

    for level in 1..=cfg.levels {
        let enc = posenc_rows(&s_prev, level, cfg.freq_offset);
        let base_vecs = rows_to_vecs(&s_prev);
        let mut params = init_level_params(cfg.hidden, mix_seed(cfg.seed, level as u64, 101));
        let gated_level = level == cfg.levels && gate.is_some();
        let gate_vals = gate.map(|g| g.values.as_slice());
        let mut opt = Adam::new(cfg.lr);
        let mut best_chamfer = Real::INFINITY;
        let mut best_params = params.clone();
        let mut best_warp = s_prev.clone();
        let mut best_blend: Option<Array2<Real>> = None;
        let mut first_loss = current_chamfer;
        let mut stall = 0usize;
        let mut steps = 0usize;

        for iter in 0..cfg.max_iters {
            let mut tape = Tape::new();
            let (warped, candidate) = level_candidate_on_tape(
                &mut tape,
                &params,
                &enc,
                &s_prev,
                &base_vecs,
                if gated_level { gate_vals } else { None },
                &rigid_rows,
            );
            let loss = chamfer_op(&mut tape, candidate, target);
            let loss_v = tape.value(loss)[(0, 0)];
            if iter == 0 {
                first_loss = loss_v;
            }
            if !loss_v.is_finite() {
                aborted = true;
                break;
            }
            if loss_v < best_chamfer {
                let meaningful = !best_chamfer.is_finite()
                    || best_chamfer - loss_v >= cfg.rel_tol * best_chamfer;
                best_chamfer = loss_v;
                best_params = params.clone();
                best_warp = tape.value(warped).clone();
                if gated_level {
                    best_blend = Some(tape.value(candidate).clone());
                }
                stall = if meaningful { 0 } else { stall + 1 };
            } else {
                stall += 1;
            }
            if best_chamfer <= 0.0 || stall >= STALL_PATIENCE {
                break;
            }
            let grads = tape.backward(loss);
            opt.step(&mut params, &grads);
            steps += 1;
        }
        if !best_chamfer.is_finite() {
            best_chamfer = current_chamfer;
        }
        traces.push(LevelTrace {
            level,
            iterations: steps,
            chamfer_before: first_loss,
            chamfer_after: best_chamfer,
        });
        levels.push(PyramidLevel {
            level,
            freq_offset: cfg.freq_offset,
            params: best_params,
        });
        if gated_level {
            let blend = best_blend
                .unwrap_or_else(|| blend_rows(&rigid_rows, &best_warp, gate_vals.unwrap()));
            final_gated = Some((best_chamfer, blend));
        } else {
            current_chamfer = best_chamfer;
        }
        s_prev = best_warp;
        if aborted {
            break;
        }
    }
    // Aborted fits keep any remaining levels at their identity-output
    // initialization so the pyramid stays replayable.
    for level in (levels.len() + 1)..=cfg.levels {
        levels.push(PyramidLevel {
            level,
            freq_offset: cfg.freq_offset,
            params: init_level_params(cfg.hidden, mix_seed(cfg.seed, level as u64, 101)),
        });
    }

    let (mut final_rows, mut final_chamfer) = match (gate, final_gated) {
        (None, _) => (s_prev, current_chamfer),
        (Some(_), Some((c, rows))) => (rows, c),
        (Some(g), None) => {
            // Abort before the finest level: gate the last finite state.
            let rows = blend_rows(&rigid_rows, &s_prev, &g.values);
            let c = chamfer(&rows_to_cloud(&rows)?, target)?;
            (rows, c)
        }
    };
    let mut clamped_to_rigid = false;
    if final_chamfer > rigid_chamfer {
        final_rows = rigid_rows;
        final_chamfer = rigid_chamfer;
        clamped_to_rigid = true;
    }
    Ok(PyramidFit {
        warped: rows_to_cloud(&final_rows)?,
        pyramid: DeformationPyramid::new(levels)?,
        report: FitReport {
            rigid_chamfer,
            final_chamfer,
            levels: traces,
            aborted,
            clamped_to_rigid,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{deform_point, gen_organ, DeformParams};
    use std::f64::consts::FRAC_PI_2;

    fn small_fit_config() -> FitConfig {
        FitConfig {
            levels: 4,
            hidden: 32,
            lr: 1e-3,
            max_iters: 40,
            seed: 11,
            ..FitConfig::default()
        }
    }

    #[test]
    fn posenc_of_origin_is_unit_cosines() {
        let cloud = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let enc = posenc(&cloud, 5, -3);
        assert_eq!(
            enc.row(0).to_vec(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn posenc_unit_frequency_hand_case() {
        // level + offset = 0 gives frequency 1.
        let cloud = PointCloud::new(vec![Vec3::new(FRAC_PI_2, 0.0, 0.0)]).unwrap();
        let enc = posenc(&cloud, 3, -3);
        let want = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        for (got, want) in enc.row(0).iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn posenc_frequency_doubles_per_level() {
        let p = Vec3::new(0.21, -0.4, 0.13);
        let cloud = PointCloud::new(vec![p]).unwrap();
        for level in 1..=9 {
            let a = posenc(&cloud, level, -3);
            let freq = (2.0_f64).powi(level as i32 - 3);
            for j in 0..3 {
                assert!((a[(0, j)] - (freq * p[j]).sin()).abs() < 1e-15);
                assert!((a[(0, j + 3)] - (freq * p[j]).cos()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn apply_level_identity_motion_is_exact_for_any_confidence() {
        let cloud = gen_organ(3).sample_surface(40, 1).unwrap();
        let motion = Array2::zeros((40, 6));
        for conf in [0.0, 0.3, 1.0] {
            let out = apply_level(&cloud, &motion, &vec![conf; 40]).unwrap();
            for (a, b) in out.points.iter().zip(&cloud.points) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn apply_level_blends_pure_translations() {
        let p = Vec3::new(0.02, -0.01, 0.3);
        let cloud = PointCloud::new(vec![p]).unwrap();
        let d = Vec3::new(0.01, -0.02, 0.005);
        let mut motion = Array2::zeros((1, 6));
        motion[(0, 3)] = d.x;
        motion[(0, 4)] = d.y;
        motion[(0, 5)] = d.z;
        let full = apply_level(&cloud, &motion, &[1.0]).unwrap();
        assert!((full.points[0] - (p + d)).norm() < 1e-12);
        let half = apply_level(&cloud, &motion, &[0.5]).unwrap();
        assert!((half.points[0] - (p + d * 0.5)).norm() < 1e-12);
    }

    #[test]
    fn apply_level_rotates_about_an_axis() {
        let cloud = PointCloud::new(vec![Vec3::new(0.3, 0.0, 0.0)]).unwrap();
        let mut motion = Array2::zeros((1, 6));
        motion[(0, 2)] = FRAC_PI_2; // quarter turn about z
        let out = apply_level(&cloud, &motion, &[1.0]).unwrap();
        assert!((out.points[0] - Vec3::new(0.0, 0.3, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn apply_level_rejects_bad_inputs() {
        let cloud = PointCloud::new(vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        assert!(apply_level(&cloud, &Array2::zeros((2, 5)), &[0.0, 0.0]).is_err());
        assert!(apply_level(&cloud, &Array2::zeros((2, 6)), &[0.0]).is_err());
        assert!(apply_level(&cloud, &Array2::zeros((2, 6)), &[0.0, 1.5]).is_err());
    }

    #[test]
    fn fitting_an_aligned_pair_stays_put() {
        let cloud = gen_organ(5).sample_surface(120, 2).unwrap();
        let fit = fit_pyramid(&cloud, &cloud, None, &small_fit_config()).unwrap();
        let mean_disp: Real = fit
            .warped
            .points
            .iter()
            .zip(&cloud.points)
            .map(|(a, b)| (a - b).norm())
            .sum::<Real>()
            / cloud.len() as Real;
        assert!(mean_disp < 1e-4, "mean displacement {mean_disp}");
        assert!(!fit.report.aborted);
    }

    #[test]
    fn fitting_recovers_most_of_a_bend() {
        let source = gen_organ(9).sample_surface(400, 3).unwrap();
        let bend = DeformParams {
            axis: Vec3::new(0.0, 0.0, 1.0),
            pivot: Vec3::zeros(),
            rate: 2.6,
            bulge: None,
        };
        let target =
            PointCloud::new(source.points.iter().map(|p| deform_point(p, &bend)).collect())
                .unwrap();
        let cfg = FitConfig { levels: 6, hidden: 64, seed: 4, ..FitConfig::default() };
        let fit = fit_pyramid(&source, &target, None, &cfg).unwrap();
        assert!(
            fit.report.final_chamfer <= 0.5 * fit.report.rigid_chamfer,
            "rigid {} -> fitted {}",
            fit.report.rigid_chamfer,
            fit.report.final_chamfer
        );
        for t in &fit.report.levels {
            assert!(t.chamfer_after <= t.chamfer_before + 1e-12);
        }
    }

    #[test]
    fn chamfer_never_increases_on_mismatched_clouds() {
        for seed in [1_u64, 2, 3] {
            let src = gen_organ(20 + seed).sample_surface(130, seed).unwrap();
            let tgt = gen_organ(40 + seed).sample_surface(140, seed + 9).unwrap();
            let cfg = FitConfig { seed, ..small_fit_config() };
            let fit = fit_pyramid(&src, &tgt, None, &cfg).unwrap();
            assert!(fit.report.final_chamfer <= fit.report.rigid_chamfer);
            for t in &fit.report.levels {
                assert!(t.chamfer_after <= t.chamfer_before + 1e-12);
            }
        }
    }

    #[test]
    fn later_levels_leave_earlier_parameters_untouched() {
        let src = gen_organ(31).sample_surface(90, 4).unwrap();
        let tgt = gen_organ(32).sample_surface(90, 5).unwrap();
        let one = FitConfig { levels: 1, ..small_fit_config() };
        let two = FitConfig { levels: 2, ..small_fit_config() };
        let fit_one = fit_pyramid(&src, &tgt, None, &one).unwrap();
        let fit_two = fit_pyramid(&src, &tgt, None, &two).unwrap();
        assert_eq!(
            fit_one.pyramid.levels()[0].params,
            fit_two.pyramid.levels()[0].params
        );
    }

    #[test]
    fn unit_gate_reproduces_the_ungated_fit_exactly() {
        let src = gen_organ(33).sample_surface(110, 6).unwrap();
        let tgt = gen_organ(34).sample_surface(100, 7).unwrap();
        let cfg = small_fit_config();
        let plain = fit_pyramid(&src, &tgt, None, &cfg).unwrap();
        let gate = SimilarityGate::from_values(vec![1.0; src.len()]).unwrap();
        let gated = fit_pyramid(&src, &tgt, Some(&gate), &cfg).unwrap();
        for (a, b) in gated.warped.points.iter().zip(&plain.warped.points) {
            assert_eq!(a, b);
        }
        assert_eq!(gated.report.final_chamfer, plain.report.final_chamfer);
    }

    #[test]
    fn zero_gate_returns_the_rigid_input_exactly() {
        let src = gen_organ(35).sample_surface(100, 8).unwrap();
        let tgt = gen_organ(36).sample_surface(110, 9).unwrap();
        let gate = SimilarityGate::from_values(vec![0.0; src.len()]).unwrap();
        let fit = fit_pyramid(&src, &tgt, Some(&gate), &small_fit_config()).unwrap();
        for (a, b) in fit.warped.points.iter().zip(&src.points) {
            assert_eq!(a, b);
        }
        assert_eq!(fit.report.final_chamfer, fit.report.rigid_chamfer);
        assert!(!fit.report.clamped_to_rigid);
    }

    #[test]
    fn gate_length_must_match_the_source() {
        let src = gen_organ(37).sample_surface(50, 10).unwrap();
        let tgt = gen_organ(38).sample_surface(50, 11).unwrap();
        let gate = SimilarityGate::from_values(vec![0.5; 49]).unwrap();
        assert!(fit_pyramid(&src, &tgt, Some(&gate), &small_fit_config()).is_err());
    }

    #[test]
    fn pyramid_round_trips_through_a_parameter_set() {
        let src = gen_organ(41).sample_surface(80, 12).unwrap();
        let tgt = gen_organ(42).sample_surface(80, 13).unwrap();
        let fit = fit_pyramid(&src, &tgt, None, &small_fit_config()).unwrap();
        let ps = fit.pyramid.to_param_set();
        let back = DeformationPyramid::from_param_set(&ps).unwrap();
        assert_eq!(back, fit.pyramid);
        let a = fit.pyramid.apply(&src).unwrap();
        let b = back.apply(&src).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn replaying_the_pyramid_reproduces_the_fit_output() {
        let src = gen_organ(43).sample_surface(90, 14).unwrap();
        let tgt = gen_organ(44).sample_surface(90, 15).unwrap();
        let fit = fit_pyramid(&src, &tgt, None, &small_fit_config()).unwrap();
        if fit.report.clamped_to_rigid {
            return; // replay reproduces the unclamped warp only
        }
        let replay = fit.pyramid.apply(&src).unwrap();
        for (a, b) in replay.points.iter().zip(&fit.warped.points) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trace_csv_lists_every_level() {
        let src = gen_organ(45).sample_surface(60, 16).unwrap();
        let tgt = gen_organ(46).sample_surface(60, 17).unwrap();
        let cfg = FitConfig { levels: 3, max_iters: 5, ..small_fit_config() };
        let fit = fit_pyramid(&src, &tgt, None, &cfg).unwrap();
        let csv = level_trace_csv(&fit.report.levels);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(LEVEL_CSV_HEADER));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn fit_rejects_degenerate_requests() {
        let cloud = gen_organ(47).sample_surface(30, 18).unwrap();
        let empty = PointCloud::new(vec![]).unwrap();
        assert!(fit_pyramid(&cloud, &empty, None, &small_fit_config()).is_err());
        let bad = FitConfig { levels: 0, ..FitConfig::default() };
        assert!(fit_pyramid(&cloud, &cloud, None, &bad).is_err());
    }
}
