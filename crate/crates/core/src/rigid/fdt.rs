//! The correspondence transformer: rotary-modulated multi-head self
//! attention per cloud, bidirectional cross attention with shared weights,
//! dual-softmax confidence scoring, and thresholded top-k selection.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{CorrespondenceSet, Real};
use crate::tape::{rotate_pairs_op, ParamSet, Tape, Var};

use super::encoder::FeatureCloud;
use super::rotary::rotary_tables;
use super::MatcherConfig;

/// Soft correspondence scores in `[0,1]`, source keypoints along rows.
#[derive(Debug, Clone)]
pub struct ConfidenceMatrix {
    pub values: Array2<Real>,
}

impl ConfidenceMatrix {
    pub fn new(values: Array2<Real>) -> Result<Self> {
        if values
            .iter()
            .any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::numerical("confidence entries must lie in [0,1]"));
        }
        Ok(ConfidenceMatrix { values })
    }
}

pub(crate) type RotaryTables = (Array2<Real>, Array2<Real>);

fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let (_, c) = tape.shape(q);
    let dh = c / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        outs.push(tape.matmul(attn, vh));
    }
    tape.concat_cols(&outs)
}

/// One attention stage with the concat-MLP-layernorm residual: queries from
/// `f_q` (modulated by its rotary tables), keys/values from `f_kv` (keys
/// modulated by *its* tables), output `f_q + LN(MLP([f_q, phi]))`.
fn attn_stage(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
    f_q: Var,
    rot_q: &RotaryTables,
    f_kv: Var,
    rot_kv: &RotaryTables,
) -> Var {
    let wq = tape.param(params, &format!("{prefix}.wq"));
    let wk = tape.param(params, &format!("{prefix}.wk"));
    let wv = tape.param(params, &format!("{prefix}.wv"));
    let q = tape.matmul(f_q, wq);
    let q = rotate_pairs_op(tape, q, rot_q.0.clone(), rot_q.1.clone());
    let k = tape.matmul(f_kv, wk);
    let k = rotate_pairs_op(tape, k, rot_kv.0.clone(), rot_kv.1.clone());
    let v = tape.matmul(f_kv, wv);
    let phi = multi_head_attention(tape, q, k, v, heads);

    let w1 = tape.param(params, &format!("{prefix}.mlp.w1"));
    let b1 = tape.param(params, &format!("{prefix}.mlp.b1"));
    let w2 = tape.param(params, &format!("{prefix}.mlp.w2"));
    let b2 = tape.param(params, &format!("{prefix}.mlp.b2"));
    let gamma = tape.param(params, &format!("{prefix}.ln.gamma"));
    let beta = tape.param(params, &format!("{prefix}.ln.beta"));
    let cat = tape.concat_cols(&[f_q, phi]);
    let h = tape.matmul(cat, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    let ln = tape.layer_norm(h, gamma, beta, 1e-6);
    tape.add(f_q, ln)
}

/// Transformer forward pass on an existing tape (training path). Expects the
/// encoder outputs and per-cloud rotary tables; returns the final feature
/// vars with the own-cloud rotary operator applied.
pub(crate) fn fdt_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &MatcherConfig,
    src: Var,
    src_rot: &RotaryTables,
    tgt: Var,
    tgt_rot: &RotaryTables,
) -> (Var, Var) {
    let mut fs = src;
    let mut ft = tgt;
    for b in 0..cfg.blocks {
        let sp = format!("blk{b}.self");
        fs = attn_stage(tape, params, &sp, cfg.heads, fs, src_rot, fs, src_rot);
        ft = attn_stage(tape, params, &sp, cfg.heads, ft, tgt_rot, ft, tgt_rot);
        let cp = format!("blk{b}.cross");
        let fs_next = attn_stage(tape, params, &cp, cfg.heads, fs, src_rot, ft, tgt_rot);
        let ft_next = attn_stage(tape, params, &cp, cfg.heads, ft, tgt_rot, fs, src_rot);
        fs = fs_next;
        ft = ft_next;
    }
    let fs = rotate_pairs_op(tape, fs, src_rot.0.clone(), src_rot.1.clone());
    let ft = rotate_pairs_op(tape, ft, tgt_rot.0.clone(), tgt_rot.1.clone());
    (fs, ft)
}

/// Dual softmax of a raw score matrix on the tape.
pub(crate) fn dual_softmax_on_tape(tape: &mut Tape, gamma: Var) -> Var {
    let rows = tape.softmax_rows(gamma);
    let gt = tape.transpose(gamma);
    let cols_t = tape.softmax_rows(gt);
    let cols = tape.transpose(cols_t);
    tape.mul(rows, cols)
}

/// Confidence head on the tape: projected inner products scaled by `1/sqrt(c)`
/// followed by the dual softmax.
pub(crate) fn confidence_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &MatcherConfig,
    fs: Var,
    ft: Var,
) -> Var {
    let ws = tape.param(params, "match.ws");
    let wt = tape.param(params, "match.wt");
    let a = tape.matmul(fs, ws);
    let b = tape.matmul(ft, wt);
    let bt = tape.transpose(b);
    let gamma = tape.matmul(a, bt);
    let gamma = tape.scale(gamma, 1.0 / (cfg.c as Real).sqrt());
    dual_softmax_on_tape(tape, gamma)
}

/// Elementwise product of the row-wise and column-wise softmaxes of `gamma`.
pub fn dual_softmax(gamma: &Array2<Real>) -> Array2<Real> {
    let mut tape = Tape::new();
    let g = tape.leaf(gamma.clone());
    let out = dual_softmax_on_tape(&mut tape, g);
    tape.value(out).clone()
}

/// Inference-side transformer pass over two encoded clouds.
pub fn fdt_forward(
    src: &FeatureCloud,
    tgt: &FeatureCloud,
    params: &ParamSet,
    cfg: &MatcherConfig,
) -> Result<(Array2<Real>, Array2<Real>)> {
    if src.features.ncols() != tgt.features.ncols() {
        return Err(Error::invalid("feature widths differ between clouds"));
    }
    let src_rot = rotary_tables(&src.keypoints.points, cfg.c)?;
    let tgt_rot = rotary_tables(&tgt.keypoints.points, cfg.c)?;
    let mut tape = Tape::new();
    let fs = tape.leaf(src.features.clone());
    let ft = tape.leaf(tgt.features.clone());
    let (os, ot) = fdt_on_tape(&mut tape, params, cfg, fs, &src_rot, ft, &tgt_rot);
    Ok((tape.value(os).clone(), tape.value(ot).clone()))
}

/// Inference-side confidence matrix from final features.
pub fn match_confidence(
    fs: &Array2<Real>,
    ft: &Array2<Real>,
    params: &ParamSet,
    cfg: &MatcherConfig,
) -> Result<ConfidenceMatrix> {
    if fs.ncols() != ft.ncols() {
        return Err(Error::invalid("feature widths differ between clouds"));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(fs.clone());
    let b = tape.leaf(ft.clone());
    let g = confidence_on_tape(&mut tape, params, cfg, a, b);
    ConfidenceMatrix::new(tape.value(g).clone())
}

/// Keeps up to `k` entries above `eta`, ordered by confidence, with weights
/// renormalized to sum 1. Fewer than 3 surviving pairs is an error (pose
/// estimation needs 3) unless the caller asked for fewer than 3 to begin
/// with, in which case hitting the requested count succeeds.
pub fn select_correspondences(
    g: &ConfidenceMatrix,
    eta: Real,
    k: usize,
) -> Result<CorrespondenceSet> {
    if !(0.0 < eta && eta < 1.0) {
        return Err(Error::invalid("eta must lie in (0,1)"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let mut picked: Vec<(usize, usize, Real)> = g
        .values
        .indexed_iter()
        .filter(|(_, &v)| v > eta)
        .map(|((i, j), &v)| (i, j, v))
        .collect();
    picked.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    picked.truncate(k);
    if picked.len() < 3.min(k) {
        return Err(Error::InsufficientMatches(format!(
            "{} pairs above threshold {eta}",
            picked.len()
        )));
    }
    let total: Real = picked.iter().map(|p| p.2).sum();
    let pairs = picked.iter().map(|&(i, j, _)| (i, j)).collect();
    let weights = picked.iter().map(|p| p.2 / total).collect();
    CorrespondenceSet::new(pairs, weights)
}

/// Unthresholded fallback: the `k` highest-confidence pairs regardless of
/// `eta`, used when selection fails early in training or on hard frames.
pub(crate) fn top_k_correspondences(g: &ConfidenceMatrix, k: usize) -> Result<CorrespondenceSet> {
    let mut all: Vec<(usize, usize, Real)> = g
        .values
        .indexed_iter()
        .map(|((i, j), &v)| (i, j, v))
        .collect();
    all.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    all.truncate(k.max(3));
    if all.len() < 3 {
        return Err(Error::InsufficientMatches(format!(
            "matrix holds only {} entries",
            all.len()
        )));
    }
    let total: Real = all.iter().map(|p| p.2).sum();
    if total <= 0.0 {
        return Err(Error::numerical("all confidences are zero"));
    }
    let pairs = all.iter().map(|&(i, j, _)| (i, j)).collect();
    let weights = all.iter().map(|p| p.2 / total).collect();
    CorrespondenceSet::new(pairs, weights)
}
