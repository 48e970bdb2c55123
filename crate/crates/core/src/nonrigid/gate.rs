//! Per-point similarity gating between the rigidly-placed source cloud and
//! the observed target surface.
//!
//! Both clouds pass through one weight-shared point encoder; source points
//! then attend to the target through a low-rank cross attention whose key and
//! value projections compress the target axis to a fixed rank, and a small
//! per-point head squashes the result to a scalar in (0,1). Points that find
//! structural support in the target gate toward the non-rigid warp; points
//! without support stay anchored near the rigid placement.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Real};
use crate::tape::{ParamSet, Tape, Var};

/// Sizing knobs for [`init_gate_params`]. Every later call infers widths from
/// the parameter shapes, so the config never travels with the parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// Per-point feature width of the shared encoder.
    pub feat_width: usize,
    /// Rank of the compressed target axis in the cross attention.
    pub rank: usize,
    /// Stored column count of the key/value projections; targets larger than
    /// this are deterministically thinned before attention.
    pub max_keys: usize,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { feat_width: 64, rank: 128, max_keys: 1024, seed: 23 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_width == 0 {
            return Err(Error::invalid("gate feature width must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::invalid("gate attention rank must be positive"));
        }
        if self.max_keys < self.rank {
            return Err(Error::invalid(
                "gate max_keys must be at least the attention rank",
            ));
        }
        Ok(())
    }
}

/// Per-source-point gate values together with the parameters that produced
/// them. Hand-built gates (for ablations) carry an empty parameter set.
#[derive(Debug, Clone)]
pub struct SimilarityGate {
    pub values: Vec<Real>,
    pub params: ParamSet,
}

impl SimilarityGate {
    pub fn from_values(values: Vec<Real>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("gate needs at least one value"));
        }
        if values.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("gate values must lie in [0,1]"));
        }
        Ok(SimilarityGate { values, params: ParamSet::new() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Fresh gate parameters; biases start at zero so the initial gate sits near
/// one half everywhere.
pub fn init_gate_params(cfg: &GateConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let c = cfg.feat_width;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamSet::new();
    p.init_he("gate.enc.w1", 3, c, &mut rng);
    p.init_zeros("gate.enc.b1", 1, c);
    p.init_he("gate.enc.w2", 2 * c, c, &mut rng);
    p.init_zeros("gate.enc.b2", 1, c);
    p.init_xavier("gate.att.wq", c, c, &mut rng);
    p.init_xavier("gate.att.wk", c, c, &mut rng);
    p.init_xavier("gate.att.wv", c, c, &mut rng);
    p.init_xavier("gate.att.ek", cfg.rank, cfg.max_keys, &mut rng);
    p.init_xavier("gate.att.ev", cfg.rank, cfg.max_keys, &mut rng);
    p.init_he("gate.head.w1", 3 * c, c, &mut rng);
    p.init_zeros("gate.head.b1", 1, c);
    p.init_xavier("gate.head.w2", c, 1, &mut rng);
    p.init_zeros("gate.head.b2", 1, 1);
    Ok(p)
}

const GATE_PARAM_NAMES: [&str; 13] = [
    "gate.enc.w1",
    "gate.enc.b1",
    "gate.enc.w2",
    "gate.enc.b2",
    "gate.att.wq",
    "gate.att.wk",
    "gate.att.wv",
    "gate.att.ek",
    "gate.att.ev",
    "gate.head.w1",
    "gate.head.b1",
    "gate.head.w2",
    "gate.head.b2",
];

use super::cloud_matrix;

fn check_gate_params(params: &ParamSet) -> Result<usize> {
    for name in GATE_PARAM_NAMES {
        if !params.contains(name) {
            return Err(Error::invalid(format!("missing gate parameter {name}")));
        }
    }
    let c = params.get("gate.enc.w1").unwrap().ncols();
    let ek = params.get("gate.att.ek").unwrap();
    let ev = params.get("gate.att.ev").unwrap();
    if ek.dim() != ev.dim() {
        return Err(Error::invalid("gate key/value projections disagree in shape"));
    }
    if ek.nrows() == 0 || ek.ncols() < ek.nrows() {
        return Err(Error::invalid("gate projection rank exceeds its key budget"));
    }
    Ok(c)
}

/// Shared point encoder: a per-point layer, a mean-pooled context row, and a
/// second per-point layer over the concatenation.
pub(crate) fn local_features_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    cloud: &PointCloud,
) -> Var {
    let n = cloud.len();
    let x = tape.leaf(cloud_matrix(cloud));
    let w1 = tape.param(params, "gate.enc.w1");
    let b1 = tape.param(params, "gate.enc.b1");
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let pooled = tape.mean_over_rows(h);
    let pooled = tape.broadcast_row(pooled, n);
    let hp = tape.concat_cols(&[h, pooled]);
    let w2 = tape.param(params, "gate.enc.w2");
    let b2 = tape.param(params, "gate.enc.b2");
    let f = tape.matmul(hp, w2);
    let f = tape.add_row(f, b2);
    tape.relu(f)
}

/// Per-point features for one cloud; both registration sides use the same
/// parameters.
pub fn local_features(cloud: &PointCloud, params: &ParamSet) -> Result<Array2<Real>> {
    if cloud.is_empty() {
        return Err(Error::invalid("local features over an empty cloud"));
    }
    check_gate_params(params)?;
    let mut tape = Tape::new();
    let f = local_features_on_tape(&mut tape, params, cloud);
    Ok(tape.value(f).clone())
}

/// Attention with the target axis compressed to `e_k.nrows()` rows:
/// `softmax(q (e_k k)^T / sqrt(c)) (e_v v)`. With square identity
/// projections this is exactly full attention.
pub fn low_rank_attention(
    queries: &Array2<Real>,
    keys: &Array2<Real>,
    values: &Array2<Real>,
    e_k: &Array2<Real>,
    e_v: &Array2<Real>,
) -> Result<Array2<Real>> {
    let c = queries.ncols();
    let m = keys.nrows();
    if keys.ncols() != c || values.ncols() != c {
        return Err(Error::invalid("attention feature widths disagree"));
    }
    if values.nrows() != m {
        return Err(Error::invalid("keys and values disagree in row count"));
    }
    if e_k.dim() != e_v.dim() || e_k.ncols() != m {
        return Err(Error::invalid("projection shape must be rank x key-count"));
    }
    if e_k.nrows() == 0 || e_k.nrows() > m {
        return Err(Error::invalid("attention rank must lie in [1, key count]"));
    }
    let mut tape = Tape::new();
    let q = tape.leaf(queries.clone());
    let k = tape.leaf(keys.clone());
    let v = tape.leaf(values.clone());
    let ek = tape.leaf(e_k.clone());
    let ev = tape.leaf(e_v.clone());
    let out = low_rank_attention_on_tape(&mut tape, q, k, v, ek, ev, c);
    Ok(tape.value(out).clone())
}

pub(crate) fn low_rank_attention_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    e_k: Var,
    e_v: Var,
    width: usize,
) -> Var {
    let kk = tape.matmul(e_k, k);
    let kk_t = tape.transpose(kk);
    let scores = tape.matmul(q, kk_t);
    let scores = tape.scale(scores, 1.0 / (width as Real).sqrt());
    let attn = tape.softmax_rows(scores);
    let vv = tape.matmul(e_v, v);
    tape.matmul(attn, vv)
}

/// Builds the whole gate on `tape` so its parameters can receive gradients:
/// encoder for both clouds, low-rank cross attention from source to target,
/// and the per-point sigmoid head. Returns the `n x 1` gate column.
pub fn gate_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    src: &PointCloud,
    tgt: &PointCloud,
) -> Result<Var> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::invalid("gate needs nonempty clouds"));
    }
    let c = check_gate_params(params)?;
    let rank = params.get("gate.att.ek").unwrap().nrows();
    let max_keys = params.get("gate.att.ek").unwrap().ncols();
    if tgt.len() < rank {
        return Err(Error::invalid(format!(
            "target cloud ({} points) is smaller than the attention rank {rank}",
            tgt.len()
        )));
    }
    let f_src = local_features_on_tape(tape, params, src);
    let f_tgt = local_features_on_tape(tape, params, tgt);
    gate_head_on_tape(tape, params, f_src, f_tgt, c, max_keys)
}

/// Attention plus head over already-computed features.
fn gate_head_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    f_src: Var,
    f_tgt: Var,
    width: usize,
    max_keys: usize,
) -> Result<Var> {
    let n = tape.shape(f_src).0;
    let m = tape.shape(f_tgt).0;
    let wq = tape.param(params, "gate.att.wq");
    let wk = tape.param(params, "gate.att.wk");
    let wv = tape.param(params, "gate.att.wv");
    let q = tape.matmul(f_src, wq);
    // Thin an oversized target to the stored key budget; otherwise shrink the
    // projections to the actual key count.
    let (k_in, m_used) = if m > max_keys {
        let idx: Vec<usize> = (0..max_keys).map(|i| i * m / max_keys).collect();
        (tape.gather_rows(f_tgt, idx), max_keys)
    } else {
        (f_tgt, m)
    };
    let k = tape.matmul(k_in, wk);
    let v = tape.matmul(k_in, wv);
    let ek_full = tape.param(params, "gate.att.ek");
    let ev_full = tape.param(params, "gate.att.ev");
    let (ek, ev) = if m_used < max_keys {
        (
            tape.slice_cols(ek_full, 0, m_used),
            tape.slice_cols(ev_full, 0, m_used),
        )
    } else {
        (ek_full, ev_full)
    };
    let phi = low_rank_attention_on_tape(tape, q, k, v, ek, ev, width);
    let pooled_tgt = tape.mean_over_rows(f_tgt);
    let pooled_tgt = tape.broadcast_row(pooled_tgt, n);
    let pooled_phi = tape.mean_over_rows(phi);
    let pooled_phi = tape.broadcast_row(pooled_phi, n);
    let z = tape.concat_cols(&[phi, pooled_tgt, pooled_phi]);
    let w1 = tape.param(params, "gate.head.w1");
    let b1 = tape.param(params, "gate.head.b1");
    let h = tape.matmul(z, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let w2 = tape.param(params, "gate.head.w2");
    let b2 = tape.param(params, "gate.head.b2");
    let logit = tape.matmul(h, w2);
    let logit = tape.add_row(logit, b2);
    Ok(tape.sigmoid(logit))
}

/// Gate from precomputed per-point features.
pub fn similarity_gate(
    f_src: &Array2<Real>,
    f_tgt: &Array2<Real>,
    params: &ParamSet,
) -> Result<SimilarityGate> {
    let c = check_gate_params(params)?;
    if f_src.ncols() != c || f_tgt.ncols() != c {
        return Err(Error::invalid("gate features disagree with parameter width"));
    }
    if f_src.nrows() == 0 || f_tgt.nrows() == 0 {
        return Err(Error::invalid("gate needs nonempty feature sets"));
    }
    let rank = params.get("gate.att.ek").unwrap().nrows();
    if f_tgt.nrows() < rank {
        return Err(Error::invalid(format!(
            "target features ({} rows) are fewer than the attention rank {rank}",
            f_tgt.nrows()
        )));
    }
    let max_keys = params.get("gate.att.ek").unwrap().ncols();
    let mut tape = Tape::new();
    let fs = tape.leaf(f_src.clone());
    let ft = tape.leaf(f_tgt.clone());
    let g = gate_head_on_tape(&mut tape, params, fs, ft, c, max_keys)?;
    let values = tape.value(g).column(0).to_vec();
    Ok(SimilarityGate { values, params: params.clone() })
}

/// End-to-end gate between two clouds with fixed parameters.
pub fn compute_gate(
    src: &PointCloud,
    tgt: &PointCloud,
    params: &ParamSet,
) -> Result<SimilarityGate> {
    let mut tape = Tape::new();
    let g = gate_on_tape(&mut tape, params, src, tgt)?;
    let values = tape.value(g).column(0).to_vec();
    Ok(SimilarityGate { values, params: params.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::synth::gen_organ;
    use rand::Rng;

    fn tiny_config() -> GateConfig {
        GateConfig { feat_width: 6, rank: 4, max_keys: 8, seed: 5 }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.06..0.06),
                    rng.gen_range(-0.06..0.06),
                    rng.gen_range(-0.06..0.06),
                )
            })
            .collect();
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn local_features_are_deterministic_and_sized() {
        let params = init_gate_params(&tiny_config()).unwrap();
        let cloud = random_cloud(9, 2);
        let a = local_features(&cloud, &params).unwrap();
        let b = local_features(&cloud, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (9, 6));
    }

    #[test]
    fn local_features_commute_with_permutation() {
        let params = init_gate_params(&tiny_config()).unwrap();
        let cloud = random_cloud(7, 3);
        let f = local_features(&cloud, &params).unwrap();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let permuted =
            PointCloud::new(perm.iter().map(|&i| cloud.points[i]).collect()).unwrap();
        let fp = local_features(&permuted, &params).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..f.ncols() {
                assert!((fp[(row, c)] - f[(src, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projections_recover_full_attention() {
        let c = 5;
        let m = 6;
        let q = crate::tape::testutil::randn(4, c, 11);
        let k = crate::tape::testutil::randn(m, c, 12);
        let v = crate::tape::testutil::randn(m, c, 13);
        let eye = Array2::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let low = low_rank_attention(&q, &k, &v, &eye, &eye).unwrap();

        // Full attention, written out directly.
        let scores = q.dot(&k.t()) / (c as Real).sqrt();
        let mut full = Array2::<Real>::zeros((4, c));
        for i in 0..4 {
            let row = scores.row(i);
            let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let exps: Vec<Real> = row.iter().map(|s| (s - mx).exp()).collect();
            let z: Real = exps.iter().sum();
            for j in 0..m {
                for d in 0..c {
                    full[(i, d)] += exps[j] / z * v[(j, d)];
                }
            }
        }
        for i in 0..4 {
            for d in 0..c {
                assert!((low[(i, d)] - full[(i, d)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_stay_normalized() {
        // With identity value projection and all-ones values, each output row
        // is exactly the row sum of the attention weights.
        let m = 5;
        let q = crate::tape::testutil::randn(3, 4, 21);
        let k = crate::tape::testutil::randn(m, 4, 22);
        let v = Array2::ones((m, 4));
        let eye = Array2::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let out = low_rank_attention(&q, &k, &v, &eye, &eye).unwrap();
        for x in out.iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let q = Array2::zeros((3, 4));
        let k = Array2::zeros((5, 4));
        let v = Array2::zeros((5, 4));
        let e_small = Array2::zeros((6, 5)); // rank above key count
        assert!(low_rank_attention(&q, &k, &v, &e_small, &e_small).is_err());
        let e_cols = Array2::zeros((2, 4)); // wrong key count
        assert!(low_rank_attention(&q, &k, &v, &e_cols, &e_cols).is_err());
    }

    #[test]
    fn gate_values_are_strictly_inside_unit_interval() {
        let params = init_gate_params(&tiny_config()).unwrap();
        let src = random_cloud(12, 7);
        let tgt = random_cloud(9, 8);
        let gate = compute_gate(&src, &tgt, &params).unwrap();
        assert_eq!(gate.len(), 12);
        for &v in &gate.values {
            assert!(v > 0.0 && v < 1.0, "gate value {v} escaped (0,1)");
        }
        // Zero-bias head keeps the fresh gate near one half.
        let mean: Real = gate.values.iter().sum::<Real>() / gate.len() as Real;
        assert!((mean - 0.5).abs() < 0.25, "fresh gate mean {mean}");
    }

    #[test]
    fn gate_matches_feature_level_entry_point() {
        let params = init_gate_params(&tiny_config()).unwrap();
        let src = random_cloud(10, 17);
        let tgt = random_cloud(6, 18);
        let from_clouds = compute_gate(&src, &tgt, &params).unwrap();
        let fs = local_features(&src, &params).unwrap();
        let ft = local_features(&tgt, &params).unwrap();
        let from_feats = similarity_gate(&fs, &ft, &params).unwrap();
        for (a, b) in from_clouds.values.iter().zip(&from_feats.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_targets_are_thinned_to_the_key_budget() {
        let params = init_gate_params(&tiny_config()).unwrap();
        let src = random_cloud(5, 25);
        let tgt = random_cloud(30, 26); // max_keys is 8
        let gate = compute_gate(&src, &tgt, &params).unwrap();
        assert_eq!(gate.len(), 5);
        assert!(gate.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn undersized_targets_are_rejected() {
        let params = init_gate_params(&tiny_config()).unwrap();
        let src = random_cloud(5, 27);
        let tgt = random_cloud(3, 28); // rank is 4
        assert!(compute_gate(&src, &tgt, &params).is_err());
    }

    #[test]
    fn hand_built_gates_validate_their_range() {
        assert!(SimilarityGate::from_values(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(SimilarityGate::from_values(vec![1.2]).is_err());
        assert!(SimilarityGate::from_values(vec![]).is_err());
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let params = init_gate_params(&tiny_config()).unwrap();
        let src = random_cloud(5, 33);
        let tgt = random_cloud(7, 34);

        let eval = |p: &ParamSet| -> Real {
            let mut tape = Tape::new();
            let g = gate_on_tape(&mut tape, p, &src, &tgt).unwrap();
            let loss = tape.mean_all(g);
            tape.value(loss)[(0, 0)]
        };
        let mut tape = Tape::new();
        let g = gate_on_tape(&mut tape, &params, &src, &tgt).unwrap();
        let loss = tape.mean_all(g);
        let grads = tape.backward(loss);

        let h = 1e-6;
        for name in GATE_PARAM_NAMES {
            let dim = params.get(name).unwrap().dim();
            let probes = [(0usize, 0usize), (dim.0 - 1, dim.1 - 1)];
            for &(r, c) in &probes {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap()[(r, c)] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap()[(r, c)] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let got = grads
                    .of_param(name)
                    .map(|g| g[(r, c)])
                    .unwrap_or(0.0);
                assert!(
                    (fd - got).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{name}[{r},{c}]: fd {fd} vs grad {got}"
                );
            }
        }
    }

    #[test]
    fn gate_handles_surface_samples() {
        let params = init_gate_params(&GateConfig {
            feat_width: 16,
            rank: 32,
            max_keys: 64,
            seed: 3,
        })
        .unwrap();
        let mesh = gen_organ(4);
        let src = mesh.sample_surface(80, 1).unwrap();
        let tgt = mesh.sample_surface(50, 2).unwrap();
        let gate = compute_gate(&src, &tgt, &params).unwrap();
        assert_eq!(gate.len(), 80);
        assert!(gate.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
