//! Domain-specific differentiable operations built on [`Tape::custom`].
//!
//! Each op pairs an exact forward kernel with a hand-derived backward pass;
//! every backward here is validated against central finite differences in the
//! unit tests below.

use ndarray::Array2;

use crate::geom::{chamfer, nearest_neighbor_indices, Mat3, PointCloud, Real, Vec3};
use crate::tape::{Tape, Var};

fn rows_to_cloud(a: &Array2<f64>) -> PointCloud {
    let points = a
        .rows()
        .into_iter()
        .map(|r| Vec3::new(r[0], r[1], r[2]))
        .collect();
    PointCloud::new(points).expect("finite points")
}

/// Bidirectional mean-squared chamfer distance between `points` (`n x 3`,
/// differentiable) and a fixed target cloud. Nearest-neighbor assignments are
/// held constant in the backward pass, which is exact almost everywhere.
pub fn chamfer_op(tape: &mut Tape, points: Var, target: &PointCloud) -> Var {
    let pts = rows_to_cloud(tape.value(points));
    let n = pts.len();
    let m = target.len();
    assert!(n > 0 && m > 0, "chamfer_op requires nonempty clouds");
    let value = chamfer(&pts, target).expect("nonempty clouds");
    let fwd_nn = nearest_neighbor_indices(&pts, target).expect("nonempty clouds");
    let bwd_nn = nearest_neighbor_indices(target, &pts).expect("nonempty clouds");
    let target: Vec<Vec3> = target.points.clone();
    tape.custom(
        &[points],
        Array2::from_elem((1, 1), value),
        Box::new(move |g, parents, _| {
            let g = g[(0, 0)];
            let p = parents[0];
            let mut grad = Array2::zeros(p.dim());
            for i in 0..n {
                let pi = Vec3::new(p[(i, 0)], p[(i, 1)], p[(i, 2)]);
                let d = (pi - target[fwd_nn[i] as usize]) * (2.0 / n as Real);
                grad[(i, 0)] += g * d.x;
                grad[(i, 1)] += g * d.y;
                grad[(i, 2)] += g * d.z;
            }
            for (j, &nn) in bwd_nn.iter().enumerate() {
                let i = nn as usize;
                let pi = Vec3::new(p[(i, 0)], p[(i, 1)], p[(i, 2)]);
                let d = (pi - target[j]) * (2.0 / m as Real);
                grad[(i, 0)] += g * d.x;
                grad[(i, 1)] += g * d.y;
                grad[(i, 2)] += g * d.z;
            }
            vec![grad]
        }),
    )
}

/// Smooth Rodrigues coefficients as functions of u = theta^2, together with
/// their derivatives in u. Taylor expansions take over below u = 1e-8 so the
/// map stays differentiable through the identity rotation.
pub(crate) fn rodrigues_u(u: Real) -> (Real, Real, Real, Real) {
    if u < 1e-8 {
        let a = 1.0 - u / 6.0 + u * u / 120.0;
        let b = 0.5 - u / 24.0 + u * u / 720.0;
        let da = -1.0 / 6.0 + u / 60.0;
        let db = -1.0 / 24.0 + u / 360.0;
        (a, b, da, db)
    } else {
        let theta = u.sqrt();
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / u;
        let da = (theta * c - s) / (2.0 * theta * theta * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (2.0 * u * u);
        (a, b, da, db)
    }
}

/// Applies an independent axis-angle rotation to each fixed base point:
/// row i of the output is `R(omega_i) * base_i`. Only `omega` (`n x 3`)
/// receives gradients.
pub fn rodrigues_points_op(tape: &mut Tape, omega: Var, base: &[Vec3]) -> Var {
    let w = tape.value(omega);
    let n = base.len();
    assert_eq!(w.dim(), (n, 3), "omega rows must match base points");
    let mut value = Array2::zeros((n, 3));
    for i in 0..n {
        let om = Vec3::new(w[(i, 0)], w[(i, 1)], w[(i, 2)]);
        let u = om.norm_squared();
        let (a, b, _, _) = rodrigues_u(u);
        let p = base[i];
        let cx = om.cross(&p);
        let dx = om.cross(&cx);
        let out = p + cx * a + dx * b;
        value[(i, 0)] = out.x;
        value[(i, 1)] = out.y;
        value[(i, 2)] = out.z;
    }
    let base: Vec<Vec3> = base.to_vec();
    tape.custom(
        &[omega],
        value,
        Box::new(move |g, parents, _| {
            let w = parents[0];
            let mut grad = Array2::zeros(w.dim());
            for i in 0..base.len() {
                let om = Vec3::new(w[(i, 0)], w[(i, 1)], w[(i, 2)]);
                let gi = Vec3::new(g[(i, 0)], g[(i, 1)], g[(i, 2)]);
                let p = base[i];
                let u = om.norm_squared();
                let (a, b, da, db) = rodrigues_u(u);
                let cx = om.cross(&p);
                let dx = om.cross(&cx);
                for j in 0..3 {
                    let mut e = Vec3::zeros();
                    e[j] = 1.0;
                    // d f / d omega_j with f = p + a(u) (w x p) + b(u) w x (w x p)
                    let du = 2.0 * om[j];
                    let dc = e.cross(&p);
                    let dd = e.cross(&cx) + om.cross(&dc);
                    let df = cx * (da * du) + dc * a + dx * (db * du) + dd * b;
                    grad[(i, j)] = gi.dot(&df);
                }
            }
            vec![grad]
        }),
    )
}

/// Extracts the orthogonal factor of a 3x3 cross-covariance via SVD,
/// including the determinant fix that guarantees a proper rotation. The
/// backward pass differentiates through the SVD with the usual
/// 1/(sigma_j^2 - sigma_i^2) coupling matrix, clamped away from zero for
/// near-degenerate spectra.
pub fn svd_rotation_op(tape: &mut Tape, h: Var) -> crate::error::Result<Var> {
    let hv = tape.value(h);
    assert_eq!(hv.dim(), (3, 3));
    let mut m = Mat3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = hv[(r, c)];
        }
    }
    let svd = nalgebra::SVD::new(m, true, true);
    let u = svd.u.ok_or_else(|| crate::Error::numerical("svd failed to produce U"))?;
    let vt = svd.v_t.ok_or_else(|| crate::Error::numerical("svd failed to produce V^T"))?;
    let sigma = svd.singular_values;
    if sigma[1] <= 1e-9 * sigma[0] {
        return Err(crate::Error::degenerate(
            "cross-covariance is rank deficient; rotation not unique",
        ));
    }
    let v = vt.transpose();
    let det = (v * u.transpose()).determinant();
    let d_last = if det < 0.0 { -1.0 } else { 1.0 };
    let d = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d_last));
    let rot = v * d * u.transpose();
    let mut value = Array2::zeros((3, 3));
    for r in 0..3 {
        for c in 0..3 {
            value[(r, c)] = rot[(r, c)];
        }
    }
    Ok(tape.custom(
        &[h],
        value,
        Box::new(move |g, _, _| {
            let mut gr = Mat3::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    gr[(r, c)] = g[(r, c)];
                }
            }
            // R = V D U^T, D constant on this branch:
            // dL/dV = (dL/dR) U D, dL/dU = (dL/dR)^T V D.
            let dv = gr * u * d;
            let du = gr.transpose() * v * d;
            // SVD backward for square full-rank input, loss independent of
            // the singular values themselves.
            let mut f = Mat3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        let denom = sigma[j] * sigma[j] - sigma[i] * sigma[i];
                        let denom = if denom.abs() < 1e-12 {
                            1e-12_f64.copysign(if denom == 0.0 { 1.0 } else { denom })
                        } else {
                            denom
                        };
                        f[(i, j)] = 1.0 / denom;
                    }
                }
            }
            let s = Mat3::from_diagonal(&Vec3::new(sigma[0], sigma[1], sigma[2]));
            let ut_du = u.transpose() * du;
            let vt_dv = v.transpose() * dv;
            let j_u = f.component_mul(&(ut_du - ut_du.transpose()));
            let j_v = f.component_mul(&(vt_dv - vt_dv.transpose()));
            let dh = u * (j_u * s + s * j_v) * v.transpose();
            let mut grad = Array2::zeros((3, 3));
            for r in 0..3 {
                for c in 0..3 {
                    grad[(r, c)] = dh[(r, c)];
                }
            }
            vec![grad]
        }),
    ))
}

/// Rotates consecutive feature pairs by fixed per-entry angles:
/// `out[2k] = cos*f[2k] - sin*f[2k+1]`, `out[2k+1] = sin*f[2k] + cos*f[2k+1]`.
/// The map is linear in the features, so the backward pass applies the
/// transposed (inverse) rotation to the incoming gradient.
pub fn rotate_pairs_op(
    tape: &mut Tape,
    feats: Var,
    cosines: Array2<f64>,
    sines: Array2<f64>,
) -> Var {
    let f = tape.value(feats);
    let (n, c) = f.dim();
    assert_eq!(c % 2, 0, "feature width must be even");
    assert_eq!(cosines.dim(), (n, c / 2));
    assert_eq!(sines.dim(), (n, c / 2));
    let mut value = Array2::zeros((n, c));
    for i in 0..n {
        for k in 0..c / 2 {
            let (co, si) = (cosines[(i, k)], sines[(i, k)]);
            let (a, b) = (f[(i, 2 * k)], f[(i, 2 * k + 1)]);
            value[(i, 2 * k)] = co * a - si * b;
            value[(i, 2 * k + 1)] = si * a + co * b;
        }
    }
    tape.custom(
        &[feats],
        value,
        Box::new(move |g, parents, _| {
            let (n, c) = parents[0].dim();
            let mut grad = Array2::zeros((n, c));
            for i in 0..n {
                for k in 0..c / 2 {
                    let (co, si) = (cosines[(i, k)], sines[(i, k)]);
                    let (ga, gb) = (g[(i, 2 * k)], g[(i, 2 * k + 1)]);
                    grad[(i, 2 * k)] = co * ga + si * gb;
                    grad[(i, 2 * k + 1)] = -si * ga + co * gb;
                }
            }
            vec![grad]
        }),
    )
}
