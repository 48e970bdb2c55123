//! Soft rasterization kernels: probabilistic coverage/depth forward pass and
//! the exact hand-derived backward pass to camera-frame vertex positions.
//!
//! Coverage of a face at a pixel is `sigmoid(d / sigma)` where `d` is the
//! signed screen-space distance (positive inside) between the pixel center
//! and the projected triangle, measured in normalized device coordinates.
//! Per pixel, the nearest faces composite front to back:
//! `w_k = cov_k * prod_{j<k} (1 - cov_j)`, silhouette `= 1 - prod (1 - cov)`,
//! depth `= sum w_k z_k / sum w_k` wherever the silhouette exceeds 0.5.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Real, Vec3};

use super::zbuffer::ZNEAR;
use super::RenderConfig;

/// One face contributing to a pixel, cached from the forward pass in
/// front-to-back order so the backward pass can replay the compositing.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Hit {
    pub face: u32,
    pub cov: Real,
    pub z: Real,
}

#[derive(Debug, Clone, Copy)]
struct Ndc {
    x: Real,
    y: Real,
    z: Real,
}

fn project_ndc(v: &Vec3, k: &CameraIntrinsics) -> Ndc {
    let u = k.fx * v.x / v.z + k.cx;
    let w = k.fy * v.y / v.z + k.cy;
    Ndc {
        x: 2.0 * u / k.width as Real - 1.0,
        y: 2.0 * w / k.height as Real - 1.0,
        z: v.z,
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cross2(ax: Real, ay: Real, bx: Real, by: Real) -> Real {
    ax * by - ay * bx
}

#[derive(Debug, Clone, Copy)]
enum Closest {
    /// Closest boundary point lies strictly inside edge `e` (from vertex `e`
    /// to vertex `(e+1)%3`) at parameter `t`.
    Edge { e: usize, t: Real },
    /// Closest boundary point is vertex `v`.
    Corner { v: usize },
}

struct PixelGeom {
    /// Signed distance: positive inside the triangle, negative outside.
    d_signed: Real,
    /// Unsigned distance to the boundary.
    dist: Real,
    closest: Closest,
    inside: bool,
    /// Screen-space barycentric of the evaluation point: the pixel itself
    /// when inside, the clamped closest point when outside.
    lam: [Real; 3],
}

fn pixel_geom(px: Real, py: Real, tri: &[[Real; 2]; 3]) -> PixelGeom {
    let mut best_d2 = Real::INFINITY;
    let mut closest = Closest::Corner { v: 0 };
    for e in 0..3 {
        let a = tri[e];
        let b = tri[(e + 1) % 3];
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let (mx, my) = (px - a[0], py - a[1]);
        let len2 = ex * ex + ey * ey;
        let t_raw = if len2 > 0.0 { (mx * ex + my * ey) / len2 } else { 0.0 };
        let t = t_raw.clamp(0.0, 1.0);
        let (qx, qy) = (a[0] + t * ex, a[1] + t * ey);
        let d2 = (px - qx) * (px - qx) + (py - qy) * (py - qy);
        if d2 < best_d2 {
            best_d2 = d2;
            closest = if t <= 0.0 {
                Closest::Corner { v: e }
            } else if t >= 1.0 {
                Closest::Corner { v: (e + 1) % 3 }
            } else {
                Closest::Edge { e, t }
            };
        }
    }
    let dist = best_d2.sqrt();

    let area2 = cross2(tri[1][0] - tri[0][0], tri[1][1] - tri[0][1], tri[2][0] - tri[0][0], tri[2][1] - tri[0][1]);
    let mut inside = false;
    let mut lam = [0.0; 3];
    if area2.abs() > 1e-30 {
        let inv = 1.0 / area2;
        let l0 = cross2(tri[2][0] - tri[1][0], tri[2][1] - tri[1][1], px - tri[1][0], py - tri[1][1]) * inv;
        let l1 = cross2(tri[0][0] - tri[2][0], tri[0][1] - tri[2][1], px - tri[2][0], py - tri[2][1]) * inv;
        let l2 = 1.0 - l0 - l1;
        if l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0 {
            inside = true;
            lam = [l0, l1, l2];
        }
    }
    if !inside {
        match closest {
            Closest::Corner { v } => lam[v] = 1.0,
            Closest::Edge { e, t } => {
                lam[e] = 1.0 - t;
                lam[(e + 1) % 3] = t;
            }
        }
    }
    PixelGeom {
        d_signed: if inside { dist } else { -dist },
        dist,
        closest,
        inside,
        lam,
    }
}

/// Coverage below which a face is dropped from a pixel's hit list; the
/// discarded mass is ~1e-16, below f64 roundoff of the composite.
const COV_FLOOR: Real = 1e-16;

/// Forward soft rasterization. Returns per-pixel silhouette, depth (0 where
/// silhouette <= 0.5), and the cached hit lists for the backward pass.
pub(crate) fn soft_forward(
    verts: &[Vec3],
    faces: &[[u32; 3]],
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<(Vec<Real>, Vec<Real>, Vec<Vec<Hit>>)> {
    if faces.is_empty() {
        return Err(Error::invalid("cannot render a mesh with no faces"));
    }
    let (w, h) = (k.width, k.height);
    let proj: Vec<Ndc> = verts.iter().map(|v| project_ndc(v, k)).collect();

    // Candidate faces per pixel from dilated screen-space bounding boxes.
    // Beyond ~37*sigma the coverage underflows COV_FLOOR, so a sub-pixel
    // dilation is already conservative at practical resolutions.
    let dilate_x = 40.0 * cfg.sigma * w as Real / 2.0 + 0.5;
    let dilate_y = 40.0 * cfg.sigma * h as Real / 2.0 + 0.5;
    let mut candidates: Vec<Vec<u32>> = vec![Vec::new(); w * h];
    let mut any_front = false;
    for (f, face) in faces.iter().enumerate() {
        let vs = [
            proj[face[0] as usize],
            proj[face[1] as usize],
            proj[face[2] as usize],
        ];
        if verts[face[0] as usize].z <= ZNEAR
            || verts[face[1] as usize].z <= ZNEAR
            || verts[face[2] as usize].z <= ZNEAR
        {
            continue;
        }
        any_front = true;
        let to_px = |x: Real| (x + 1.0) * 0.5 * w as Real;
        let to_py = |y: Real| (y + 1.0) * 0.5 * h as Real;
        let xs = [to_px(vs[0].x), to_px(vs[1].x), to_px(vs[2].x)];
        let ys = [to_py(vs[0].y), to_py(vs[1].y), to_py(vs[2].y)];
        let c0 = (xs.iter().cloned().fold(Real::INFINITY, Real::min) - dilate_x).ceil().max(0.0) as i64;
        let c1 = (xs.iter().cloned().fold(Real::NEG_INFINITY, Real::max) + dilate_x).floor().min(w as Real - 1.0) as i64;
        let r0 = (ys.iter().cloned().fold(Real::INFINITY, Real::min) - dilate_y).ceil().max(0.0) as i64;
        let r1 = (ys.iter().cloned().fold(Real::NEG_INFINITY, Real::max) + dilate_y).floor().min(h as Real - 1.0) as i64;
        if c0 > c1 || r0 > r1 {
            continue;
        }
        for row in r0..=r1 {
            for col in c0..=c1 {
                candidates[row as usize * w + col as usize].push(f as u32);
            }
        }
    }
    if !any_front {
        return Err(Error::invalid("mesh is entirely behind the camera"));
    }

    let mut sil = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut hits_all: Vec<Vec<Hit>> = vec![Vec::new(); w * h];
    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            if candidates[idx].is_empty() {
                continue;
            }
            let px = 2.0 * col as Real / w as Real - 1.0;
            let py = 2.0 * row as Real / h as Real - 1.0;
            let mut hits: Vec<Hit> = Vec::new();
            for &f in &candidates[idx] {
                let face = &faces[f as usize];
                let tri = [
                    [proj[face[0] as usize].x, proj[face[0] as usize].y],
                    [proj[face[1] as usize].x, proj[face[1] as usize].y],
                    [proj[face[2] as usize].x, proj[face[2] as usize].y],
                ];
                let geom = pixel_geom(px, py, &tri);
                let cov = sigmoid(geom.d_signed / cfg.sigma);
                if cov < COV_FLOOR {
                    continue;
                }
                let zs = [
                    proj[face[0] as usize].z,
                    proj[face[1] as usize].z,
                    proj[face[2] as usize].z,
                ];
                let wsum = geom.lam[0] / zs[0] + geom.lam[1] / zs[1] + geom.lam[2] / zs[2];
                if wsum <= 0.0 {
                    continue;
                }
                hits.push(Hit { face: f, cov, z: 1.0 / wsum });
            }
            if hits.is_empty() {
                continue;
            }
            // Keep the max_faces largest coverages, then composite in depth
            // order; both sorts break ties by face index for determinism.
            hits.sort_by(|a, b| b.cov.partial_cmp(&a.cov).unwrap().then(a.face.cmp(&b.face)));
            hits.truncate(cfg.max_faces);
            hits.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.face.cmp(&b.face)));
            let mut transmit = 1.0;
            let mut num = 0.0;
            for hit in &hits {
                num += hit.cov * transmit * hit.z;
                transmit *= 1.0 - hit.cov;
            }
            let s = 1.0 - transmit;
            sil[idx] = s;
            depth[idx] = if s > 0.5 { num / s } else { 0.0 };
            hits_all[idx] = hits;
        }
    }
    Ok((sil, depth, hits_all))
}

/// Backward pass: given upstream gradients on silhouette and depth, returns
/// the gradient with respect to camera-frame vertex positions (`n x 3`).
///
/// Depth gradients at sentinel pixels (silhouette <= 0.5) are ignored, since
/// the forward output is the constant 0 there.
pub(crate) fn soft_backward(
    verts: &[Vec3],
    faces: &[[u32; 3]],
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
    hits_all: &[Vec<Hit>],
    g_sil: &[Real],
    g_depth: &[Real],
) -> Array2<f64> {
    let (w, h) = (k.width, k.height);
    let proj: Vec<Ndc> = verts.iter().map(|v| project_ndc(v, k)).collect();
    let mut grad = Array2::zeros((verts.len(), 3));

    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            let hits = &hits_all[idx];
            if hits.is_empty() {
                continue;
            }
            let gs = g_sil[idx];
            let gd = g_depth[idx];
            if gs == 0.0 && gd == 0.0 {
                continue;
            }
            let nk = hits.len();
            let covs: Vec<Real> = hits.iter().map(|hh| hh.cov).collect();
            let zs: Vec<Real> = hits.iter().map(|hh| hh.z).collect();
            let mut prefix = vec![1.0; nk + 1];
            for i in 0..nk {
                prefix[i + 1] = prefix[i] * (1.0 - covs[i]);
            }
            let mut suffix = vec![1.0; nk + 1];
            for i in (0..nk).rev() {
                suffix[i] = suffix[i + 1] * (1.0 - covs[i]);
            }
            let s = 1.0 - prefix[nk];
            let num: Real = (0..nk).map(|kk| covs[kk] * prefix[kk] * zs[kk]).sum();
            let depth_valid = s > 0.5;

            let mut g_cov = vec![0.0; nk];
            let mut g_z = vec![0.0; nk];
            for m in 0..nk {
                g_cov[m] += gs * prefix[m] * suffix[m + 1];
            }
            if depth_valid && gd != 0.0 {
                for kk in 0..nk {
                    g_z[kk] += gd * covs[kk] * prefix[kk] / s;
                }
                for m in 0..nk {
                    // d num / d cov_m, with the transmittance products
                    // recomputed directly to stay finite when cov_j -> 1.
                    let mut dnum = prefix[m] * zs[m];
                    for kk in (m + 1)..nk {
                        let mut pj = 1.0;
                        for (j, cj) in covs.iter().enumerate().take(kk) {
                            if j != m {
                                pj *= 1.0 - cj;
                            }
                        }
                        dnum -= covs[kk] * pj * zs[kk];
                    }
                    let ds = prefix[m] * suffix[m + 1];
                    g_cov[m] += gd * (dnum * s - num * ds) / (s * s);
                }
            }

            let px = 2.0 * col as Real / w as Real - 1.0;
            let py = 2.0 * row as Real / h as Real - 1.0;
            for (kk, hit) in hits.iter().enumerate() {
                if g_cov[kk] == 0.0 && g_z[kk] == 0.0 {
                    continue;
                }
                let face = &faces[hit.face as usize];
                let tri = [
                    [proj[face[0] as usize].x, proj[face[0] as usize].y],
                    [proj[face[1] as usize].x, proj[face[1] as usize].y],
                    [proj[face[2] as usize].x, proj[face[2] as usize].y],
                ];
                let vz = [
                    proj[face[0] as usize].z,
                    proj[face[1] as usize].z,
                    proj[face[2] as usize].z,
                ];
                let geom = pixel_geom(px, py, &tri);
                let mut gtri = [[0.0; 2]; 3]; // gradients on NDC coordinates
                let mut gz_cam = [0.0; 3]; // gradients on camera-frame z

                // Coverage chain: cov = sigmoid(d/sigma).
                let g_d = g_cov[kk] * hit.cov * (1.0 - hit.cov) / cfg.sigma;
                if g_d != 0.0 && geom.dist > 1e-12 {
                    let sgn = if geom.inside { 1.0 } else { -1.0 };
                    match geom.closest {
                        Closest::Corner { v } => {
                            gtri[v][0] += g_d * sgn * (tri[v][0] - px) / geom.dist;
                            gtri[v][1] += g_d * sgn * (tri[v][1] - py) / geom.dist;
                        }
                        Closest::Edge { e, t } => {
                            let i0 = e;
                            let i1 = (e + 1) % 3;
                            let qx = tri[i0][0] + t * (tri[i1][0] - tri[i0][0]);
                            let qy = tri[i0][1] + t * (tri[i1][1] - tri[i0][1]);
                            let nx = (qx - px) / geom.dist;
                            let ny = (qy - py) / geom.dist;
                            gtri[i0][0] += g_d * sgn * (1.0 - t) * nx;
                            gtri[i0][1] += g_d * sgn * (1.0 - t) * ny;
                            gtri[i1][0] += g_d * sgn * t * nx;
                            gtri[i1][1] += g_d * sgn * t * ny;
                        }
                    }
                }

                if g_z[kk] != 0.0 {
                    // z = 1 / (sum_i lam_i / Z_i)
                    let winv = [1.0 / vz[0], 1.0 / vz[1], 1.0 / vz[2]];
                    let zp = hit.z;
                    for i in 0..3 {
                        gz_cam[i] += g_z[kk] * zp * zp * geom.lam[i] * winv[i] * winv[i];
                    }
                    let dz_dlam = [-zp * zp * winv[0], -zp * zp * winv[1], -zp * zp * winv[2]];
                    if geom.inside {
                        // lam_i = C_i / A with C_i = cross(v_k - v_j, p - v_j)
                        // over the cyclic index pattern (i, j, k).
                        let c_sub = |j: usize, kx: usize| -> Real {
                            cross2(tri[kx][0] - tri[j][0], tri[kx][1] - tri[j][1], px - tri[j][0], py - tri[j][1])
                        };
                        let cs = [c_sub(1, 2), c_sub(2, 0), c_sub(0, 1)];
                        let area2 = cs[0] + cs[1] + cs[2];
                        // dC_i/dvert as (vertex, coordinate) entries.
                        let mut dc = [[[0.0; 2]; 3]; 3];
                        for i in 0..3 {
                            let j = (i + 1) % 3;
                            let kx = (i + 2) % 3;
                            dc[i][j][0] = tri[kx][1] - py;
                            dc[i][j][1] = px - tri[kx][0];
                            dc[i][kx][0] = py - tri[j][1];
                            dc[i][kx][1] = tri[j][0] - px;
                        }
                        let mut da = [[0.0; 2]; 3];
                        for v in 0..3 {
                            for c in 0..2 {
                                da[v][c] = dc[0][v][c] + dc[1][v][c] + dc[2][v][c];
                            }
                        }
                        let inv2 = 1.0 / (area2 * area2);
                        for i in 0..3 {
                            let gl = g_z[kk] * dz_dlam[i];
                            if gl == 0.0 {
                                continue;
                            }
                            for v in 0..3 {
                                for c in 0..2 {
                                    gtri[v][c] += gl * (dc[i][v][c] * area2 - cs[i] * da[v][c]) * inv2;
                                }
                            }
                        }
                    } else if let Closest::Edge { e, t } = geom.closest {
                        // lam_{i0} = 1 - t, lam_{i1} = t on the closest edge;
                        // corners have locally constant barycentrics.
                        let i0 = e;
                        let i1 = (e + 1) % 3;
                        let gt = g_z[kk] * (dz_dlam[i1] - dz_dlam[i0]);
                        let (ex, ey) = (tri[i1][0] - tri[i0][0], tri[i1][1] - tri[i0][1]);
                        let (mx, my) = (px - tri[i0][0], py - tri[i0][1]);
                        let len2 = ex * ex + ey * ey;
                        if len2 > 1e-30 {
                            gtri[i0][0] += gt * (-ex - mx + 2.0 * t * ex) / len2;
                            gtri[i0][1] += gt * (-ey - my + 2.0 * t * ey) / len2;
                            gtri[i1][0] += gt * (mx - 2.0 * t * ex) / len2;
                            gtri[i1][1] += gt * (my - 2.0 * t * ey) / len2;
                        }
                    }
                }

                // NDC -> camera-frame chain per vertex.
                for i in 0..3 {
                    let vi = face[i] as usize;
                    let v = &verts[vi];
                    let dx_dx = 2.0 * k.fx / (w as Real * v.z);
                    let dx_dz = -2.0 * k.fx * v.x / (w as Real * v.z * v.z);
                    let dy_dy = 2.0 * k.fy / (h as Real * v.z);
                    let dy_dz = -2.0 * k.fy * v.y / (h as Real * v.z * v.z);
                    grad[(vi, 0)] += gtri[i][0] * dx_dx;
                    grad[(vi, 1)] += gtri[i][1] * dy_dy;
                    grad[(vi, 2)] += gtri[i][0] * dx_dz + gtri[i][1] * dy_dz + gz_cam[i];
                }
            }
        }
    }
    grad
}
