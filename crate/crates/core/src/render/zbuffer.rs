//! Exact z-buffer rasterization with perspective-correct interpolation.
//!
//! This is the non-differentiable reference renderer: it produces the depth
//! maps and masks for synthetic data and serves as the agreement oracle for
//! the soft rasterizer. Pixels sample rays through integer coordinates
//! `(u, v) = (col, row)`, matching the backprojection convention.

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Real, Vec3};
use crate::recovery::{BinaryMask, DepthMap};

/// Faces with any vertex at or behind this camera depth are skipped whole.
pub(crate) const ZNEAR: Real = 1e-6;

/// Hard rasterization result. `face_id` is -1 on background pixels; `bary`
/// holds perspective-correct attribute weights for the winning face, so any
/// per-vertex quantity interpolates as `b0*a0 + b1*a1 + b2*a2`.
#[derive(Debug, Clone)]
pub struct ZBuffer {
    pub depth: DepthMap,
    pub mask: BinaryMask,
    pub face_id: Vec<i32>,
    pub bary: Vec<[Real; 3]>,
}

fn cross2(ax: Real, ay: Real, bx: Real, by: Real) -> Real {
    ax * by - ay * bx
}

/// Rasterizes triangles onto the camera `k`, keeping the nearest surface per
/// pixel. Errors when the face list is empty or every face sits behind the
/// camera.
pub fn raster_zbuffer(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    k: &CameraIntrinsics,
) -> Result<ZBuffer> {
    if faces.is_empty() {
        return Err(Error::invalid("cannot rasterize a mesh with no faces"));
    }
    let (w, h) = (k.width, k.height);
    let mut zbuf = vec![Real::INFINITY; w * h];
    let mut face_id = vec![-1i32; w * h];
    let mut bary = vec![[0.0; 3]; w * h];
    let mut any_front = false;

    for (f, face) in faces.iter().enumerate() {
        let tri = [
            vertices[face[0] as usize],
            vertices[face[1] as usize],
            vertices[face[2] as usize],
        ];
        if tri.iter().any(|v| v.z <= ZNEAR) {
            continue;
        }
        any_front = true;
        let p: Vec<[Real; 2]> = tri
            .iter()
            .map(|v| [k.fx * v.x / v.z + k.cx, k.fy * v.y / v.z + k.cy])
            .collect();
        let area2 = cross2(p[1][0] - p[0][0], p[1][1] - p[0][1], p[2][0] - p[0][0], p[2][1] - p[0][1]);
        if area2.abs() < 1e-18 {
            continue; // edge-on in screen space
        }
        let min_x = p.iter().map(|q| q[0]).fold(Real::INFINITY, Real::min);
        let max_x = p.iter().map(|q| q[0]).fold(Real::NEG_INFINITY, Real::max);
        let min_y = p.iter().map(|q| q[1]).fold(Real::INFINITY, Real::min);
        let max_y = p.iter().map(|q| q[1]).fold(Real::NEG_INFINITY, Real::max);
        let c0 = (min_x.ceil().max(0.0)) as i64;
        let c1 = (max_x.floor().min(w as Real - 1.0)) as i64;
        let r0 = (min_y.ceil().max(0.0)) as i64;
        let r1 = (max_y.floor().min(h as Real - 1.0)) as i64;
        if c0 > c1 || r0 > r1 || max_x < 0.0 || max_y < 0.0 {
            continue;
        }
        let inv_area = 1.0 / area2;
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (px, py) = (col as Real, row as Real);
                // Sub-areas share the orientation of the full triangle, so
                // the normalized coordinates are nonnegative inside for
                // either winding.
                let l0 = cross2(p[2][0] - p[1][0], p[2][1] - p[1][1], px - p[1][0], py - p[1][1]) * inv_area;
                let l1 = cross2(p[0][0] - p[2][0], p[0][1] - p[2][1], px - p[2][0], py - p[2][1]) * inv_area;
                let l2 = 1.0 - l0 - l1;
                if l0 < -1e-12 || l1 < -1e-12 || l2 < -1e-12 {
                    continue;
                }
                let wsum = l0 / tri[0].z + l1 / tri[1].z + l2 / tri[2].z;
                if wsum <= 0.0 {
                    continue;
                }
                let z = 1.0 / wsum;
                let idx = row as usize * w + col as usize;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    face_id[idx] = f as i32;
                    // Perspective-correct weights for model-space attributes.
                    bary[idx] = [l0 * z / tri[0].z, l1 * z / tri[1].z, l2 * z / tri[2].z];
                }
            }
        }
    }
    if !any_front {
        return Err(Error::invalid("mesh is entirely behind the camera"));
    }

    let mask_data: Vec<bool> = face_id.iter().map(|&f| f >= 0).collect();
    let depth_data: Vec<Real> = zbuf
        .iter()
        .map(|&z| if z.is_finite() { z } else { 0.0 })
        .collect();
    Ok(ZBuffer {
        depth: DepthMap::new(w, h, depth_data)?,
        mask: BinaryMask::new(w, h, mask_data)?,
        face_id,
        bary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 15.5, 15.5, 32, 32).unwrap()
    }

    #[test]
    fn single_triangle_depth_is_exact() {
        // A triangle in the z = 2 plane: every covered pixel reads exactly 2.
        let verts = vec![
            Vec3::new(-1.0, -1.0, 2.0),
            Vec3::new(1.0, -1.0, 2.0),
            Vec3::new(0.0, 1.0, 2.0),
        ];
        let zb = raster_zbuffer(&verts, &[[0, 1, 2]], &camera()).unwrap();
        assert!(zb.mask.count() > 50);
        for (i, &m) in zb.mask.data.iter().enumerate() {
            if m {
                assert!((zb.depth.data[i] - 2.0).abs() < 1e-12);
                let b = zb.bary[i];
                assert!((b[0] + b[1] + b[2] - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(zb.depth.data[i], 0.0);
            }
        }
    }

    #[test]
    fn nearer_face_wins() {
        let verts = vec![
            // far big triangle at z = 3
            Vec3::new(-2.0, -2.0, 3.0),
            Vec3::new(2.0, -2.0, 3.0),
            Vec3::new(0.0, 2.5, 3.0),
            // near small triangle at z = 1
            Vec3::new(-0.2, -0.2, 1.0),
            Vec3::new(0.2, -0.2, 1.0),
            Vec3::new(0.0, 0.25, 1.0),
        ];
        let zb = raster_zbuffer(&verts, &[[0, 1, 2], [3, 4, 5]], &camera()).unwrap();
        let center = 15 * 32 + 15;
        assert_eq!(zb.face_id[center], 1);
        assert!((zb.depth.data[center] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slanted_plane_interpolates_perspective_correct() {
        // Plane z = 2 + x: pinhole ray through pixel (row=15, col=c) has
        // direction ((c-cx)/fx, (15-cy)/fy, 1); intersection satisfies
        // z = 2 + z*(c-cx)/fx, so z = 2 / (1 - (c-cx)/fx).
        let verts = vec![
            Vec3::new(-1.5, -2.0, 0.5),
            Vec3::new(1.5, -2.0, 3.5),
            Vec3::new(1.5, 2.0, 3.5),
            Vec3::new(-1.5, 2.0, 0.5),
        ];
        let faces = [[0u32, 1, 2], [0, 2, 3]];
        let k = camera();
        let zb = raster_zbuffer(&verts, &faces, &k).unwrap();
        for col in 10..22 {
            let idx = 15 * 32 + col;
            if zb.face_id[idx] >= 0 {
                let expected = 2.0 / (1.0 - (col as Real - k.cx) / k.fx);
                assert!(
                    (zb.depth.data[idx] - expected).abs() < 1e-9,
                    "col {col}: {} vs {expected}",
                    zb.depth.data[idx]
                );
            }
        }
    }

    #[test]
    fn behind_camera_and_empty_meshes_error() {
        let verts = vec![
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(1.0, 0.0, -1.0),
            Vec3::new(0.0, 1.0, -1.0),
        ];
        assert!(raster_zbuffer(&verts, &[[0, 1, 2]], &camera()).is_err());
        assert!(raster_zbuffer(&verts, &[], &camera()).is_err());
    }
}
