//! Analytic ground-truth deformations: a smooth bend whose rotation angle
//! grows linearly along an axis, plus an optional Gaussian radial bulge.
//!
//! The bend rotates each point about the bend axis by an angle proportional
//! to the point's coordinate along that same axis, so the coordinate that
//! drives the angle is preserved and negating the rate gives the exact
//! inverse. The bulge pushes points radially away from a center with a
//! Gaussian falloff; for the small amplitudes used here it stays injective.

use crate::geom::{Real, RigidTransform, TriMesh, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct BulgeParams {
    /// Center of the radial push, in model coordinates (meters).
    pub center: Vec3,
    /// Peak displacement in meters.
    pub amplitude: Real,
    /// Gaussian falloff width in meters.
    pub width: Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformParams {
    /// Unit axis of the bend; also the coordinate direction that drives it.
    pub axis: Vec3,
    /// Point on the axis with zero bend angle.
    pub pivot: Vec3,
    /// Bend angle per meter of travel along the axis (radians / m).
    pub rate: Real,
    pub bulge: Option<BulgeParams>,
}

impl DeformParams {
    pub fn identity() -> Self {
        DeformParams {
            axis: Vec3::new(0.0, 0.0, 1.0),
            pivot: Vec3::zeros(),
            rate: 0.0,
            bulge: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rate == 0.0 && self.bulge.is_none()
    }

    /// Exact inverse of the bend component. Only valid when no bulge is set.
    pub fn negated_bend(&self) -> Self {
        DeformParams {
            axis: self.axis,
            pivot: self.pivot,
            rate: -self.rate,
            bulge: None,
        }
    }
}

/// Displaces a single point by the bend followed by the optional bulge.
pub fn deform_point(p: &Vec3, params: &DeformParams) -> Vec3 {
    let rel = p - params.pivot;
    let s = rel.dot(&params.axis);
    let mut out = if params.rate == 0.0 {
        *p
    } else {
        let angle = params.rate * s;
        let rot = RigidTransform::from_axis_angle(&(params.axis * angle), Vec3::zeros());
        params.pivot + rot.rotation * rel
    };
    if let Some(b) = &params.bulge {
        let d = out - b.center;
        let r = d.norm();
        if r > 1e-9 {
            let push = b.amplitude * (-r * r / (2.0 * b.width * b.width)).exp();
            out += d * (push / r);
        }
    }
    out
}

/// Applies the deformation to every vertex; topology is unchanged.
pub fn deform_gt(mesh: &TriMesh, params: &DeformParams) -> TriMesh {
    if params.is_identity() {
        return mesh.clone();
    }
    let vertices = mesh.vertices.iter().map(|v| deform_point(v, params)).collect();
    TriMesh::new(vertices, mesh.faces.clone()).expect("deformation preserves topology")
}
