//! Procedural organ-like meshes: subdivided icospheres stretched into
//! seeded ellipsoids with smooth low-frequency radial bumps.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{Real, TriMesh, Vec3};

fn icosahedron() -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let p = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, p, 0.0),
        (1.0, p, 0.0),
        (-1.0, -p, 0.0),
        (1.0, -p, 0.0),
        (0.0, -1.0, p),
        (0.0, 1.0, p),
        (0.0, -1.0, -p),
        (0.0, 1.0, -p),
        (p, 0.0, -1.0),
        (p, 0.0, 1.0),
        (-p, 0.0, -1.0),
        (-p, 0.0, 1.0),
    ];
    let vertices = raw
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (vertices, faces)
}

/// Unit-radius sphere mesh from `subdiv` loop subdivisions of an icosahedron
/// (12 vertices at level 0, 2562 at level 4).
pub fn icosphere(subdiv: u32) -> TriMesh {
    let (mut vertices, mut faces) = icosahedron();
    for _ in 0..subdiv {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for e in 0..3 {
                let a = f[e];
                let b = f[(e + 1) % 3];
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (vertices[a as usize] + vertices[b as usize]).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }
    TriMesh::new(vertices, faces).expect("icosphere construction is valid")
}

pub(crate) fn unit_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: Real = rng.gen_range(-1.0..1.0);
    let phi: Real = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Deterministic organ-like closed mesh: a seeded ellipsoid (semi-axes in
/// desk-scale meter ranges) modulated by eight smooth Gaussian radial bumps.
pub fn gen_organ(seed: u64) -> TriMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Real = rng.gen_range(0.05..=0.075);
    let b: Real = rng.gen_range(0.035..=0.055);
    let c: Real = rng.gen_range(0.025..=0.042);
    let bumps: Vec<(Vec3, Real, Real)> = (0..8)
        .map(|_| {
            let dir = unit_direction(&mut rng);
            let width: Real = rng.gen_range(0.35..=0.7);
            let amp: Real = rng.gen_range(0.04..=0.10);
            (dir, width, amp)
        })
        .collect();

    let sphere = icosphere(4);
    let vertices = sphere
        .vertices
        .iter()
        .map(|u| {
            let mut factor = 1.0;
            for (dir, width, amp) in &bumps {
                let ang = u.dot(dir).clamp(-1.0, 1.0).acos();
                factor += amp * (-ang * ang / (2.0 * width * width)).exp();
            }
            Vec3::new(a * u.x, b * u.y, c * u.z) * factor
        })
        .collect();
    TriMesh::new(vertices, sphere.faces).expect("organ mesh is valid")
}
