//! Grid downsampling and seeded subsampling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};

use super::{PointCloud, Real, Vec3};
use crate::error::{Error, Result};

fn voxel_key(p: &Vec3, voxel: Real) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Replaces each occupied voxel by the centroid of its points.
///
/// Output order follows the first occurrence of each voxel in the input, so
/// the result is deterministic for a fixed input ordering. Per-point features
/// are dropped (voxels mix points).
pub fn voxel_downsample(cloud: &PointCloud, voxel: Real) -> Result<PointCloud> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::invalid(format!("voxel size {voxel} must be positive")));
    }
    if cloud.is_empty() {
        return Err(Error::invalid("voxel downsample of empty cloud"));
    }
    let mut order: Vec<(Vec3, usize)> = Vec::new();
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::new();
    for p in &cloud.points {
        let key = voxel_key(p, voxel);
        match slots.get(&key) {
            Some(&slot) => {
                order[slot].0 += p;
                order[slot].1 += 1;
            }
            None => {
                slots.insert(key, order.len());
                order.push((*p, 1));
            }
        }
    }
    PointCloud::new(order.into_iter().map(|(sum, n)| sum / n as Real).collect())
}

/// Picks one representative input point per occupied voxel: the point closest
/// to the voxel's centroid (ties toward the lower index). Returns indices into
/// the input cloud, in first-occurrence voxel order.
pub fn voxel_downsample_indices(cloud: &PointCloud, voxel: Real) -> Result<Vec<u32>> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::invalid(format!("voxel size {voxel} must be positive")));
    }
    if cloud.is_empty() {
        return Err(Error::invalid("voxel downsample of empty cloud"));
    }
    let mut cells: Vec<Vec<u32>> = Vec::new();
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = voxel_key(p, voxel);
        match slots.get(&key) {
            Some(&slot) => cells[slot].push(i as u32),
            None => {
                slots.insert(key, cells.len());
                cells.push(vec![i as u32]);
            }
        }
    }
    Ok(cells
        .into_iter()
        .map(|members| {
            let centroid: Vec3 = members
                .iter()
                .map(|&i| cloud.points[i as usize])
                .sum::<Vec3>()
                / members.len() as Real;
            let mut best = members[0];
            let mut best_d2 = (cloud.points[best as usize] - centroid).norm_squared();
            for &i in &members[1..] {
                let d2 = (cloud.points[i as usize] - centroid).norm_squared();
                if d2 < best_d2 {
                    best = i;
                    best_d2 = d2;
                }
            }
            best
        })
        .collect())
}

/// Seeded subsample without replacement down to at most `n` points.
///
/// Returns a clone when the cloud already fits. Selected points keep their
/// feature rows and appear in ascending original-index order.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("subsample target of zero points"));
    }
    if cloud.len() <= n {
        return Ok(cloud.clone());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<u32> = (0..cloud.len() as u32).collect();
    // Partial Fisher-Yates: the first n slots become the sample.
    for i in 0..n {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices.truncate(n);
    indices.sort_unstable();
    let points = indices.iter().map(|&i| cloud.points[i as usize]).collect();
    let features = match &cloud.features {
        Some(f) => {
            let mut data = Vec::with_capacity(n * f.width());
            for &i in &indices {
                data.extend_from_slice(f.row(i as usize));
            }
            Some(super::Features::new(f.width(), data)?)
        }
        None => None,
    };
    let mut out = PointCloud::new(points)?;
    out.features = features;
    Ok(out)
}
