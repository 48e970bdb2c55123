//! Exact nearest-neighbor queries over a uniform hash grid.
//!
//! Cells are searched in expanding Chebyshev rings until no closer point can
//! exist, so results match a brute-force scan exactly (ties broken toward the
//! lower point index in both paths).

use std::collections::HashMap;

use super::{Real, Vec3};
use crate::error::{Error, Result};

pub struct NnGrid {
    cell: Real,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vec3>,
    lo: (i64, i64, i64),
    hi: (i64, i64, i64),
}

impl NnGrid {
    /// Builds a grid over `points` with an automatically chosen cell size of
    /// roughly the mean point spacing.
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot build NN grid over empty cloud"));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let diag = (hi - lo).norm();
        let cell = if diag > 0.0 {
            (diag / (points.len() as Real).cbrt()).max(diag * 1e-6)
        } else {
            1.0
        };
        Self::with_cell_size(points, cell)
    }

    pub fn with_cell_size(points: &[Vec3], cell: Real) -> Result<Self> {
        if !(cell > 0.0) || !cell.is_finite() {
            return Err(Error::invalid(format!("grid cell size {cell} must be positive")));
        }
        if points.is_empty() {
            return Err(Error::invalid("cannot build NN grid over empty cloud"));
        }
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let key = Self::key_of(p, cell);
            lo = (lo.0.min(key.0), lo.1.min(key.1), lo.2.min(key.2));
            hi = (hi.0.max(key.0), hi.1.max(key.1), hi.2.max(key.2));
            cells.entry(key).or_default().push(i as u32);
        }
        Ok(NnGrid { cell, cells, points: points.to_vec(), lo, hi })
    }

    fn key_of(p: &Vec3, cell: Real) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Index and squared distance of the exact nearest neighbor of `q`.
    pub fn nearest(&self, q: &Vec3) -> (u32, Real) {
        let center = Self::key_of(q, self.cell);
        let max_ring = {
            let dx = (center.0 - self.lo.0).abs().max((self.hi.0 - center.0).abs());
            let dy = (center.1 - self.lo.1).abs().max((self.hi.1 - center.1).abs());
            let dz = (center.2 - self.lo.2).abs().max((self.hi.2 - center.2).abs());
            dx.max(dy).max(dz)
        };
        let mut best: Option<(u32, Real)> = None;
        for ring in 0..=max_ring {
            if let Some((_, d2)) = best {
                // Any cell at Chebyshev ring r is at least (r-1)*cell away.
                let ring_min = (ring - 1).max(0) as Real * self.cell;
                if ring_min * ring_min > d2 {
                    break;
                }
            }
            self.scan_ring(&center, ring, q, &mut best);
        }
        best.expect("grid holds at least one point")
    }

    fn scan_ring(
        &self,
        center: &(i64, i64, i64),
        ring: i64,
        q: &Vec3,
        best: &mut Option<(u32, Real)>,
    ) {
        let consider = |key: (i64, i64, i64), best: &mut Option<(u32, Real)>| {
            if let Some(idxs) = self.cells.get(&key) {
                for &i in idxs {
                    let d2 = (self.points[i as usize] - q).norm_squared();
                    let better = match *best {
                        None => true,
                        Some((bi, bd2)) => d2 < bd2 || (d2 == bd2 && i < bi),
                    };
                    if better {
                        *best = Some((i, d2));
                    }
                }
            }
        };
        if ring == 0 {
            consider(*center, best);
            return;
        }
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    consider((center.0 + dx, center.1 + dy, center.2 + dz), best);
                }
            }
        }
    }

    /// Indices of all points within `radius` of `q`.
    pub fn within_radius(&self, q: &Vec3, radius: Real) -> Vec<u32> {
        let r2 = radius * radius;
        let center = Self::key_of(q, self.cell);
        let span = (radius / self.cell).ceil() as i64;
        let mut out = Vec::new();
        for dx in -span..=span {
            for dy in -span..=span {
                for dz in -span..=span {
                    let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                    if let Some(idxs) = self.cells.get(&key) {
                        for &i in idxs {
                            if (self.points[i as usize] - q).norm_squared() <= r2 {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}
