//! Rotary positional encoding: a per-point block-diagonal orthonormal
//! operator whose 2x2 rotation blocks are driven by the point coordinates
//! at geometrically decaying frequencies.
//!
//! Feature width `c` splits into `c/6` frequency blocks; block `k`
//! (1-based) uses `alpha_k = 10000^(-6(k-1)/c)` and rotates three feature
//! pairs by `x*alpha_k`, `y*alpha_k`, `z*alpha_k` respectively.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geom::{Real, Vec3};

fn check_width(c: usize) -> Result<()> {
    if c == 0 || c % 6 != 0 {
        return Err(Error::invalid(format!(
            "rotary width must be a positive multiple of 6, got {c}"
        )));
    }
    Ok(())
}

/// Per-pair rotation angles for every point: pair `j` belongs to frequency
/// block `j/3` and coordinate axis `j%3`.
fn pair_angle(p: &Vec3, j: usize, c: usize) -> Real {
    let block = (j / 3) as Real;
    let alpha = 10000.0_f64.powf(-6.0 * block / c as Real);
    let coord = match j % 3 {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    };
    coord * alpha
}

/// Cosine/sine tables (`n x c/2` each) for applying the rotary operator to
/// consecutive feature pairs.
pub fn rotary_tables(points: &[Vec3], c: usize) -> Result<(Array2<Real>, Array2<Real>)> {
    check_width(c)?;
    let n = points.len();
    let half = c / 2;
    let mut cos = Array2::zeros((n, half));
    let mut sin = Array2::zeros((n, half));
    for (i, p) in points.iter().enumerate() {
        for j in 0..half {
            let a = pair_angle(p, j, c);
            cos[(i, j)] = a.cos();
            sin[(i, j)] = a.sin();
        }
    }
    Ok((cos, sin))
}

/// Dense `c x c` rotary operator for a single point (reference form used by
/// the tests; the pipeline applies the factored cos/sin tables instead).
pub fn rotary_matrix(p: &Vec3, c: usize) -> Result<DMatrix<Real>> {
    check_width(c)?;
    let mut m = DMatrix::zeros(c, c);
    for j in 0..c / 2 {
        let a = pair_angle(p, j, c);
        let (s, co) = a.sin_cos();
        m[(2 * j, 2 * j)] = co;
        m[(2 * j, 2 * j + 1)] = -s;
        m[(2 * j + 1, 2 * j)] = s;
        m[(2 * j + 1, 2 * j + 1)] = co;
    }
    Ok(m)
}

/// Applies the rotary operator to a feature matrix without a tape; test-side
/// reference for the tape operator.
#[cfg(test)]
pub(crate) fn rotary_apply(
    feats: &Array2<Real>,
    cos: &Array2<Real>,
    sin: &Array2<Real>,
) -> Array2<Real> {
    let (n, c) = feats.dim();
    assert_eq!(cos.dim(), (n, c / 2));
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for j in 0..c / 2 {
            let (co, si) = (cos[(i, j)], sin[(i, j)]);
            let (a, b) = (feats[(i, 2 * j)], feats[(i, 2 * j + 1)]);
            out[(i, 2 * j)] = co * a - si * b;
            out[(i, 2 * j + 1)] = si * a + co * b;
        }
    }
    out
}
