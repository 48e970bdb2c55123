//! Rigid transforms on disk: 12 whitespace-separated numbers (row-major
//! `[R | t]`) or a key-value form with `rotation` and `translation` entries.
//! The reader auto-detects the two layouts.

use std::path::Path;

use super::{read_to_string, write_bytes};
use crate::error::{Error, Result};
use crate::geom::{Real, RigidTransform};

pub fn write_transform_flat(path: &Path, t: &RigidTransform) -> Result<()> {
    let v = t.to_flat();
    let mut out = String::new();
    for row in 0..3 {
        out.push_str(&format!(
            "{:.17e} {:.17e} {:.17e} {:.17e}\n",
            v[row * 4],
            v[row * 4 + 1],
            v[row * 4 + 2],
            v[row * 4 + 3]
        ));
    }
    write_bytes(path, out.as_bytes())
}

pub fn write_transform_kv(path: &Path, t: &RigidTransform) -> Result<()> {
    let r = &t.rotation;
    let mut out = String::from("rotation =");
    for row in 0..3 {
        for col in 0..3 {
            out.push_str(&format!(" {:.17e}", r[(row, col)]));
        }
    }
    out.push_str("\ntranslation =");
    for k in 0..3 {
        out.push_str(&format!(" {:.17e}", t.translation[k]));
    }
    out.push('\n');
    write_bytes(path, out.as_bytes())
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    let text = read_to_string(path)?;
    if text.contains('=') {
        let kv = super::KeyValues::read(path)?;
        let parse_list = |key: &str, n: usize| -> Result<Vec<Real>> {
            let raw = kv
                .get(key)
                .ok_or_else(|| Error::parse(path, format!("missing '{key}'")))?;
            let vals: Vec<Real> = raw
                .split_whitespace()
                .map(|t| t.parse::<Real>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, format!("bad number in '{key}'")))?;
            if vals.len() != n {
                return Err(Error::parse(path, format!("'{key}' needs {n} numbers")));
            }
            Ok(vals)
        };
        let r = parse_list("rotation", 9)?;
        let t = parse_list("translation", 3)?;
        let flat = [
            r[0], r[1], r[2], t[0], r[3], r[4], r[5], t[1], r[6], r[7], r[8], t[2],
        ];
        return RigidTransform::from_flat(&flat)
            .map_err(|e| Error::parse(path, format!("invalid transform: {e}")));
    }
    let vals: Vec<Real> = text
        .split_whitespace()
        .map(|t| t.parse::<Real>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, "expected 12 numbers"))?;
    if vals.len() != 12 {
        return Err(Error::parse(path, format!("expected 12 numbers, found {}", vals.len())));
    }
    let mut flat = [0.0; 12];
    flat.copy_from_slice(&vals);
    RigidTransform::from_flat(&flat).map_err(|e| Error::parse(path, format!("invalid transform: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use approx::assert_abs_diff_eq;

    fn sample() -> RigidTransform {
        RigidTransform::from_axis_angle(&Vec3::new(0.2, -0.7, 0.4), Vec3::new(0.03, 0.2, -1.5))
    }

    #[test]
    fn flat_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let t = sample();
        write_transform_flat(&path, &t).unwrap();
        let back = read_transform(&path).unwrap();
        assert_abs_diff_eq!(back.rotation, t.rotation, epsilon = 1e-15);
        assert_abs_diff_eq!(back.translation, t.translation, epsilon = 1e-15);
    }

    #[test]
    fn kv_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kv");
        let t = sample();
        write_transform_kv(&path, &t).unwrap();
        let back = read_transform(&path).unwrap();
        assert_abs_diff_eq!(back.rotation, t.rotation, epsilon = 1e-15);
        assert_abs_diff_eq!(back.translation, t.translation, epsilon = 1e-15);
    }

    #[test]
    fn non_rotation_content_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "1 0 0 0  0 2 0 0  0 0 1 0\n").unwrap();
        assert!(read_transform(&path).is_err());
    }
}
