//! Minimal ASCII PLY reader/writer for point clouds and triangle meshes.
//!
//! The reader accepts `float` or `double` vertex coordinates, tolerates extra
//! vertex properties (they are skipped positionally), and requires triangular
//! faces. The writer always emits `double` coordinates with full precision.

use std::path::Path;

use super::{read_to_string, write_bytes};
use crate::error::{Error, Result};
use crate::geom::{PointCloud, TriMesh, Vec3};

pub fn write_ply_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_ply(path, &cloud.points, None)
}

pub fn write_ply_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    write_ply(path, &mesh.vertices, Some(&mesh.faces))
}

fn write_ply(path: &Path, vertices: &[Vec3], faces: Option<&[[u32; 3]]>) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", vertices.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if let Some(f) = faces {
        out.push_str(&format!("element face {}\n", f.len()));
        out.push_str("property list uchar int vertex_indices\n");
    }
    out.push_str("end_header\n");
    for v in vertices {
        out.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", v.x, v.y, v.z));
    }
    if let Some(fs) = faces {
        for f in fs {
            out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
        }
    }
    write_bytes(path, out.as_bytes())
}

struct PlyHeader {
    vertex_count: usize,
    face_count: usize,
    /// Positions of x, y, z among the vertex properties.
    xyz: [usize; 3],
    vertex_props: usize,
}

fn parse_header<'a>(
    path: &Path,
    lines: &mut impl Iterator<Item = &'a str>,
) -> Result<PlyHeader> {
    let mut magic_seen = false;
    let mut format_seen = false;
    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current: Option<&str> = None;

    for raw in lines {
        let line = raw.trim();
        if line.is_empty() || line.starts_with("comment") {
            continue;
        }
        if !magic_seen {
            if line != "ply" {
                return Err(Error::parse(path, "missing 'ply' magic"));
            }
            magic_seen = true;
            continue;
        }
        if line == "end_header" {
            if !format_seen {
                return Err(Error::parse(path, "missing format line"));
            }
            let find = |name: &str| {
                vertex_props
                    .iter()
                    .position(|p| p == name)
                    .ok_or_else(|| Error::parse(path, format!("vertex property '{name}' missing")))
            };
            return Ok(PlyHeader {
                vertex_count,
                face_count,
                xyz: [find("x")?, find("y")?, find("z")?],
                vertex_props: vertex_props.len(),
            });
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("ascii") {
                    return Err(Error::parse(path, "only ascii PLY is supported"));
                }
                format_seen = true;
            }
            Some("element") => {
                let kind = parts.next().unwrap_or("");
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(path, "bad element count"))?;
                match kind {
                    "vertex" => vertex_count = count,
                    "face" => face_count = count,
                    _ => {}
                }
                current = match kind {
                    "vertex" => Some("vertex"),
                    "face" => Some("face"),
                    _ => Some("other"),
                };
            }
            Some("property") => {
                if current == Some("vertex") {
                    let rest: Vec<&str> = parts.collect();
                    if rest.first() == Some(&"list") {
                        return Err(Error::parse(path, "list property on vertices unsupported"));
                    }
                    if let Some(name) = rest.last() {
                        vertex_props.push((*name).to_string());
                    }
                }
            }
            _ => {}
        }
    }
    Err(Error::parse(path, "header never terminated with end_header"))
}

fn parse_body(
    path: &Path,
    text: &str,
    want_faces: bool,
) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    let mut lines = text.lines();
    let header = parse_header(path, &mut lines)?;

    let mut vertices = Vec::with_capacity(header.vertex_count);
    let mut data_lines = lines.filter(|l| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with("comment")
    });
    for i in 0..header.vertex_count {
        let line = data_lines
            .next()
            .ok_or_else(|| Error::parse(path, format!("vertex {i} missing")))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < header.vertex_props {
            return Err(Error::parse(path, format!("vertex {i} has too few columns")));
        }
        let get = |k: usize| -> Result<f64> {
            vals[header.xyz[k]]
                .parse()
                .map_err(|_| Error::parse(path, format!("vertex {i} has a bad coordinate")))
        };
        vertices.push(Vec3::new(get(0)?, get(1)?, get(2)?));
    }

    let mut faces = Vec::with_capacity(header.face_count);
    if want_faces {
        for i in 0..header.face_count {
            let line = data_lines
                .next()
                .ok_or_else(|| Error::parse(path, format!("face {i} missing")))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.first() != Some(&"3") || vals.len() < 4 {
                return Err(Error::parse(path, format!("face {i} is not a triangle")));
            }
            let mut f = [0u32; 3];
            for k in 0..3 {
                f[k] = vals[k + 1]
                    .parse()
                    .map_err(|_| Error::parse(path, format!("face {i} has a bad index")))?;
            }
            faces.push(f);
        }
    }
    Ok((vertices, faces))
}

pub fn read_ply_cloud(path: &Path) -> Result<PointCloud> {
    let text = read_to_string(path)?;
    let (vertices, _) = parse_body(path, &text, false)?;
    if vertices.is_empty() {
        return Err(Error::parse(path, "cloud has no vertices"));
    }
    PointCloud::new(vertices)
}

pub fn read_ply_mesh(path: &Path) -> Result<TriMesh> {
    let text = read_to_string(path)?;
    let (vertices, faces) = parse_body(path, &text, true)?;
    if faces.is_empty() {
        return Err(Error::parse(path, "mesh has no faces"));
    }
    TriMesh::new(vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cloud_round_trip_preserves_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = PointCloud::new(vec![
            Vec3::new(0.123456789012345, -7.5e-4, 2.0),
            Vec3::new(1.0 / 3.0, 0.0, -9.25),
        ])
        .unwrap();
        write_ply_cloud(&path, &cloud).unwrap();
        let back = read_ply_cloud(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-16);
        }
    }

    #[test]
    fn mesh_round_trip_preserves_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mesh = TriMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        write_ply_mesh(&path, &mesh).unwrap();
        let back = read_ply_mesh(&path).unwrap();
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.vertices.len(), 4);
    }

    #[test]
    fn reader_skips_extra_vertex_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.ply");
        let text = "ply\nformat ascii 1.0\ncomment made elsewhere\n\
                    element vertex 2\nproperty float nx\nproperty float x\n\
                    property float y\nproperty float z\nend_header\n\
                    9.0 1.0 2.0 3.0\n9.0 4.0 5.0 6.0\n";
        std::fs::write(&path, text).unwrap();
        let cloud = read_ply_cloud(&path).unwrap();
        assert_abs_diff_eq!(cloud.points[0], Vec3::new(1.0, 2.0, 3.0));
        assert_abs_diff_eq!(cloud.points[1], Vec3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn malformed_header_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(matches!(read_ply_cloud(&path), Err(Error::Parse { .. })));
    }
}
