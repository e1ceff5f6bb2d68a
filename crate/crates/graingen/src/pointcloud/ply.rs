//! ASCII PLY ingest and export.
//!
//! Reads the vertex list (always) and the face list (when present); faces
//! feed the node-embedding graph and the morphology pipeline.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{vec3, Vec3};

/// Vertices plus optional triangle faces parsed from a PLY file.
#[derive(Debug, Clone)]
pub struct PlyContents {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyContents> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_ply(&text, &path.display().to_string())
}

pub fn parse_ply(text: &str, path: &str) -> Result<PlyContents> {
    let mut lines = text.lines();
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing `ply` magic line"));
    }

    let mut vertex_count = None;
    let mut face_count = 0usize;
    let mut current_element: Option<String> = None;
    let mut vertex_props: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("ascii") {
                    return Err(bad("only ascii PLY is supported"));
                }
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = parts.next().ok_or_else(|| bad("element without name"))?;
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad("element without count"))?;
                match name {
                    "vertex" => vertex_count = Some(count),
                    "face" => face_count = count,
                    _ => {}
                }
                current_element = Some(name.to_string());
            }
            Some("property") => {
                if current_element.as_deref() == Some("vertex") {
                    if let Some(name) = parts.last() {
                        vertex_props.push(name.to_string());
                    }
                }
            }
            Some(_) | None => {}
        }
    }
    let vertex_count = vertex_count.ok_or_else(|| bad("no vertex element"))?;
    let find = |axis: &str| vertex_props.iter().position(|p| p == axis);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("vertex element lacks x/y/z properties")),
    };

    let mut vertices = Vec::with_capacity(vertex_count);
    for _ in 0..vertex_count {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let fields: Vec<f64> =
            line.split_whitespace().map(|f| f.parse().unwrap_or(f64::NAN)).collect();
        if fields.len() < vertex_props.len() {
            return Err(bad("vertex row has too few fields"));
        }
        let v = vec3(fields[ix], fields[iy], fields[iz]);
        if !v.is_finite() {
            return Err(bad("non-finite vertex coordinate"));
        }
        vertices.push(v);
    }

    let mut faces = Vec::with_capacity(face_count);
    for _ in 0..face_count {
        let line = lines.next().ok_or_else(|| bad("truncated face list"))?;
        let fields: Vec<usize> =
            line.split_whitespace().filter_map(|f| f.parse().ok()).collect();
        match fields.as_slice() {
            [3, a, b, c] => {
                if *a >= vertex_count || *b >= vertex_count || *c >= vertex_count {
                    return Err(bad("face index out of range"));
                }
                faces.push([*a, *b, *c]);
            }
            [n, rest @ ..] if *n == rest.len() && *n > 3 => {
                // Fan-triangulate larger polygons.
                for k in 1..(rest.len() - 1) {
                    faces.push([rest[0], rest[k], rest[k + 1]]);
                }
            }
            _ => return Err(bad("malformed face row")),
        }
    }
    Ok(PlyContents { vertices, faces })
}

pub fn write_ply(path: impl AsRef<Path>, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", vertices.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if !faces.is_empty() {
        out.push_str(&format!("element face {}\n", faces.len()));
        out.push_str("property list uchar int vertex_indices\n");
    }
    out.push_str("end_header\n");
    for v in vertices {
        out.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    for f in faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_mesh() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\n\
                    property float x\nproperty float y\nproperty float z\n\
                    element face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let ply = parse_ply(text, "mem").unwrap();
        assert_eq!(ply.vertices.len(), 3);
        assert_eq!(ply.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn quad_faces_are_triangulated() {
        let text = "ply\nformat ascii 1.0\nelement vertex 4\n\
                    property float x\nproperty float y\nproperty float z\n\
                    element face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let ply = parse_ply(text, "mem").unwrap();
        assert_eq!(ply.faces.len(), 2);
    }

    #[test]
    fn rejects_binary_and_truncation() {
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n", "mem").is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 2\n\
                     property float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(parse_ply(short, "mem").is_err());
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grain.ply");
        let verts = vec![vec3(0.5, -1.25, 2.0), vec3(1.0, 2.0, 3.0), vec3(-1.0, 0.0, 0.25)];
        let faces = vec![[0usize, 1, 2]];
        write_ply(&path, &verts, &faces).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.faces, faces);
        for (a, b) in back.vertices.iter().zip(&verts) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }
}
