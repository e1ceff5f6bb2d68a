//! Surface reconstruction: point normals, ball pivoting, hole closing,
//! and mesh volume.

mod ball_pivot;

pub use ball_pivot::{ball_pivot, BallPivotConfig};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geom::{vec3, SymMat3, Vec3};
use crate::pointcloud::PointCloud;

/// Triangulated grain surface. Faces are counterclockwise seen from
/// outside; a watertight mesh has every edge shared by exactly two faces
/// with opposite orientations.
#[derive(Debug, Clone)]
pub struct GrainMesh {
    pub id: String,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    watertight: bool,
}

impl GrainMesh {
    pub fn new(id: impl Into<String>, vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        let mut mesh = GrainMesh { id: id.into(), vertices, faces, watertight: false };
        mesh.refresh_watertight();
        mesh
    }

    pub fn is_watertight(&self) -> bool {
        self.watertight
    }

    fn refresh_watertight(&mut self) {
        self.watertight = !self.faces.is_empty() && self.boundary_directed_edges().is_empty() && {
            // Opposite-direction pairing: every directed edge appears once.
            let mut seen = HashMap::new();
            let mut manifold = true;
            for f in &self.faces {
                for (a, b) in face_edges(f) {
                    if seen.insert((a, b), ()).is_some() {
                        manifold = false;
                    }
                }
            }
            manifold
        };
    }

    /// Directed edges that lack an opposite-direction partner.
    pub fn boundary_directed_edges(&self) -> Vec<(usize, usize)> {
        let mut count: HashMap<(usize, usize), i32> = HashMap::new();
        for f in &self.faces {
            for (a, b) in face_edges(f) {
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let mut boundary = Vec::new();
        for f in &self.faces {
            for (a, b) in face_edges(f) {
                if count[&(a.min(b), a.max(b))] == 1 {
                    boundary.push((a, b));
                }
            }
        }
        boundary.sort_unstable();
        boundary
    }

    /// Area and unit outward normal of face `i`; area may be zero for a
    /// degenerate face.
    pub fn face_area_normal(&self, i: usize) -> (f64, Vec3) {
        let [a, b, c] = self.faces[i];
        let cross = (self.vertices[b] - self.vertices[a]).cross(self.vertices[c] - self.vertices[a]);
        let norm = cross.norm();
        if norm == 0.0 {
            (0.0, Vec3::ZERO)
        } else {
            (0.5 * norm, cross * (1.0 / norm))
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = Vec3::ZERO;
        for &v in &self.vertices {
            c += v;
        }
        c * (1.0 / self.vertices.len().max(1) as f64)
    }
}

fn face_edges(f: &[usize; 3]) -> [(usize, usize); 3] {
    [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
}

/// Per-point unit normals from the covariance of the 5 nearest neighbors,
/// oriented away from the cloud centroid. Points whose centroid direction
/// is ambiguous (|cos| < 0.1) take their orientation from already-oriented
/// neighbors via breadth-first propagation.
pub fn estimate_normals(cloud: &PointCloud) -> Result<Vec<Vec3>> {
    const K: usize = 5;
    let n = cloud.len();
    if n < K + 1 {
        return Err(Error::Geometry(format!(
            "normal estimation needs at least {} points, got {n}",
            K + 1
        )));
    }
    let pts = &cloud.points;
    // k nearest neighbors by brute force; cloud sizes here are ~600.
    let mut neighbor_ids = vec![[0usize; K]; n];
    let mut coincident = Vec::new();
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((pts[i] - pts[j]).norm_sq(), j))
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (slot, &(d, j)) in neighbor_ids[i].iter_mut().zip(dists.iter()) {
            *slot = j;
            if d == 0.0 {
                coincident.push((i, j));
            }
        }
    }
    if !coincident.is_empty() {
        return Err(Error::Geometry(format!(
            "coincident points in normal neighborhoods: {coincident:?}"
        )));
    }

    let centroid = cloud.centroid();
    let mut normals = vec![Vec3::ZERO; n];
    let mut oriented = vec![false; n];
    for i in 0..n {
        let mut local = vec![pts[i]];
        local.extend(neighbor_ids[i].iter().map(|&j| pts[j]));
        let mean = local.iter().fold(Vec3::ZERO, |acc, &p| acc + p) * (1.0 / local.len() as f64);
        let mut cov = SymMat3::zero();
        for &p in &local {
            cov.add_outer(p - mean, 1.0);
        }
        let (_, vecs) = cov.eigen();
        let normal = vecs[2].normalized();
        let outward = (pts[i] - centroid).normalized();
        let cos = normal.dot(outward);
        if cos.abs() >= 0.1 {
            normals[i] = if cos >= 0.0 { normal } else { -normal };
            oriented[i] = true;
        } else {
            normals[i] = normal;
        }
    }

    // Spanning propagation from confident points into ambiguous ones.
    let mut queue: std::collections::VecDeque<usize> =
        (0..n).filter(|&i| oriented[i]).collect();
    while let Some(i) = queue.pop_front() {
        for &j in &neighbor_ids[i] {
            if !oriented[j] {
                if normals[j].dot(normals[i]) < 0.0 {
                    normals[j] = -normals[j];
                }
                oriented[j] = true;
                queue.push_back(j);
            }
        }
    }
    Ok(normals)
}

/// Close boundary loops of up to `max_boundary_edges` edges with a centroid
/// fan. Returns the sizes of loops left open.
pub fn close_holes(mesh: &mut GrainMesh, max_boundary_edges: usize) -> Vec<usize> {
    let boundary = mesh.boundary_directed_edges();
    if boundary.is_empty() {
        return Vec::new();
    }
    // Follow directed boundary edges into cycles.
    let mut next: HashMap<usize, usize> = HashMap::new();
    for &(a, b) in &boundary {
        next.insert(a, b);
    }
    let mut visited: HashMap<usize, bool> = HashMap::new();
    let mut left_open = Vec::new();
    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    for start in starts {
        if visited.get(&start).copied().unwrap_or(false) {
            continue;
        }
        let mut loop_vertices = vec![start];
        visited.insert(start, true);
        let mut cursor = match next.get(&start) {
            Some(&b) => b,
            None => continue,
        };
        let mut closed = false;
        while loop_vertices.len() <= boundary.len() {
            if cursor == start {
                closed = true;
                break;
            }
            visited.insert(cursor, true);
            loop_vertices.push(cursor);
            match next.get(&cursor) {
                Some(&b) => cursor = b,
                None => break,
            }
        }
        if !closed {
            left_open.push(loop_vertices.len());
            continue;
        }
        if loop_vertices.len() > max_boundary_edges {
            left_open.push(loop_vertices.len());
            continue;
        }
        // New vertex at the loop centroid; fan triangles oppose the rim
        // direction so orientation stays consistent.
        let centroid = loop_vertices.iter().fold(Vec3::ZERO, |acc, &v| acc + mesh.vertices[v])
            * (1.0 / loop_vertices.len() as f64);
        let c_idx = mesh.vertices.len();
        mesh.vertices.push(centroid);
        for w in 0..loop_vertices.len() {
            let a = loop_vertices[w];
            let b = loop_vertices[(w + 1) % loop_vertices.len()];
            mesh.faces.push([b, a, c_idx]);
        }
    }
    mesh.refresh_watertight();
    left_open
}

/// Signed-tetrahedron volume of a watertight mesh.
pub fn mesh_volume(mesh: &GrainMesh) -> Result<f64> {
    if !mesh.is_watertight() {
        return Err(Error::Geometry(format!("mesh {} is not watertight", mesh.id)));
    }
    let mut six_v = 0.0;
    for f in &mesh.faces {
        let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        six_v += a.cross(b).dot(c);
    }
    let volume = six_v / 6.0;
    if volume <= 0.0 {
        return Err(Error::Geometry(format!(
            "mesh {}: negative signed volume {volume}; face orientation is inverted",
            mesh.id
        )));
    }
    Ok(volume)
}

/// Subdivided icosahedron projected onto a sphere of the given radius.
pub fn icosphere(subdivisions: usize, radius: f64) -> GrainMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices = vec![
        vec3(-1.0, phi, 0.0),
        vec3(1.0, phi, 0.0),
        vec3(-1.0, -phi, 0.0),
        vec3(1.0, -phi, 0.0),
        vec3(0.0, -1.0, phi),
        vec3(0.0, 1.0, phi),
        vec3(0.0, -1.0, -phi),
        vec3(0.0, 1.0, -phi),
        vec3(phi, 0.0, -1.0),
        vec3(phi, 0.0, 1.0),
        vec3(-phi, 0.0, -1.0),
        vec3(-phi, 0.0, 1.0),
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for v in &mut vertices {
        *v = v.normalized();
    }
    for _ in 0..subdivisions {
        let mut midpoint_cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0usize; 3];
            for (k, (a, b)) in face_edges(f).into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                mids[k] = *midpoint_cache.entry(key).or_insert_with(|| {
                    let m = ((vertices[a] + vertices[b]) * 0.5).normalized();
                    vertices.push(m);
                    vertices.len() - 1
                });
            }
            let [a, b, c] = *f;
            let [ab, bc, ca] = mids;
            new_faces.push([a, ab, ca]);
            new_faces.push([b, bc, ab]);
            new_faces.push([c, ca, bc]);
            new_faces.push([ab, bc, ca]);
        }
        faces = new_faces;
    }
    for v in &mut vertices {
        *v = *v * radius;
    }
    GrainMesh::new("icosphere", vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::synthetic::fibonacci_sphere;
    use crate::pointcloud::ScaleState;

    fn unit_cube_mesh() -> GrainMesh {
        // 8 corners, 12 outward-wound triangles.
        let v = vec![
            vec3(0.0, 0.0, 0.0), vec3(1.0, 0.0, 0.0), vec3(1.0, 1.0, 0.0), vec3(0.0, 1.0, 0.0),
            vec3(0.0, 0.0, 1.0), vec3(1.0, 0.0, 1.0), vec3(1.0, 1.0, 1.0), vec3(0.0, 1.0, 1.0),
        ];
        let f = vec![
            [0, 2, 1], [0, 3, 2], // bottom (z = 0, normal -z)
            [4, 5, 6], [4, 6, 7], // top
            [0, 1, 5], [0, 5, 4], // front (y = 0)
            [1, 2, 6], [1, 6, 5], // right
            [2, 3, 7], [2, 7, 6], // back
            [3, 0, 4], [3, 4, 7], // left
        ];
        GrainMesh::new("cube", v, f)
    }

    #[test]
    fn cube_is_watertight_with_unit_volume() {
        let mesh = unit_cube_mesh();
        assert!(mesh.is_watertight());
        assert!((mesh_volume(&mesh).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_orientation_is_detected() {
        let mut mesh = unit_cube_mesh();
        for f in &mut mesh.faces {
            f.swap(1, 2);
        }
        mesh.refresh_watertight();
        assert!(mesh.is_watertight());
        assert!(mesh_volume(&mesh).is_err());
    }

    #[test]
    fn icosphere_volume_close_to_analytic() {
        let mesh = icosphere(3, 1.0);
        assert!(mesh.is_watertight());
        let v = mesh_volume(&mesh).unwrap();
        let analytic = 4.0 * std::f64::consts::PI / 3.0;
        assert!((v - analytic).abs() / analytic < 0.02, "volume {v} vs {analytic}");
    }

    #[test]
    fn volume_scales_cubically_and_ignores_translation() {
        let mesh = icosphere(2, 1.0);
        let v1 = mesh_volume(&mesh).unwrap();
        let scaled = GrainMesh::new(
            "s",
            mesh.vertices.iter().map(|&p| p * 2.5).collect(),
            mesh.faces.clone(),
        );
        let v2 = mesh_volume(&scaled).unwrap();
        assert!((v2 / v1 - 2.5f64.powi(3)).abs() < 1e-9);
        let moved = GrainMesh::new(
            "m",
            mesh.vertices.iter().map(|&p| p + vec3(10.0, -4.0, 2.0)).collect(),
            mesh.faces.clone(),
        );
        let v3 = mesh_volume(&moved).unwrap();
        assert!((v3 - v1).abs() < 1e-9 * v1.max(1.0));
    }

    #[test]
    fn punctured_icosphere_is_restored_by_hole_closing() {
        let mut mesh = icosphere(3, 1.0);
        let analytic = 4.0 * std::f64::consts::PI / 3.0;
        mesh.faces.remove(7);
        mesh.refresh_watertight();
        assert!(!mesh.is_watertight());
        let left = close_holes(&mut mesh, 30);
        assert!(left.is_empty());
        assert!(mesh.is_watertight());
        let v = mesh_volume(&mesh).unwrap();
        assert!((v - analytic).abs() / analytic < 0.02);
    }

    #[test]
    fn triangular_hole_gets_three_fan_faces() {
        let mut mesh = icosphere(1, 1.0);
        let before = mesh.faces.len();
        mesh.faces.remove(0);
        mesh.refresh_watertight();
        let left = close_holes(&mut mesh, 30);
        assert!(left.is_empty());
        assert!(mesh.is_watertight());
        assert_eq!(mesh.faces.len(), before - 1 + 3);
    }

    #[test]
    fn already_watertight_mesh_is_unchanged() {
        let mut mesh = unit_cube_mesh();
        let faces_before = mesh.faces.clone();
        let left = close_holes(&mut mesh, 30);
        assert!(left.is_empty());
        assert_eq!(mesh.faces, faces_before);
    }

    #[test]
    fn oversized_loops_stay_open_and_are_reported() {
        let mut mesh = icosphere(2, 1.0);
        mesh.faces.remove(0);
        mesh.refresh_watertight();
        let left = close_holes(&mut mesh, 2);
        assert_eq!(left, vec![3]);
        assert!(!mesh.is_watertight());
    }

    #[test]
    fn close_holes_never_removes_faces() {
        let mut mesh = icosphere(2, 1.0);
        mesh.faces.remove(11);
        mesh.faces.remove(3);
        mesh.refresh_watertight();
        let before = mesh.faces.len();
        close_holes(&mut mesh, 30);
        assert!(mesh.faces.len() >= before);
    }

    #[test]
    fn sphere_normals_are_radial() {
        let cloud = PointCloud {
            id: "s".into(),
            points: fibonacci_sphere(600),
            scale_state: ScaleState::Raw,
        };
        let normals = estimate_normals(&cloud).unwrap();
        let limit_cos = (15.0f64).to_radians().cos();
        let mut good = 0;
        for (p, n) in cloud.points.iter().zip(&normals) {
            assert!((n.norm() - 1.0).abs() < 1e-9, "normals must be unit");
            if n.dot(p.normalized()) >= limit_cos {
                good += 1;
            }
        }
        assert_eq!(good, 600, "all sphere normals within 15 degrees of radial");
    }

    #[test]
    fn planar_patch_normals_align_with_plane() {
        let mut points = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                points.push(vec3(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let cloud = PointCloud { id: "p".into(), points, scale_state: ScaleState::Raw };
        let normals = estimate_normals(&cloud).unwrap();
        for n in &normals {
            assert!(n.z.abs() > 0.999, "plane normal must be ±z, got {n:?}");
        }
    }

    #[test]
    fn coincident_points_are_reported() {
        let mut points = fibonacci_sphere(20);
        points.push(points[3]);
        let cloud = PointCloud { id: "c".into(), points, scale_state: ScaleState::Raw };
        assert!(estimate_normals(&cloud).is_err());
    }
}
