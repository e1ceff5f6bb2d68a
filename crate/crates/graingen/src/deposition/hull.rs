//! 3D convex hulls (quickhull) with support queries, volume, and
//! containment tests.

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Convex hull as vertices, outward-wound triangle faces, and face planes.
#[derive(Debug, Clone)]
pub struct ConvexHull {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// `(unit normal, offset)` with `normal . p <= offset` inside.
    pub planes: Vec<(Vec3, f64)>,
}

struct HullFace {
    verts: [usize; 3],
    normal: Vec3,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

fn face_plane(points: &[Vec3], v: [usize; 3]) -> (Vec3, f64) {
    let n = (points[v[1]] - points[v[0]]).cross(points[v[2]] - points[v[0]]).normalized();
    (n, n.dot(points[v[0]]))
}

/// Quickhull over a finite point set. Fails on degenerate (flat) input.
pub fn convex_hull(points: &[Vec3]) -> Result<ConvexHull> {
    if points.len() < 4 {
        return Err(Error::Geometry(format!("convex hull needs >= 4 points, got {}", points.len())));
    }
    let extent = {
        let mut lo = points[0];
        let mut hi = points[0];
        for &p in points {
            lo = Vec3 { x: lo.x.min(p.x), y: lo.y.min(p.y), z: lo.z.min(p.z) };
            hi = Vec3 { x: hi.x.max(p.x), y: hi.y.max(p.y), z: hi.z.max(p.z) };
        }
        (hi - lo).norm().max(1e-12)
    };
    let eps = 1e-10 * extent;

    // Initial tetrahedron from extreme points.
    let (mut i0, mut i1) = (0, 0);
    for (i, p) in points.iter().enumerate() {
        if p.x < points[i0].x {
            i0 = i;
        }
        if p.x > points[i1].x {
            i1 = i;
        }
    }
    if i0 == i1 {
        return Err(Error::Geometry("convex hull of coincident points".into()));
    }
    let line = points[i1] - points[i0];
    let mut i2 = usize::MAX;
    let mut best = eps;
    for (i, p) in points.iter().enumerate() {
        let d = line.cross(*p - points[i0]).norm() / line.norm();
        if d > best {
            best = d;
            i2 = i;
        }
    }
    if i2 == usize::MAX {
        return Err(Error::Geometry("convex hull of collinear points".into()));
    }
    let (n, off) = face_plane(points, [i0, i1, i2]);
    let mut i3 = usize::MAX;
    let mut best = eps;
    for (i, p) in points.iter().enumerate() {
        let d = (n.dot(*p) - off).abs();
        if d > best {
            best = d;
            i3 = i;
        }
    }
    if i3 == usize::MAX {
        return Err(Error::Geometry("convex hull of coplanar points".into()));
    }

    // Wind the initial tetra so all normals point outward.
    let centroid = (points[i0] + points[i1] + points[i2] + points[i3]) * 0.25;
    let mut faces: Vec<HullFace> = Vec::new();
    let add_face = |faces: &mut Vec<HullFace>, mut verts: [usize; 3]| {
        let (mut normal, mut offset) = face_plane(points, verts);
        if normal.dot(centroid) > offset {
            verts.swap(1, 2);
            let plane = face_plane(points, verts);
            normal = plane.0;
            offset = plane.1;
        }
        faces.push(HullFace { verts, normal, offset, outside: Vec::new(), alive: true });
    };
    add_face(&mut faces, [i0, i1, i2]);
    add_face(&mut faces, [i0, i1, i3]);
    add_face(&mut faces, [i0, i2, i3]);
    add_face(&mut faces, [i1, i2, i3]);

    // Assign every point to one face it lies outside of.
    let assign = |faces: &mut Vec<HullFace>, face_ids: &[usize], candidates: &[usize]| {
        for &p in candidates {
            let mut best_face = None;
            let mut best_d = eps;
            for &fi in face_ids {
                if !faces[fi].alive {
                    continue;
                }
                let d = faces[fi].normal.dot(points[p]) - faces[fi].offset;
                if d > best_d {
                    best_d = d;
                    best_face = Some(fi);
                }
            }
            if let Some(fi) = best_face {
                faces[fi].outside.push(p);
            }
        }
    };
    let all: Vec<usize> = (0..points.len()).filter(|&i| ![i0, i1, i2, i3].contains(&i)).collect();
    assign(&mut faces, &[0, 1, 2, 3], &all);

    loop {
        // Face with the farthest outside point.
        let mut pick: Option<(usize, usize, f64)> = None;
        for (fi, f) in faces.iter().enumerate() {
            if !f.alive {
                continue;
            }
            for &p in &f.outside {
                let d = f.normal.dot(points[p]) - f.offset;
                if pick.map_or(true, |(_, _, bd)| d > bd) {
                    pick = Some((fi, p, d));
                }
            }
        }
        let Some((_, apex, _)) = pick else { break };

        // Horizon: edges between visible and hidden faces.
        let visible: Vec<usize> = faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.alive && f.normal.dot(points[apex]) - f.offset > eps)
            .map(|(i, _)| i)
            .collect();
        let mut horizon: Vec<(usize, usize)> = Vec::new();
        let mut orphans: Vec<usize> = Vec::new();
        for &fi in &visible {
            let f = &faces[fi];
            for (a, b) in [(f.verts[0], f.verts[1]), (f.verts[1], f.verts[2]), (f.verts[2], f.verts[0])] {
                // The edge is on the horizon when its neighbor is hidden.
                let neighbor_visible = visible.iter().any(|&other| {
                    other != fi && {
                        let o = &faces[other];
                        o.verts.contains(&a) && o.verts.contains(&b)
                    }
                });
                if !neighbor_visible {
                    horizon.push((a, b));
                }
            }
        }
        for &fi in &visible {
            orphans.extend(faces[fi].outside.iter().copied());
            faces[fi].alive = false;
            faces[fi].outside.clear();
        }
        orphans.retain(|&p| p != apex);
        orphans.sort_unstable();
        orphans.dedup();

        let mut new_ids = Vec::with_capacity(horizon.len());
        for (a, b) in horizon {
            let verts = [a, b, apex];
            let (mut normal, mut offset) = face_plane(points, verts);
            let mut verts = verts;
            // Keep the interior point below the face.
            if normal.dot(centroid) > offset + eps {
                verts.swap(0, 1);
                let plane = face_plane(points, verts);
                normal = plane.0;
                offset = plane.1;
            }
            faces.push(HullFace { verts, normal, offset, outside: Vec::new(), alive: true });
            new_ids.push(faces.len() - 1);
        }
        assign(&mut faces, &new_ids, &orphans);
    }

    // Compact to the surviving faces and referenced vertices.
    let mut vertex_map: Vec<Option<usize>> = vec![None; points.len()];
    let mut vertices = Vec::new();
    let mut out_faces = Vec::new();
    let mut planes = Vec::new();
    for f in faces.iter().filter(|f| f.alive) {
        let mut tri = [0usize; 3];
        for (slot, &v) in tri.iter_mut().zip(&f.verts) {
            *slot = *vertex_map[v].get_or_insert_with(|| {
                vertices.push(points[v]);
                vertices.len() - 1
            });
        }
        out_faces.push(tri);
        planes.push((f.normal, f.offset));
    }
    Ok(ConvexHull { vertices, faces: out_faces, planes })
}

impl ConvexHull {
    /// Farthest vertex along `dir`.
    pub fn support(&self, dir: Vec3) -> Vec3 {
        let mut best = self.vertices[0];
        let mut best_d = best.dot(dir);
        for &v in &self.vertices[1..] {
            let d = v.dot(dir);
            if d > best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }

    /// Signed-tetrahedron volume.
    pub fn volume(&self) -> f64 {
        let mut six_v = 0.0;
        for f in &self.faces {
            six_v += self.vertices[f[0]].cross(self.vertices[f[1]]).dot(self.vertices[f[2]]);
        }
        (six_v / 6.0).abs()
    }

    /// Point containment with an outward tolerance.
    pub fn contains(&self, p: Vec3, tolerance: f64) -> bool {
        self.planes.iter().all(|&(n, d)| n.dot(p) <= d + tolerance)
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = Vec3::ZERO;
        for &v in &self.vertices {
            c += v;
        }
        c * (1.0 / self.vertices.len().max(1) as f64)
    }

    /// Radius of the farthest vertex from a reference point.
    pub fn bounding_radius_about(&self, origin: Vec3) -> f64 {
        self.vertices.iter().map(|&v| (v - origin).norm()).fold(0.0, f64::max)
    }
}
