//! Ball-pivoting surface reconstruction.
//!
//! A ball of fixed radius rests on three points to seed a triangle, then
//! pivots around front edges, attaching the first point it touches.
//! Multiple passes with growing radii (x1, x2, x4 of the base radius by
//! default) close regions the small ball cannot bridge.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::pointcloud::PointCloud;

use super::GrainMesh;

/// Reconstruction options.
#[derive(Debug, Clone)]
pub struct BallPivotConfig {
    /// Pivot-ball radius; defaults to twice the mean nearest-neighbor
    /// spacing of the cloud.
    pub base_radius: Option<f64>,
    /// Successive radius multipliers for the passes.
    pub radius_multipliers: Vec<f64>,
}

impl Default for BallPivotConfig {
    fn default() -> Self {
        BallPivotConfig { base_radius: None, radius_multipliers: vec![1.0, 2.0, 4.0] }
    }
}

/// Mean distance to the nearest neighbor over all points.
pub fn mean_nearest_neighbor_spacing(points: &[Vec3]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i != j {
                best = best.min((points[i] - points[j]).norm_sq());
            }
        }
        total += best.sqrt();
    }
    total / n as f64
}

struct SpatialGrid {
    cell: f64,
    cells: HashMap<(i32, i32, i32), Vec<usize>>,
}

impl SpatialGrid {
    fn build(points: &[Vec3], cell: f64) -> Self {
        let mut cells: HashMap<(i32, i32, i32), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, cell)).or_default().push(i);
        }
        SpatialGrid { cell, cells }
    }

    fn key(p: Vec3, cell: f64) -> (i32, i32, i32) {
        (
            (p.x / cell).floor() as i32,
            (p.y / cell).floor() as i32,
            (p.z / cell).floor() as i32,
        )
    }

    /// Indices within `radius` of `center`, ascending.
    fn near(&self, points: &[Vec3], center: Vec3, radius: f64) -> Vec<usize> {
        let (kx, ky, kz) = Self::key(center, self.cell);
        let reach = (radius / self.cell).ceil() as i32;
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(list) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in list {
                            if (points[i] - center).norm_sq() <= radius * radius {
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

/// Ball center resting on the ordered triple `(i, j, k)`, on the side of
/// the triple's winding normal. `None` when the triple is degenerate or the
/// ball is too small to touch all three points.
fn ball_center(pi: Vec3, pj: Vec3, pk: Vec3, rho: f64) -> Option<Vec3> {
    let ab = pj - pi;
    let ac = pk - pi;
    let n = ab.cross(ac);
    let n2 = n.norm_sq();
    let scale = ab.norm_sq().max(ac.norm_sq());
    if n2 <= 1e-18 * scale * scale {
        return None;
    }
    let cc = pi + (n.cross(ab) * ac.norm_sq() + ac.cross(n) * ab.norm_sq()) * (1.0 / (2.0 * n2));
    let h2 = rho * rho - (cc - pi).norm_sq();
    if h2 < 0.0 {
        return None;
    }
    Some(cc + n.normalized() * h2.sqrt())
}

struct Builder<'a> {
    points: &'a [Vec3],
    normals: &'a [Vec3],
    faces: Vec<[usize; 3]>,
    face_keys: HashMap<[usize; 3], ()>,
    edge_count: HashMap<(usize, usize), u8>,
    /// Directed open edge -> (opposite vertex, ball center of its face).
    open_edges: HashMap<(usize, usize), (usize, Vec3)>,
    used: Vec<bool>,
}

fn canonical(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn face_key(f: [usize; 3]) -> [usize; 3] {
    let mut k = f;
    k.sort_unstable();
    k
}

impl<'a> Builder<'a> {
    fn edge_face_count(&self, a: usize, b: usize) -> u8 {
        self.edge_count.get(&canonical(a, b)).copied().unwrap_or(0)
    }

    /// Strictly interior points invalidate a ball position.
    fn ball_is_empty(&self, grid: &SpatialGrid, center: Vec3, rho: f64, tri: [usize; 3]) -> bool {
        let tol = rho * 1e-7;
        for idx in grid.near(self.points, center, rho - tol) {
            if !tri.contains(&idx) {
                return false;
            }
        }
        true
    }

    fn orientation_ok(&self, f: [usize; 3]) -> bool {
        let n = (self.points[f[1]] - self.points[f[0]])
            .cross(self.points[f[2]] - self.points[f[0]]);
        let avg = self.normals[f[0]] + self.normals[f[1]] + self.normals[f[2]];
        n.dot(avg) > 0.0
    }

    fn add_face(&mut self, f: [usize; 3], center: Vec3, front: &mut VecDeque<(usize, usize)>) {
        self.face_keys.insert(face_key(f), ());
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            let count = self.edge_count.entry(canonical(a, b)).or_insert(0);
            *count += 1;
            if *count == 1 {
                let opposite = f.iter().copied().find(|&v| v != a && v != b).unwrap();
                self.open_edges.insert((a, b), (opposite, center));
                front.push_back((a, b));
            } else {
                // Edge closed: both directions leave the open set.
                self.open_edges.remove(&(a, b));
                self.open_edges.remove(&(b, a));
            }
        }
        for &v in &f {
            self.used[v] = true;
        }
        self.faces.push(f);
    }

    /// Try to seed a triangle around an unused point.
    fn find_seed(&mut self, grid: &SpatialGrid, rho: f64, front: &mut VecDeque<(usize, usize)>) -> bool {
        for i in 0..self.points.len() {
            if self.used[i] {
                continue;
            }
            let mut near = grid.near(self.points, self.points[i], 2.0 * rho);
            near.retain(|&j| j != i);
            near.sort_by(|&a, &b| {
                let da = (self.points[a] - self.points[i]).norm_sq();
                let db = (self.points[b] - self.points[i]).norm_sq();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            for (a_pos, &j) in near.iter().enumerate() {
                for &k in near.iter().skip(a_pos + 1) {
                    for f in [[i, j, k], [i, k, j]] {
                        if !self.orientation_ok(f) {
                            continue;
                        }
                        let Some(center) =
                            ball_center(self.points[f[0]], self.points[f[1]], self.points[f[2]], rho)
                        else {
                            continue;
                        };
                        if self.ball_is_empty(grid, center, rho, f) {
                            self.add_face(f, center, front);
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Pivot the ball around front edge `(a, b)`; returns the touched point
    /// and the new ball center.
    fn pivot(&self, grid: &SpatialGrid, rho: f64, a: usize, b: usize) -> Option<(usize, Vec3)> {
        let (opposite, old_center) = *self.open_edges.get(&(a, b))?;
        let (pa, pb) = (self.points[a], self.points[b]);
        let m = (pa + pb) * 0.5;
        let axis = (pb - pa).normalized();
        let v_old = perpendicular_component(old_center - m, axis);
        let mut best: Option<(f64, usize, Vec3)> = None;
        for x in grid.near(self.points, m, 2.0 * rho) {
            if x == a || x == b || x == opposite {
                continue;
            }
            // The new face is (b, a, x): it traverses the shared edge in
            // the opposite direction.
            let f = [b, a, x];
            if self.face_keys.contains_key(&face_key(f)) {
                continue;
            }
            if self.edge_face_count(a, x) >= 2 || self.edge_face_count(x, b) >= 2 {
                continue;
            }
            if !self.orientation_ok(f) {
                continue;
            }
            let Some(center) = ball_center(self.points[f[0]], self.points[f[1]], self.points[f[2]], rho)
            else {
                continue;
            };
            if !self.ball_is_empty(grid, center, rho, f) {
                continue;
            }
            let v_new = perpendicular_component(center - m, axis);
            let mut theta = axis.dot(v_old.cross(v_new)).atan2(v_old.dot(v_new));
            if theta <= 1e-12 {
                theta += std::f64::consts::TAU;
            }
            let better = match &best {
                Some((t, bx, _)) => theta < *t - 1e-12 || (theta < *t + 1e-12 && x < *bx),
                None => true,
            };
            if better {
                best = Some((theta, x, center));
            }
        }
        best.map(|(_, x, c)| (x, c))
    }
}

fn perpendicular_component(v: Vec3, axis: Vec3) -> Vec3 {
    v - axis * v.dot(axis)
}

/// Reconstruct a triangle mesh by multi-pass ball pivoting.
pub fn ball_pivot(cloud: &PointCloud, normals: &[Vec3], config: &BallPivotConfig) -> Result<GrainMesh> {
    let n = cloud.len();
    if n < 4 {
        return Err(Error::Geometry(format!("ball pivoting needs at least 4 points, got {n}")));
    }
    if normals.len() != n {
        return Err(Error::Geometry("one normal per point is required".into()));
    }
    let base = match config.base_radius {
        Some(r) if r > 0.0 => r,
        Some(_) => return Err(Error::Geometry("ball radius must be positive".into())),
        None => 2.0 * mean_nearest_neighbor_spacing(&cloud.points),
    };

    let mut builder = Builder {
        points: &cloud.points,
        normals,
        faces: Vec::new(),
        face_keys: HashMap::new(),
        edge_count: HashMap::new(),
        open_edges: HashMap::new(),
        used: vec![false; n],
    };

    for &mult in &config.radius_multipliers {
        let rho = base * mult;
        let grid = SpatialGrid::build(&cloud.points, rho.max(1e-12));
        // Re-open surviving boundary edges for the larger ball, with their
        // ball centers recomputed at this radius.
        let mut front: VecDeque<(usize, usize)> = VecDeque::new();
        let mut open: Vec<(usize, usize)> = builder.open_edges.keys().copied().collect();
        open.sort_unstable();
        for (a, b) in open {
            let (opposite, _) = builder.open_edges[&(a, b)];
            if let Some(center) =
                ball_center(cloud.points[a], cloud.points[b], cloud.points[opposite], rho)
            {
                builder.open_edges.insert((a, b), (opposite, center));
                front.push_back((a, b));
            }
        }
        let mut dead: HashMap<(usize, usize), ()> = HashMap::new();
        loop {
            while let Some((a, b)) = front.pop_front() {
                if builder.edge_face_count(a, b) != 1
                    || dead.contains_key(&(a, b))
                    || !builder.open_edges.contains_key(&(a, b))
                {
                    continue;
                }
                match builder.pivot(&grid, rho, a, b) {
                    Some((x, center)) => builder.add_face([b, a, x], center, &mut front),
                    None => {
                        dead.insert((a, b), ());
                    }
                }
            }
            if !builder.find_seed(&grid, rho, &mut front) {
                break;
            }
        }
    }

    if builder.faces.is_empty() {
        return Err(Error::Geometry(format!(
            "ball pivoting produced no triangles for cloud {} (radius {base})",
            cloud.id
        )));
    }
    Ok(GrainMesh::new(cloud.id.clone(), cloud.points.to_vec(), builder.faces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::synthetic::fibonacci_sphere;
    use crate::pointcloud::ScaleState;
    use crate::surfacing::{close_holes, estimate_normals, mesh_volume};

    fn sphere_cloud(n: usize) -> PointCloud {
        PointCloud { id: "sphere".into(), points: fibonacci_sphere(n), scale_state: ScaleState::Raw }
    }

    #[test]
    fn sphere_sample_reconstructs_watertight() {
        let cloud = sphere_cloud(600);
        let normals = estimate_normals(&cloud).unwrap();
        let mut mesh = ball_pivot(&cloud, &normals, &BallPivotConfig::default()).unwrap();

        // Vertex usage on a uniform sample should be essentially complete.
        let mut used = vec![false; cloud.len()];
        for f in &mesh.faces {
            for &v in f {
                used[v] = true;
            }
        }
        let usage = used.iter().filter(|&&u| u).count() as f64 / cloud.len() as f64;
        assert!(usage >= 0.95, "vertex usage {usage}");

        if !mesh.is_watertight() {
            let left = close_holes(&mut mesh, 30);
            assert!(left.is_empty(), "unclosable loops: {left:?}");
        }
        assert!(mesh.is_watertight());
        let volume = mesh_volume(&mesh).unwrap();
        let analytic = 4.0 * std::f64::consts::PI / 3.0;
        assert!((volume - analytic).abs() / analytic < 0.05, "volume {volume}");
    }

    #[test]
    fn face_normals_agree_with_point_normals() {
        let cloud = sphere_cloud(400);
        let normals = estimate_normals(&cloud).unwrap();
        let mesh = ball_pivot(&cloud, &normals, &BallPivotConfig::default()).unwrap();
        let mut good = 0;
        for i in 0..mesh.faces.len() {
            let (_, n) = mesh.face_area_normal(i);
            let f = mesh.faces[i];
            let avg = normals[f[0]] + normals[f[1]] + normals[f[2]];
            if n.dot(avg) > 0.0 {
                good += 1;
            }
        }
        let frac = good as f64 / mesh.faces.len() as f64;
        assert!(frac >= 0.99, "orientation agreement {frac}");
    }

    #[test]
    fn too_few_points_is_an_error() {
        let cloud = PointCloud {
            id: "tiny".into(),
            points: fibonacci_sphere(3),
            scale_state: ScaleState::Raw,
        };
        let normals = vec![Vec3::ZERO; 3];
        assert!(ball_pivot(&cloud, &normals, &BallPivotConfig::default()).is_err());
        let empty = PointCloud { id: "none".into(), points: vec![], scale_state: ScaleState::Raw };
        assert!(ball_pivot(&empty, &[], &BallPivotConfig::default()).is_err());
    }

    #[test]
    fn deterministic_given_input_order() {
        let cloud = sphere_cloud(200);
        let normals = estimate_normals(&cloud).unwrap();
        let a = ball_pivot(&cloud, &normals, &BallPivotConfig::default()).unwrap();
        let b = ball_pivot(&cloud, &normals, &BallPivotConfig::default()).unwrap();
        assert_eq!(a.faces, b.faces);
    }
}
