//! GJK closest-point queries between convex support maps.

use crate::geom::Vec3;

/// Convex shape described by its support function.
pub trait SupportMap {
    /// Farthest point of the shape along `dir` (need not be normalized).
    fn support(&self, dir: Vec3) -> Vec3;
}

/// Result of a closest-point query between two convex cores.
#[derive(Debug, Clone, Copy)]
pub struct Closest {
    /// Distance between the cores; zero when they touch or overlap.
    pub distance: f64,
    pub point_a: Vec3,
    pub point_b: Vec3,
    /// True when the cores intersect (witness points are unreliable).
    pub intersecting: bool,
}

#[derive(Clone, Copy)]
struct SimplexVertex {
    w: Vec3,
    a: Vec3,
    b: Vec3,
}

/// Closest points between two convex cores via GJK on the Minkowski
/// difference. Robust for the well-separated or shallowly touching pairs
/// produced by position-projected contact resolution.
pub fn closest_points(a: &impl SupportMap, b: &impl SupportMap) -> Closest {
    let support = |dir: Vec3| -> SimplexVertex {
        let pa = a.support(dir);
        let pb = b.support(-dir);
        SimplexVertex { w: pa - pb, a: pa, b: pb }
    };

    let mut simplex: Vec<SimplexVertex> = vec![support(Vec3 { x: 1.0, y: 0.0, z: 0.0 })];
    for _ in 0..64 {
        let (closest, lambdas, keep) = closest_on_simplex(&simplex);
        simplex = keep;
        let dist = closest.norm();
        if dist < 1e-12 || simplex.len() == 4 {
            return Closest {
                distance: 0.0,
                point_a: witness(&simplex, &lambdas, true),
                point_b: witness(&simplex, &lambdas, false),
                intersecting: true,
            };
        }
        let dir = -closest * (1.0 / dist);
        let next = support(dir);
        // Terminate when the support point gains nothing over the current
        // closest point along the search direction.
        let progress = next.w.dot(dir) - closest.dot(dir); // closest.dot(dir) = -dist
        let duplicate = simplex.iter().any(|v| (v.w - next.w).norm_sq() < 1e-24);
        if duplicate || progress <= 1e-10 * dist.max(1.0) {
            return Closest {
                distance: dist,
                point_a: witness(&simplex, &lambdas, true),
                point_b: witness(&simplex, &lambdas, false),
                intersecting: false,
            };
        }
        simplex.push(next);
    }
    let (closest, lambdas, kept) = closest_on_simplex(&simplex);
    Closest {
        distance: closest.norm(),
        point_a: witness(&kept, &lambdas, true),
        point_b: witness(&kept, &lambdas, false),
        intersecting: false,
    }
}

fn witness(simplex: &[SimplexVertex], lambdas: &[f64], on_a: bool) -> Vec3 {
    let mut p = Vec3::ZERO;
    for (v, &l) in simplex.iter().zip(lambdas) {
        p += (if on_a { v.a } else { v.b }) * l;
    }
    p
}

/// Closest point to the origin on the simplex, its barycentric weights, and
/// the reduced supporting simplex (weights parallel to the reduction).
fn closest_on_simplex(simplex: &[SimplexVertex]) -> (Vec3, Vec<f64>, Vec<SimplexVertex>) {
    match simplex {
        [a] => (a.w, vec![1.0], vec![*a]),
        [a, b] => closest_on_segment(*a, *b),
        [a, b, c] => closest_on_triangle(*a, *b, *c),
        [a, b, c, d] => closest_on_tetrahedron(*a, *b, *c, *d),
        _ => unreachable!("simplex holds at most 4 vertices"),
    }
}

fn closest_on_segment(a: SimplexVertex, b: SimplexVertex) -> (Vec3, Vec<f64>, Vec<SimplexVertex>) {
    let ab = b.w - a.w;
    let denom = ab.norm_sq();
    if denom <= 1e-30 {
        return (a.w, vec![1.0], vec![a]);
    }
    let t = (-a.w).dot(ab) / denom;
    if t <= 0.0 {
        (a.w, vec![1.0], vec![a])
    } else if t >= 1.0 {
        (b.w, vec![1.0], vec![b])
    } else {
        (a.w + ab * t, vec![1.0 - t, t], vec![a, b])
    }
}

fn closest_on_triangle(
    a: SimplexVertex,
    b: SimplexVertex,
    c: SimplexVertex,
) -> (Vec3, Vec<f64>, Vec<SimplexVertex>) {
    // Voronoi-region walk (origin as the query point).
    let ab = b.w - a.w;
    let ac = c.w - a.w;
    let ap = -a.w;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a.w, vec![1.0], vec![a]);
    }
    let bp = -b.w;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b.w, vec![1.0], vec![b]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (a.w + ab * t, vec![1.0 - t, t], vec![a, b]);
    }
    let cp = -c.w;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c.w, vec![1.0], vec![c]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (a.w + ac * t, vec![1.0 - t, t], vec![a, c]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b.w + (c.w - b.w) * t, vec![1.0 - t, t], vec![b, c]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (
        a.w + ab * v + ac * w,
        vec![1.0 - v - w, v, w],
        vec![a, b, c],
    )
}

fn closest_on_tetrahedron(
    a: SimplexVertex,
    b: SimplexVertex,
    c: SimplexVertex,
    d: SimplexVertex,
) -> (Vec3, Vec<f64>, Vec<SimplexVertex>) {
    // Origin inside all face planes means the cores intersect.
    let mut best: Option<(f64, (Vec3, Vec<f64>, Vec<SimplexVertex>))> = None;
    let mut inside = true;
    let centroid = (a.w + b.w + c.w + d.w) * 0.25;
    for (p, q, r) in [(a, b, c), (a, b, d), (a, c, d), (b, c, d)] {
        let mut n = (q.w - p.w).cross(r.w - p.w);
        if n.dot(centroid - p.w) > 0.0 {
            n = -n;
        }
        // Origin outside this face?
        if n.dot(-p.w) > 0.0 {
            inside = false;
            let candidate = closest_on_triangle(p, q, r);
            let dist = candidate.0.norm_sq();
            if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
                best = Some((dist, candidate));
            }
        }
    }
    if inside {
        (Vec3::ZERO, vec![0.25; 4], vec![a, b, c, d])
    } else {
        best.expect("origin outside at least one face").1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deposition::hull::{convex_hull, ConvexHull};
    use crate::geom::vec3;

    struct PointShape(Vec3);

    impl SupportMap for PointShape {
        fn support(&self, _dir: Vec3) -> Vec3 {
            self.0
        }
    }

    impl SupportMap for ConvexHull {
        fn support(&self, dir: Vec3) -> Vec3 {
            ConvexHull::support(self, dir)
        }
    }

    fn unit_cube_at(offset: Vec3) -> ConvexHull {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(vec3(x, y, z) + offset);
                }
            }
        }
        convex_hull(&pts).unwrap()
    }

    #[test]
    fn point_to_point_distance() {
        let a = PointShape(vec3(0.0, 0.0, 0.0));
        let b = PointShape(vec3(3.0, 4.0, 0.0));
        let r = closest_points(&a, &b);
        assert!((r.distance - 5.0).abs() < 1e-10);
        assert!(!r.intersecting);
    }

    #[test]
    fn separated_cubes_face_to_face() {
        let a = unit_cube_at(Vec3::ZERO);
        let b = unit_cube_at(vec3(2.5, 0.0, 0.0));
        let r = closest_points(&a, &b);
        assert!((r.distance - 1.5).abs() < 1e-9, "distance {}", r.distance);
        assert!((r.point_a.x - 1.0).abs() < 1e-9);
        assert!((r.point_b.x - 2.5).abs() < 1e-9);
    }

    #[test]
    fn overlapping_cubes_report_intersection() {
        let a = unit_cube_at(Vec3::ZERO);
        let b = unit_cube_at(vec3(0.5, 0.2, 0.1));
        let r = closest_points(&a, &b);
        assert!(r.intersecting);
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn cube_corner_to_point() {
        let a = unit_cube_at(Vec3::ZERO);
        let b = PointShape(vec3(2.0, 2.0, 2.0));
        let r = closest_points(&a, &b);
        assert!((r.distance - 3.0f64.sqrt()).abs() < 1e-9, "distance {}", r.distance);
        assert!((r.point_a - vec3(1.0, 1.0, 1.0)).norm() < 1e-9);
    }

    #[test]
    fn witness_points_realize_the_distance() {
        let a = unit_cube_at(Vec3::ZERO);
        for offset in [vec3(1.8, 1.3, 0.0), vec3(-2.0, 0.3, 1.7), vec3(0.4, -3.0, 0.2)] {
            let b = unit_cube_at(offset);
            let r = closest_points(&a, &b);
            if !r.intersecting {
                assert!(
                    ((r.point_a - r.point_b).norm() - r.distance).abs() < 1e-8,
                    "witness gap {} vs distance {}",
                    (r.point_a - r.point_b).norm(),
                    r.distance
                );
            }
        }
    }
}
