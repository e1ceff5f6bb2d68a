//! Exact minimum enclosing sphere (Welzl's randomized incremental method
//! with move-to-front ordering).

use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

impl Sphere {
    fn point(p: Vec3) -> Sphere {
        Sphere { center: p, radius: 0.0 }
    }

    fn through_two(a: Vec3, b: Vec3) -> Sphere {
        let center = (a + b) * 0.5;
        Sphere { center, radius: (a - center).norm() }
    }

    /// Smallest sphere with the circle through three points as a great
    /// circle; falls back to the best two-point sphere when collinear.
    fn through_three(a: Vec3, b: Vec3, c: Vec3) -> Sphere {
        let ab = b - a;
        let ac = c - a;
        let n = ab.cross(ac);
        let n2 = n.norm_sq();
        let scale = ab.norm_sq().max(ac.norm_sq());
        if n2 <= 1e-24 * scale * scale {
            return best_of_pairs(&[a, b, c]);
        }
        let center =
            a + (n.cross(ab) * ac.norm_sq() + ac.cross(n) * ab.norm_sq()) * (1.0 / (2.0 * n2));
        Sphere { center, radius: (a - center).norm() }
    }

    /// Circumsphere of four points; falls back to three-point spheres when
    /// (nearly) coplanar.
    fn through_four(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> Sphere {
        let ab = b - a;
        let ac = c - a;
        let ad = d - a;
        let det = ab.dot(ac.cross(ad));
        let scale = ab.norm().max(ac.norm()).max(ad.norm());
        if det.abs() <= 1e-12 * scale * scale * scale {
            return best_of_triples(&[a, b, c, d]);
        }
        // Solve 2 (p - a) . x = |p - a|^2 for the circumcenter offset x.
        let (r1, r2, r3) = (ab, ac, ad);
        let (s1, s2, s3) = (ab.norm_sq(), ac.norm_sq(), ad.norm_sq());
        let cross23 = r2.cross(r3);
        let cross31 = r3.cross(r1);
        let cross12 = r1.cross(r2);
        let offset = (cross23 * s1 + cross31 * s2 + cross12 * s3) * (1.0 / (2.0 * det));
        let center = a + offset;
        Sphere { center, radius: (a - center).norm() }
    }

    fn contains(&self, p: Vec3, slack: f64) -> bool {
        (p - self.center).norm_sq() <= self.radius * self.radius + slack
    }
}

fn covering(sphere: Sphere, pts: &[Vec3]) -> bool {
    let slack = relative_slack(sphere.radius);
    pts.iter().all(|&p| sphere.contains(p, slack))
}

fn relative_slack(radius: f64) -> f64 {
    (radius * radius).max(1.0) * 1e-12
}

fn best_of_pairs(pts: &[Vec3]) -> Sphere {
    let mut best: Option<Sphere> = None;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let s = Sphere::through_two(pts[i], pts[j]);
            if covering(s, pts) && best.map_or(true, |b| s.radius < b.radius) {
                best = Some(s);
            }
        }
    }
    best.unwrap_or_else(|| Sphere::point(pts[0]))
}

fn best_of_triples(pts: &[Vec3]) -> Sphere {
    let mut best: Option<Sphere> = None;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            for k in (j + 1)..pts.len() {
                let s = Sphere::through_three(pts[i], pts[j], pts[k]);
                if covering(s, pts) && best.map_or(true, |b| s.radius < b.radius) {
                    best = Some(s);
                }
            }
        }
    }
    best.unwrap_or_else(|| best_of_pairs(pts))
}

fn sphere_of_support(support: &[Vec3]) -> Sphere {
    match support {
        [] => Sphere { center: Vec3::ZERO, radius: 0.0 },
        [a] => Sphere::point(*a),
        [a, b] => Sphere::through_two(*a, *b),
        [a, b, c] => Sphere::through_three(*a, *b, *c),
        [a, b, c, d] => Sphere::through_four(*a, *b, *c, *d),
        _ => unreachable!("support of a 3D sphere has at most 4 points"),
    }
}

fn welzl(pts: &mut [Vec3], support: &mut Vec<Vec3>) -> Sphere {
    if pts.is_empty() || support.len() == 4 {
        return sphere_of_support(support);
    }
    let n = pts.len();
    let p = pts[n - 1];
    let sphere = welzl(&mut pts[..n - 1], support);
    if sphere.contains(p, relative_slack(sphere.radius)) {
        return sphere;
    }
    support.push(p);
    let sphere = welzl(&mut pts[..n - 1], support);
    support.pop();
    // Move-to-front: boundary points float to early positions so later
    // recursions terminate quickly.
    pts[..n].rotate_right(1);
    sphere
}

/// Exact minimum enclosing sphere of a non-empty point set.
pub fn min_enclosing_sphere(points: &[Vec3]) -> Result<Sphere> {
    if points.is_empty() {
        return Err(Error::Geometry("minimum bounding sphere of an empty cloud".into()));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("bounding sphere input".into()));
    }
    // Deterministic pseudo-shuffle for the expected-linear behavior.
    let mut pts: Vec<Vec3> = points.to_vec();
    let n = pts.len() as u64;
    for i in (1..pts.len()).rev() {
        let j = (crate::rng::derive_seed(0x5EED, i as u64 * n) % (i as u64 + 1)) as usize;
        pts.swap(i, j);
    }
    let mut support = Vec::with_capacity(4);
    Ok(welzl(&mut pts, &mut support))
}
