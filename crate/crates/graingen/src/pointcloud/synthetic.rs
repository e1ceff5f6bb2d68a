//! Synthetic point clouds for demos and desk-scale training runs.

use crate::geom::{vec3, Vec3};
use crate::rng::{uniform, RunRng};

use super::PointCloud;

/// Deterministic, nearly uniform placement of `n` points on the unit
/// sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = std::f64::consts::TAU * (i as f64 / golden).fract();
            vec3(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Random points on an axis-aligned ellipsoid surface with the given
/// semi-axes (area-uniform on the underlying sphere).
pub fn ellipsoid_cloud(
    id: impl Into<String>,
    semi_axes: Vec3,
    n: usize,
    rng: &mut RunRng,
) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            let z = uniform(rng, -1.0, 1.0);
            let phi = uniform(rng, 0.0, std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            vec3(
                semi_axes.x * r * phi.cos(),
                semi_axes.y * r * phi.sin(),
                semi_axes.z * z,
            )
        })
        .collect();
    PointCloud::new_raw(id, points)
}

/// A varied family of ellipsoid clouds for desk-scale training.
pub fn ellipsoid_family(count: usize, points_per_cloud: usize, rng: &mut RunRng) -> Vec<PointCloud> {
    (0..count)
        .map(|i| {
            let a = uniform(rng, 0.08, 0.25);
            let b = uniform(rng, 0.08, 0.25);
            let c = uniform(rng, 0.08, 0.25);
            ellipsoid_cloud(format!("ellipsoid_{i:04}"), vec3(a, b, c), points_per_cloud, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::run_rng;

    #[test]
    fn fibonacci_points_on_unit_sphere() {
        let pts = fibonacci_sphere(600);
        assert_eq!(pts.len(), 600);
        for p in &pts {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ellipsoid_points_satisfy_surface_equation() {
        let mut rng = run_rng(2);
        let axes = vec3(0.2, 0.1, 0.15);
        let cloud = ellipsoid_cloud("e", axes, 200, &mut rng);
        for p in &cloud.points {
            let lhs = (p.x / axes.x).powi(2) + (p.y / axes.y).powi(2) + (p.z / axes.z).powi(2);
            assert!((lhs - 1.0).abs() < 1e-9);
        }
    }
}
