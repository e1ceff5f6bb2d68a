//! Size and shape metrics: minimum bounding spheres, grain size
//! distribution summaries, and the area-weighted surface orientation
//! tensor with its compactness/flakiness/elongation decomposition.

mod minsphere;

pub use minsphere::{min_enclosing_sphere, Sphere};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{SymMat3, Vec3};
use crate::pointcloud::PointCloud;
use crate::surfacing::GrainMesh;

/// Bounding-sphere size of one grain, in millimeters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeRecord {
    pub id: String,
    pub diameter_mm: f64,
    pub center_mm: Vec3,
}

/// Shape metrics of one grain from the surface orientation tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub id: String,
    /// Eigenvalues in descending order; they sum to 1.
    pub eigenvalues: [f64; 3],
    pub compactness: f64,
    pub flakiness: f64,
    pub elongation: f64,
}

/// Grain-size-distribution summary over a diameter sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GsdSummary {
    pub sorted_diameters: Vec<f64>,
    pub d10: f64,
    pub d30: f64,
    pub d60: f64,
    /// Uniformity coefficient `D60 / D10`.
    pub cu: f64,
    /// Curvature coefficient `D30^2 / (D10 D60)`.
    pub cc: f64,
    pub mean: f64,
    pub median: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
    /// Count outside the reference range, when one was supplied.
    pub out_of_range: Option<usize>,
}

/// Minimum bounding sphere of a cloud, reported in the cloud's own units
/// (run it on raw-millimeter clouds for physical sizes).
pub fn min_bounding_sphere(cloud: &PointCloud) -> Result<SizeRecord> {
    let sphere = min_enclosing_sphere(&cloud.points)?;
    Ok(SizeRecord {
        id: cloud.id.clone(),
        diameter_mm: 2.0 * sphere.radius,
        center_mm: sphere.center,
    })
}

/// Diameter at `percent` finer on the count-based distribution curve.
///
/// Plotting positions are `100 i / N` at the i-th sorted diameter with
/// linear interpolation between them; below the first position the value
/// clamps to the smallest diameter.
pub fn d_value(sorted: &[f64], percent: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let target = percent / 100.0 * n as f64; // fractional index, 1-based
    if target <= 1.0 {
        return sorted[0];
    }
    if target >= n as f64 {
        return sorted[n - 1];
    }
    let lower = target.floor() as usize; // 1-based index of the left anchor
    let frac = target - lower as f64;
    sorted[lower - 1] + frac * (sorted[lower] - sorted[lower - 1])
}

/// Summarize a diameter sample (count-based percent finer).
pub fn gsd_summary(diameters: &[f64], reference_range: Option<(f64, f64)>) -> Result<GsdSummary> {
    if diameters.len() < 2 {
        return Err(Error::Dataset("grain size distribution needs at least 2 diameters".into()));
    }
    if diameters.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::Dataset("grain diameters must be positive and finite".into()));
    }
    let mut sorted = diameters.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let d10 = d_value(&sorted, 10.0);
    let d30 = d_value(&sorted, 30.0);
    let d60 = d_value(&sorted, 60.0);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let variance = sorted.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    let out_of_range =
        reference_range.map(|(lo, hi)| sorted.iter().filter(|&&d| d < lo || d > hi).count());
    Ok(GsdSummary {
        d10,
        d30,
        d60,
        cu: d60 / d10,
        cc: d30 * d30 / (d10 * d60),
        mean,
        median,
        std_dev: variance.sqrt(),
        min: sorted[0],
        max: sorted[n - 1],
        sorted_diameters: sorted,
        out_of_range,
    })
}

/// Area-weighted surface orientation tensor and the C/F/E shape metrics.
///
/// `f = sum_k A_k n_k n_k^T / sum_k A_k`; with eigenvalues `f1 >= f2 >= f3`
/// the metrics are `C = f3/f1`, `F = (f1-f2)/f1`, `E = (f2-f3)/f1`.
pub fn surface_orientation(mesh: &GrainMesh) -> Result<ShapeRecord> {
    if mesh.faces.len() < 4 {
        return Err(Error::Geometry(format!(
            "orientation tensor needs >= 4 faces, mesh {} has {}",
            mesh.id,
            mesh.faces.len()
        )));
    }
    let mut tensor = SymMat3::zero();
    let mut total_area = 0.0;
    for i in 0..mesh.faces.len() {
        let (area, normal) = mesh.face_area_normal(i);
        if area < 1e-12 {
            continue; // degenerate face
        }
        tensor.add_outer(normal, area);
        total_area += area;
    }
    if total_area <= 0.0 {
        return Err(Error::Geometry(format!("mesh {}: all faces degenerate", mesh.id)));
    }
    tensor.scale(1.0 / total_area);
    let (vals, _) = tensor.eigen();
    let [f1, f2, f3] = vals;
    Ok(ShapeRecord {
        id: mesh.id.clone(),
        eigenvalues: vals,
        compactness: f3 / f1,
        flakiness: (f1 - f2) / f1,
        elongation: (f2 - f3) / f1,
    })
}

/// Closed intervals for compactness/flakiness/elongation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ShapeBox {
    pub compactness: Option<(f64, f64)>,
    pub flakiness: Option<(f64, f64)>,
    pub elongation: Option<(f64, f64)>,
}

/// Ids whose metrics fall inside every supplied closed interval. An empty
/// result is a valid outcome, not an error.
pub fn filter_by_ranges(
    sizes: &[SizeRecord],
    shapes: &[ShapeRecord],
    size_range_mm: Option<(f64, f64)>,
    shape_box: Option<ShapeBox>,
) -> Vec<String> {
    let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
    let mut out = Vec::new();
    for size in sizes {
        if let Some(range) = size_range_mm {
            if !inside(size.diameter_mm, range) {
                continue;
            }
        }
        if let Some(sbox) = shape_box {
            let Some(shape) = shapes.iter().find(|s| s.id == size.id) else {
                continue;
            };
            let ok = sbox.compactness.map_or(true, |r| inside(shape.compactness, r))
                && sbox.flakiness.map_or(true, |r| inside(shape.flakiness, r))
                && sbox.elongation.map_or(true, |r| inside(shape.elongation, r));
            if !ok {
                continue;
            }
        }
        out.push(size.id.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vec3;
    use crate::surfacing::icosphere;

    fn box_mesh(lx: f64, ly: f64, lz: f64) -> GrainMesh {
        let v = vec![
            vec3(0.0, 0.0, 0.0), vec3(lx, 0.0, 0.0), vec3(lx, ly, 0.0), vec3(0.0, ly, 0.0),
            vec3(0.0, 0.0, lz), vec3(lx, 0.0, lz), vec3(lx, ly, lz), vec3(0.0, ly, lz),
        ];
        let f = vec![
            [0, 2, 1], [0, 3, 2],
            [4, 5, 6], [4, 6, 7],
            [0, 1, 5], [0, 5, 4],
            [1, 2, 6], [1, 6, 5],
            [2, 3, 7], [2, 7, 6],
            [3, 0, 4], [3, 4, 7],
        ];
        GrainMesh::new("box", v, f)
    }

    #[test]
    fn unit_cube_is_perfectly_compact() {
        let shape = surface_orientation(&box_mesh(1.0, 1.0, 1.0)).unwrap();
        for (v, expect) in shape.eigenvalues.iter().zip([1.0 / 3.0; 3]) {
            assert!((v - expect).abs() < 1e-9);
        }
        assert!((shape.compactness - 1.0).abs() < 1e-9);
        assert!(shape.flakiness.abs() < 1e-9);
        assert!(shape.elongation.abs() < 1e-9);
        let sum = shape.compactness + shape.flakiness + shape.elongation;
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_one_one_box_metrics() {
        // Face areas 2, 4, 4 over a total of 10: eigenvalues (0.4, 0.4, 0.2).
        let shape = surface_orientation(&box_mesh(2.0, 1.0, 1.0)).unwrap();
        assert!((shape.eigenvalues[0] - 0.4).abs() < 1e-9);
        assert!((shape.eigenvalues[1] - 0.4).abs() < 1e-9);
        assert!((shape.eigenvalues[2] - 0.2).abs() < 1e-9);
        assert!((shape.compactness - 0.5).abs() < 1e-9);
        assert!(shape.flakiness.abs() < 1e-9);
        assert!((shape.elongation - 0.5).abs() < 1e-9);
    }

    #[test]
    fn thin_plate_approaches_pure_flake() {
        let shape = surface_orientation(&box_mesh(1.0, 1.0, 1e-6)).unwrap();
        assert!(shape.flakiness > 0.95, "F = {}", shape.flakiness);
        assert!(shape.compactness < 0.05);
    }

    #[test]
    fn icosphere_is_nearly_compact() {
        let shape = surface_orientation(&icosphere(3, 1.0)).unwrap();
        assert!(shape.compactness >= 0.98, "C = {}", shape.compactness);
    }

    #[test]
    fn trace_is_one_and_rotation_leaves_metrics() {
        let mesh = box_mesh(2.0, 1.5, 0.7);
        let shape = surface_orientation(&mesh).unwrap();
        let trace: f64 = shape.eigenvalues.iter().sum();
        assert!((trace - 1.0).abs() < 1e-9);
        let rot = crate::geom::rotation_from_euler_xyz(0.4, 0.9, -0.3);
        let rotated = GrainMesh::new(
            "r",
            mesh.vertices.iter().map(|&p| crate::geom::mat_apply(&rot, p)).collect(),
            mesh.faces.clone(),
        );
        let shape_r = surface_orientation(&rotated).unwrap();
        for (a, b) in shape.eigenvalues.iter().zip(shape_r.eigenvalues.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Uniform scaling also leaves the metrics unchanged.
        let scaled = GrainMesh::new(
            "s",
            mesh.vertices.iter().map(|&p| p * 3.7).collect(),
            mesh.faces.clone(),
        );
        let shape_s = surface_orientation(&scaled).unwrap();
        assert!((shape.compactness - shape_s.compactness).abs() < 1e-9);
        assert!((shape.flakiness - shape_s.flakiness).abs() < 1e-9);
        assert!((shape.elongation - shape_s.elongation).abs() < 1e-9);
    }

    #[test]
    fn gsd_hand_example_one_to_ten() {
        let diameters: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let s = gsd_summary(&diameters, None).unwrap();
        assert_eq!(s.d10, 1.0);
        assert_eq!(s.d30, 3.0);
        assert_eq!(s.d60, 6.0);
        assert!((s.cu - 6.0).abs() < 1e-12);
        assert!((s.cc - 1.5).abs() < 1e-12);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 10.0);
        assert!((s.median - 5.5).abs() < 1e-12);
    }

    #[test]
    fn gsd_uniform_sample_is_degenerate() {
        let s = gsd_summary(&[0.3; 12], None).unwrap();
        assert_eq!(s.d10, 0.3);
        assert_eq!(s.d30, 0.3);
        assert_eq!(s.d60, 0.3);
        assert!((s.cu - 1.0).abs() < 1e-12);
        assert!((s.cc - 1.0).abs() < 1e-12);
        assert!(s.std_dev < 1e-12);
    }

    #[test]
    fn reported_uniformity_matches_reference_values() {
        // D-values from the scan-database summary reproduce the published
        // uniformity and curvature coefficients.
        let (d10, d30, d60) = (0.1241f64, 0.1819f64, 0.2503f64);
        let cu = d60 / d10;
        let cc = d30 * d30 / (d10 * d60);
        assert!((cu - 2.0166).abs() < 0.005, "Cu = {cu}");
        assert!((cc - 1.0652).abs() < 0.005, "Cc = {cc}");
    }

    #[test]
    fn gsd_rejects_degenerate_input() {
        assert!(gsd_summary(&[], None).is_err());
        assert!(gsd_summary(&[1.0], None).is_err());
        assert!(gsd_summary(&[1.0, -0.5], None).is_err());
    }

    #[test]
    fn d_values_monotone_in_percent() {
        let diameters = [0.12, 0.05, 0.4, 0.22, 0.31, 0.18, 0.09, 0.27];
        let s = gsd_summary(&diameters, None).unwrap();
        let mut last = 0.0;
        for pct in 1..=100 {
            let d = d_value(&s.sorted_diameters, pct as f64);
            assert!(d >= last, "D-values must be monotone in the percentile");
            last = d;
        }
    }

    #[test]
    fn appending_larger_diameter_keeps_d60_monotone() {
        let base: Vec<f64> = (1..=9).map(|i| i as f64 * 0.1).collect();
        let s0 = gsd_summary(&base, None).unwrap();
        let mut extended = base.clone();
        extended.push(2.0);
        let s1 = gsd_summary(&extended, None).unwrap();
        assert!(s1.d60 >= s0.d60 - 1e-12);
    }

    #[test]
    fn out_of_range_counting() {
        let diameters = [0.1, 0.2, 0.3, 0.4, 0.9];
        let s = gsd_summary(&diameters, Some((0.15, 0.5))).unwrap();
        assert_eq!(s.out_of_range, Some(2));
    }

    #[test]
    fn min_bounding_sphere_wraps_cloud() {
        use crate::pointcloud::ScaleState;
        let cloud = PointCloud {
            id: "g".into(),
            points: vec![vec3(-1.0, 0.0, 0.0), vec3(1.0, 0.0, 0.0), vec3(0.0, 0.5, 0.0)],
            scale_state: ScaleState::Raw,
        };
        let rec = min_bounding_sphere(&cloud).unwrap();
        assert!((rec.diameter_mm - 2.0).abs() < 1e-9);
        assert_eq!(rec.id, "g");
    }

    #[test]
    fn filters_combine_size_and_shape() {
        let sizes = vec![
            SizeRecord { id: "a".into(), diameter_mm: 0.13, center_mm: Vec3::ZERO },
            SizeRecord { id: "b".into(), diameter_mm: 0.30, center_mm: Vec3::ZERO },
            SizeRecord { id: "c".into(), diameter_mm: 0.135, center_mm: Vec3::ZERO },
        ];
        let shapes = vec![
            ShapeRecord { id: "a".into(), eigenvalues: [0.5, 0.3, 0.2], compactness: 0.4, flakiness: 0.4, elongation: 0.2 },
            ShapeRecord { id: "b".into(), eigenvalues: [0.5, 0.3, 0.2], compactness: 0.4, flakiness: 0.4, elongation: 0.2 },
            ShapeRecord { id: "c".into(), eigenvalues: [0.6, 0.3, 0.1], compactness: 0.17, flakiness: 0.5, elongation: 0.33 },
        ];
        // No filters: all ids.
        assert_eq!(filter_by_ranges(&sizes, &shapes, None, None).len(), 3);
        // Size-only.
        let ids = filter_by_ranges(&sizes, &shapes, Some((0.1225, 0.14)), None);
        assert_eq!(ids, vec!["a".to_string(), "c".to_string()]);
        // Size and shape box.
        let sbox = ShapeBox { compactness: Some((0.3, 0.5)), ..Default::default() };
        let ids = filter_by_ranges(&sizes, &shapes, Some((0.1225, 0.14)), Some(sbox));
        assert_eq!(ids, vec!["a".to_string()]);
        // Disjoint interval gives an empty, non-error result.
        let ids = filter_by_ranges(&sizes, &shapes, Some((9.0, 10.0)), None);
        assert!(ids.is_empty());
    }
}
