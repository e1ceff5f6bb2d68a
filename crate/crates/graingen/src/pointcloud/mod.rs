//! Grain point clouds: data model, dataset normalization, feature
//! enrichment, and rotation augmentation.
//!
//! Raw clouds carry millimeter coordinates straight from the surface-mesh
//! vertices. Normalization centers every cloud at its centroid and divides
//! all clouds by one shared scale so every coordinate lies strictly inside
//! (-1, 1) while relative grain size is preserved.

pub mod dataset;
pub mod node2vec;
pub mod ply;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{mat_apply, rotation_from_euler_xyz, Vec3};
use crate::rng::{uniform, RunRng};

/// Point count every training cloud must have.
pub const CANONICAL_POINTS: usize = 600;

/// Width of the node-embedding feature block attached to each point.
pub const FEATURE_DIM: usize = 8;

/// Margin applied to the global scale so boundary coordinates land strictly
/// inside the open interval (-1, 1).
pub const SCALE_MARGIN: f64 = 1.0001;

/// Scale state of a cloud's coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleState {
    /// Millimeters, as ingested.
    Raw,
    /// Centered at the origin, coordinates in (-1, 1).
    Normalized,
}

/// A grain surface sampled as an ordered set of 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub id: String,
    pub points: Vec<Vec3>,
    pub scale_state: ScaleState,
}

impl PointCloud {
    pub fn new_raw(id: impl Into<String>, points: Vec<Vec3>) -> Self {
        PointCloud { id: id.into(), points, scale_state: ScaleState::Raw }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = Vec3::ZERO;
        for &p in &self.points {
            c += p;
        }
        c * (1.0 / self.points.len().max(1) as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }

    /// Largest absolute coordinate over all points.
    pub fn max_abs_coordinate(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.x.abs().max(p.y.abs()).max(p.z.abs()))
            .fold(0.0, f64::max)
    }
}

/// Point cloud with its per-point node-embedding features attached.
#[derive(Debug, Clone)]
pub struct EnhancedPointCloud {
    pub base: PointCloud,
    /// `len() x FEATURE_DIM` block, row-major.
    pub features: Vec<f32>,
}

impl EnhancedPointCloud {
    pub fn new(base: PointCloud, features: Vec<f32>) -> Result<Self> {
        if features.len() != base.len() * FEATURE_DIM {
            return Err(Error::Dataset(format!(
                "grain {}: feature block has {} values, expected {} x {FEATURE_DIM}",
                base.id,
                features.len(),
                base.len()
            )));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite(format!("features of grain {}", base.id)));
        }
        Ok(EnhancedPointCloud { base, features })
    }
}

/// Per-grain record in the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrainEntry {
    pub id: String,
    /// Raw-space centroid subtracted during normalization (mm).
    pub centroid: Vec3,
    pub split: Split,
    /// True for rotation-augmented copies, which never enter diffusion
    /// training.
    pub augmented: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
}

/// Dataset-level bookkeeping required to invert normalization and to keep
/// splits reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Global divisor (mm) applied to every centered cloud, margin included.
    pub scale: f64,
    pub seed: u64,
    /// Euler convention used by the augmentation pass.
    pub euler_convention: String,
    pub grains: Vec<GrainEntry>,
}

impl DatasetManifest {
    pub fn entry(&self, id: &str) -> Option<&GrainEntry> {
        self.grains.iter().find(|g| g.id == id)
    }

    pub fn ids_for(&self, split: Split, include_augmented: bool) -> Vec<String> {
        self.grains
            .iter()
            .filter(|g| g.split == split && (include_augmented || !g.augmented))
            .map(|g| g.id.clone())
            .collect()
    }

    /// Ids of original (non-augmented) grains, the diffusion training set.
    pub fn original_ids(&self) -> Vec<String> {
        self.grains.iter().filter(|g| !g.augmented).map(|g| g.id.clone()).collect()
    }
}

/// Outcome of dataset normalization.
pub struct NormalizedDataset {
    pub clouds: Vec<PointCloud>,
    pub manifest: DatasetManifest,
    /// `(id, point count)` of clouds rejected by the point-count rule.
    pub rejected: Vec<(String, usize)>,
}

/// Center every cloud at its centroid and scale all clouds by one shared
/// factor so coordinates are strictly inside (-1, 1).
///
/// Clouds whose point count differs from `required_points` are rejected and
/// reported, not an error: the scan database is known to contain a few
/// under-sampled meshes.
pub fn normalize_dataset(
    clouds: Vec<PointCloud>,
    required_points: usize,
    seed: u64,
) -> Result<NormalizedDataset> {
    let mut rejected = Vec::new();
    let mut accepted = Vec::new();
    for cloud in clouds {
        if cloud.len() != required_points {
            rejected.push((cloud.id.clone(), cloud.len()));
            continue;
        }
        if !cloud.is_finite() {
            return Err(Error::NonFinite(format!("raw cloud {}", cloud.id)));
        }
        if cloud.scale_state != ScaleState::Raw {
            return Err(Error::Dataset(format!("cloud {} is already normalized", cloud.id)));
        }
        accepted.push(cloud);
    }
    if accepted.is_empty() {
        return Err(Error::Dataset("no clouds left after point-count filtering".into()));
    }

    let mut centered = Vec::with_capacity(accepted.len());
    let mut entries = Vec::with_capacity(accepted.len());
    let mut max_extent = 0.0f64;
    for cloud in accepted {
        let centroid = cloud.centroid();
        let points: Vec<Vec3> = cloud.points.iter().map(|&p| p - centroid).collect();
        let shifted = PointCloud { id: cloud.id.clone(), points, scale_state: ScaleState::Raw };
        max_extent = max_extent.max(shifted.max_abs_coordinate());
        entries.push(GrainEntry {
            id: cloud.id,
            centroid,
            split: Split::Train,
            augmented: false,
        });
        centered.push(shifted);
    }
    if max_extent == 0.0 {
        return Err(Error::Dataset("all clouds are degenerate points".into()));
    }
    let scale = max_extent * SCALE_MARGIN;
    let inv = 1.0 / scale;
    let clouds: Vec<PointCloud> = centered
        .into_iter()
        .map(|c| PointCloud {
            id: c.id,
            points: c.points.iter().map(|&p| p * inv).collect(),
            scale_state: ScaleState::Normalized,
        })
        .collect();

    Ok(NormalizedDataset {
        clouds,
        manifest: DatasetManifest {
            scale,
            seed,
            euler_convention: "intrinsic-xyz".to_string(),
            grains: entries,
        },
        rejected,
    })
}

/// Map a normalized cloud back to raw millimeters. The centroid is restored
/// when the manifest knows the grain; generated grains scale around the
/// origin.
pub fn denormalize(cloud: &PointCloud, manifest: &DatasetManifest) -> PointCloud {
    let centroid = manifest.entry(&cloud.id).map(|e| e.centroid).unwrap_or(Vec3::ZERO);
    PointCloud {
        id: cloud.id.clone(),
        points: cloud.points.iter().map(|&p| p * manifest.scale + centroid).collect(),
        scale_state: ScaleState::Raw,
    }
}

/// Append one randomly rotated copy per cloud, exactly doubling the dataset.
///
/// Rotations use three uniform Euler angles in [-pi/2, pi/2] (intrinsic
/// X-Y-Z). Copies are re-centered before rotating; node features carry over
/// unchanged since they depend only on connectivity. Copies are flagged
/// `augmented` in the manifest so they never reach diffusion training.
pub fn augment_rotations(
    clouds: &mut Vec<EnhancedPointCloud>,
    manifest: &mut DatasetManifest,
    rng: &mut RunRng,
) {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let originals = clouds.len();
    for i in 0..originals {
        let (ax, ay, az) = (
            uniform(rng, -half_pi, half_pi),
            uniform(rng, -half_pi, half_pi),
            uniform(rng, -half_pi, half_pi),
        );
        let rot = rotation_from_euler_xyz(ax, ay, az);
        let source = &clouds[i];
        let centroid = source.base.centroid();
        let points: Vec<Vec3> =
            source.base.points.iter().map(|&p| mat_apply(&rot, p - centroid)).collect();
        let id = format!("{}_rot", source.base.id);
        let entry = manifest
            .entry(&source.base.id)
            .cloned()
            .unwrap_or_else(|| GrainEntry {
                id: source.base.id.clone(),
                centroid: Vec3::ZERO,
                split: Split::Train,
                augmented: false,
            });
        manifest.grains.push(GrainEntry {
            id: id.clone(),
            centroid: entry.centroid,
            split: entry.split,
            augmented: true,
        });
        let copy = EnhancedPointCloud {
            base: PointCloud { id, points, scale_state: source.base.scale_state },
            features: source.features.clone(),
        };
        clouds.push(copy);
    }
}

/// Assign train/validation splits by uniform shuffle with the run seed.
pub fn assign_splits(manifest: &mut DatasetManifest, validation_fraction: f64, rng: &mut RunRng) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..manifest.grains.len()).collect();
    order.shuffle(rng);
    let n_val = (manifest.grains.len() as f64 * validation_fraction).round() as usize;
    for (rank, idx) in order.into_iter().enumerate() {
        manifest.grains[idx].split =
            if rank < n_val { Split::Validation } else { Split::Train };
    }
}
