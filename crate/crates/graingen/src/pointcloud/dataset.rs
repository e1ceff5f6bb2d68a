//! Normalized-dataset persistence: a JSON manifest plus one binary block
//! per grain holding the `N x 11` little-endian f32 rows
//! `(x, y, z, feature_0..feature_7)`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom::vec3;

use super::{DatasetManifest, EnhancedPointCloud, PointCloud, ScaleState, FEATURE_DIM};

pub const MANIFEST_FILE: &str = "manifest.json";
const ROW_WIDTH: usize = 3 + FEATURE_DIM;

fn block_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.bin"))
}

/// Write the manifest and every grain block into `dir`.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    clouds: &[EnhancedPointCloud],
    manifest: &DatasetManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), manifest_json)?;
    for cloud in clouds {
        let n = cloud.base.len();
        let mut bytes = Vec::with_capacity(n * ROW_WIDTH * 4);
        for (i, p) in cloud.base.points.iter().enumerate() {
            for coord in [p.x as f32, p.y as f32, p.z as f32] {
                bytes.extend_from_slice(&coord.to_le_bytes());
            }
            for f in &cloud.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM] {
                bytes.extend_from_slice(&f.to_le_bytes());
            }
        }
        fs::write(block_path(dir, &cloud.base.id), bytes)?;
    }
    Ok(())
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Dependency {
            artifact: path.display().to_string(),
            produced_by: "preprocess".to_string(),
        });
    }
    let text = fs::read_to_string(&path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Load one grain block by id.
pub fn load_grain(dir: impl AsRef<Path>, id: &str) -> Result<EnhancedPointCloud> {
    let path = block_path(dir.as_ref(), id);
    if !path.exists() {
        return Err(Error::Dependency {
            artifact: path.display().to_string(),
            produced_by: "preprocess".to_string(),
        });
    }
    let bytes = fs::read(&path)?;
    if bytes.len() % (ROW_WIDTH * 4) != 0 {
        return Err(Error::format(path.display().to_string(), "block size is not a row multiple"));
    }
    let n = bytes.len() / (ROW_WIDTH * 4);
    let mut points = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * FEATURE_DIM);
    for row in 0..n {
        let base = row * ROW_WIDTH * 4;
        let f = |k: usize| {
            f32::from_le_bytes(bytes[base + k * 4..base + k * 4 + 4].try_into().unwrap())
        };
        points.push(vec3(f(0) as f64, f(1) as f64, f(2) as f64));
        for k in 3..ROW_WIDTH {
            features.push(f(k));
        }
    }
    EnhancedPointCloud::new(
        PointCloud { id: id.to_string(), points, scale_state: ScaleState::Normalized },
        features,
    )
}

/// Load the whole dataset in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<EnhancedPointCloud>, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let clouds = manifest
        .grains
        .iter()
        .map(|entry| load_grain(dir, &entry.id))
        .collect::<Result<Vec<_>>>()?;
    Ok((clouds, manifest))
}
