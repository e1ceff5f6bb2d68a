//! Point cloud autoencoder: enhanced clouds in, 28x28 latent grids out,
//! Chamfer-trained decoder back to 600x3 coordinates.
//!
//! Encoder: pointwise conv 11 -> 64, PReLU, pointwise conv 64 -> 784,
//! PReLU, global max pool over points. Decoder: dense 784 -> 64, PReLU,
//! dense 64 -> 1800, reshaped to (600, 3). The pooled 784-vector is the
//! latent grid; pooling makes the embedding exactly invariant under point
//! permutations.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::pointcloud::{EnhancedPointCloud, PointCloud, ScaleState, FEATURE_DIM};
use crate::rng::RunRng;
use crate::tensor::layers;
use crate::tensor::{Adam, AdamConfig, Elem, Graph, ParamStore, PlateauConfig, PlateauScheduler, Tensor, Var};

/// Latent grid side; the embedding holds `LATENT_SIDE^2` values.
pub const LATENT_SIDE: usize = 28;
/// Flattened latent width (784).
pub const LATENT_DIM: usize = LATENT_SIDE * LATENT_SIDE;
/// Decoder output point count.
pub const OUTPUT_POINTS: usize = 600;

const INPUT_DIM: usize = 3 + FEATURE_DIM;
const HIDDEN: usize = 64;

/// One encoded grain.
#[derive(Debug, Clone)]
pub struct LatentEmbedding {
    pub id: String,
    /// Row-major 28x28 grid.
    pub grid: Vec<f32>,
}

impl LatentEmbedding {
    pub fn new(id: impl Into<String>, grid: Vec<f32>) -> Result<Self> {
        if grid.len() != LATENT_DIM {
            return Err(Error::shape("latent_embedding", format!("{} values, expected {LATENT_DIM}", grid.len())));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent embedding".into()));
        }
        Ok(LatentEmbedding { id: id.into(), grid })
    }

    pub fn to_tensor<E: Elem>(&self) -> Tensor<E> {
        Tensor::new(
            vec![LATENT_SIDE, LATENT_SIDE],
            self.grid.iter().map(|&v| E::of_f64(v as f64)).collect(),
        )
    }
}

/// Dataset-wide affine map between raw latent values and the `[-1, 1]`
/// diffusion input range.
#[derive(Debug, Clone, Copy)]
pub struct LatentScale {
    pub min: f32,
    pub max: f32,
}

impl LatentScale {
    pub fn to_unit(&self, v: f32) -> f32 {
        if self.max == self.min {
            0.0
        } else {
            2.0 * (v - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn from_unit(&self, u: f32) -> f32 {
        self.min + (u + 1.0) * (self.max - self.min) / 2.0
    }
}

/// Autoencoder parameters with fixed layer widths.
pub struct AutoencoderModel<E: Elem> {
    pub params: ParamStore<E>,
}

const PARAM_PATHS: [&str; 10] = [
    "encoder.conv1.w",
    "encoder.conv1.b",
    "encoder.prelu1",
    "encoder.conv2.w",
    "encoder.conv2.b",
    "encoder.prelu2",
    "decoder.fc1.w",
    "decoder.fc1.b",
    "decoder.prelu",
    "decoder.fc2.w",
];

impl<E: Elem> AutoencoderModel<E> {
    pub fn init(rng: &mut RunRng) -> Self {
        let mut p = ParamStore::new();
        let slope = Tensor::from_f64s(vec![1], &[layers::PRELU_INIT]);
        p.insert("encoder.conv1.w", layers::uniform_fan_in(rng, vec![INPUT_DIM, HIDDEN], INPUT_DIM)).unwrap();
        p.insert("encoder.conv1.b", layers::uniform_fan_in(rng, vec![HIDDEN], INPUT_DIM)).unwrap();
        p.insert("encoder.prelu1", slope.clone()).unwrap();
        p.insert("encoder.conv2.w", layers::uniform_fan_in(rng, vec![HIDDEN, LATENT_DIM], HIDDEN)).unwrap();
        p.insert("encoder.conv2.b", layers::uniform_fan_in(rng, vec![LATENT_DIM], HIDDEN)).unwrap();
        p.insert("encoder.prelu2", slope.clone()).unwrap();
        p.insert("decoder.fc1.w", layers::uniform_fan_in(rng, vec![LATENT_DIM, HIDDEN], LATENT_DIM)).unwrap();
        p.insert("decoder.fc1.b", layers::uniform_fan_in(rng, vec![HIDDEN], LATENT_DIM)).unwrap();
        p.insert("decoder.prelu", slope).unwrap();
        p.insert("decoder.fc2.w", layers::uniform_fan_in(rng, vec![HIDDEN, 3 * OUTPUT_POINTS], HIDDEN)).unwrap();
        p.insert("decoder.fc2.b", layers::uniform_fan_in(rng, vec![3 * OUTPUT_POINTS], HIDDEN)).unwrap();
        AutoencoderModel { params: p }
    }

    pub fn from_params(params: ParamStore<E>) -> Result<Self> {
        for path in PARAM_PATHS {
            if params.get(path).is_none() {
                return Err(Error::Config(format!("autoencoder checkpoint lacks {path}")));
            }
        }
        Ok(AutoencoderModel { params })
    }

    fn leaf(&self, leaves: &[Var], path: &str) -> Var {
        let idx = self.params.names().iter().position(|n| n == path).expect("known path");
        leaves[idx]
    }

    /// Encoder on a recorded graph: `(points, 11) -> (784)`.
    pub fn encode_graph(&self, g: &mut Graph<E>, leaves: &[Var], x: Var) -> Result<Var> {
        let h = layers::pointwise_conv1d(g, x, self.leaf(leaves, "encoder.conv1.w"), self.leaf(leaves, "encoder.conv1.b"))?;
        let h = layers::prelu(g, h, self.leaf(leaves, "encoder.prelu1"))?;
        let h = layers::pointwise_conv1d(g, h, self.leaf(leaves, "encoder.conv2.w"), self.leaf(leaves, "encoder.conv2.b"))?;
        let h = layers::prelu(g, h, self.leaf(leaves, "encoder.prelu2"))?;
        layers::global_max_pool(g, h)
    }

    /// Decoder on a recorded graph: `(784) -> (600, 3)`.
    pub fn decode_graph(&self, g: &mut Graph<E>, leaves: &[Var], latent: Var) -> Result<Var> {
        let row = g.reshape(latent, vec![1, LATENT_DIM]);
        let h = layers::dense(g, row, self.leaf(leaves, "decoder.fc1.w"), self.leaf(leaves, "decoder.fc1.b"))?;
        let h = layers::prelu(g, h, self.leaf(leaves, "decoder.prelu"))?;
        let h = layers::dense(g, h, self.leaf(leaves, "decoder.fc2.w"), self.leaf(leaves, "decoder.fc2.b"))?;
        Ok(g.reshape(h, vec![OUTPUT_POINTS, 3]))
    }

    /// Encode one cloud into a latent grid.
    pub fn encode(&self, cloud: &EnhancedPointCloud) -> Result<LatentEmbedding> {
        if cloud.base.scale_state != ScaleState::Normalized {
            return Err(Error::Dataset(format!("grain {}: encode expects a normalized cloud", cloud.base.id)));
        }
        let mut g = Graph::new();
        let leaves = self.params.inject(&mut g);
        let x = g.constant(cloud_tensor::<E>(cloud));
        let latent = self.encode_graph(&mut g, &leaves, x)?;
        let grid: Vec<f32> = g.value(latent).data().iter().map(|v| v.as_f64() as f32).collect();
        LatentEmbedding::new(cloud.base.id.clone(), grid)
    }

    /// Decode a latent grid into a normalized-space cloud. Output
    /// coordinates are clamped into `[-1, 1]` at this export boundary.
    pub fn decode(&self, embedding: &LatentEmbedding) -> Result<PointCloud> {
        let mut g = Graph::new();
        let leaves = self.params.inject(&mut g);
        let latent = g.constant(Tensor::new(
            vec![LATENT_DIM],
            embedding.grid.iter().map(|&v| E::of_f64(v as f64)).collect(),
        ));
        let out = self.decode_graph(&mut g, &leaves, latent)?;
        let data = g.value(out).data();
        let points = (0..OUTPUT_POINTS)
            .map(|i| {
                Vec3::from_array([
                    data[i * 3].as_f64().clamp(-1.0, 1.0),
                    data[i * 3 + 1].as_f64().clamp(-1.0, 1.0),
                    data[i * 3 + 2].as_f64().clamp(-1.0, 1.0),
                ])
            })
            .collect();
        Ok(PointCloud { id: embedding.id.clone(), points, scale_state: ScaleState::Normalized })
    }
}

/// Pack a cloud's coordinates and features into the `(points, 11)` input.
pub fn cloud_tensor<E: Elem>(cloud: &EnhancedPointCloud) -> Tensor<E> {
    let n = cloud.base.len();
    let mut data = Vec::with_capacity(n * INPUT_DIM);
    for (i, p) in cloud.base.points.iter().enumerate() {
        data.push(E::of_f64(p.x));
        data.push(E::of_f64(p.y));
        data.push(E::of_f64(p.z));
        for &f in &cloud.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM] {
            data.push(E::of_f64(f as f64));
        }
    }
    Tensor::new(vec![n, INPUT_DIM], data)
}

fn coords_tensor<E: Elem>(cloud: &PointCloud) -> Tensor<E> {
    let mut data = Vec::with_capacity(cloud.len() * 3);
    for p in &cloud.points {
        data.push(E::of_f64(p.x));
        data.push(E::of_f64(p.y));
        data.push(E::of_f64(p.z));
    }
    Tensor::new(vec![cloud.len(), 3], data)
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance in
/// each direction, summed. Exact brute force.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Geometry("chamfer: point clouds must be non-empty".into()));
    }
    Ok(directed_mean_sq(a, b) + directed_mean_sq(b, a))
}

fn directed_mean_sq(from: &PointCloud, to: &PointCloud) -> f64 {
    let mut total = 0.0;
    for &p in &from.points {
        let mut best = f64::INFINITY;
        for &q in &to.points {
            let d = (p - q).norm_sq();
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / from.len() as f64
}

/// Chamfer distance between a predicted `(n, 3)` graph value and a fixed
/// target, as a differentiable graph node.
pub fn chamfer_graph<E: Elem>(g: &mut Graph<E>, pred: Var, target: Var) -> Var {
    let d = g.pairwise_sqdist(pred, target);
    let row_min = g.min_axis1(d);
    let term_a = g.mean_all(row_min);
    let dt = g.transpose(d);
    let col_min = g.min_axis1(dt);
    let term_b = g.mean_all(col_min);
    g.add(term_a, term_b)
}

/// Mean Chamfer distance over all unordered cloud pairs; the scale
/// reference for reconstruction quality.
pub fn mean_pairwise_chamfer(clouds: &[PointCloud]) -> Result<f64> {
    if clouds.len() < 2 {
        return Err(Error::Dataset("pairwise chamfer needs at least two clouds".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..clouds.len())
        .flat_map(|i| ((i + 1)..clouds.len()).map(move |j| (i, j)))
        .collect();
    let total: f64 = pairs
        .par_iter()
        .map(|&(i, j)| chamfer(&clouds[i], &clouds[j]).expect("non-empty clouds"))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Training schedule for the autoencoder.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 1000, batch_size: 16, initial_lr: 1e-3, seed: 0 }
    }
}

/// Result of a training run.
pub struct TrainOutcome<E: Elem> {
    pub model: AutoencoderModel<E>,
    /// `(train loss, validation loss)` per epoch.
    pub history: Vec<(f64, f64)>,
    pub best_epoch: usize,
    pub best_validation: f64,
    /// Set when training aborted on a non-finite loss; the model is the
    /// last good checkpoint.
    pub aborted: Option<String>,
}

/// Train with Adam and the plateau schedule, minimizing mean Chamfer loss.
/// Checkpoints the best-validation parameters.
pub fn train_autoencoder<E: Elem>(
    train_set: &[EnhancedPointCloud],
    validation_set: &[EnhancedPointCloud],
    opts: &TrainOptions,
) -> Result<TrainOutcome<E>> {
    use rand::seq::SliceRandom;
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::Dataset("training requires non-empty train and validation sets".into()));
    }
    let mut rng = crate::rng::run_rng(opts.seed);
    let mut model = AutoencoderModel::<E>::init(&mut rng);
    let mut adam = Adam::new(AdamConfig::with_lr(opts.initial_lr));
    let mut scheduler = PlateauScheduler::new(PlateauConfig::default());

    let inputs: Vec<Tensor<E>> = train_set.iter().map(cloud_tensor).collect();
    let targets: Vec<Tensor<E>> = train_set.iter().map(|c| coords_tensor(&c.base)).collect();
    let val_inputs: Vec<Tensor<E>> = validation_set.iter().map(cloud_tensor).collect();
    let val_targets: Vec<Tensor<E>> = validation_set.iter().map(|c| coords_tensor(&c.base)).collect();

    let mut history = Vec::with_capacity(opts.epochs);
    let mut best_validation = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = model.params.cast::<E>();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let results: Vec<(Vec<Vec<E>>, f64)> = chunk
                .par_iter()
                .map(|&idx| {
                    let mut g = Graph::new();
                    let leaves = model.params.inject(&mut g);
                    let x = g.constant(inputs[idx].clone());
                    let target = g.constant(targets[idx].clone());
                    let latent = model.encode_graph(&mut g, &leaves, x).expect("encoder shapes");
                    let pred = model.decode_graph(&mut g, &leaves, latent).expect("decoder shapes");
                    let loss = chamfer_graph(&mut g, pred, target);
                    g.backward(loss).expect("scalar loss");
                    (model.params.collect_grads(&g, &leaves), g.value(loss).data()[0].as_f64())
                })
                .collect();
            // Fixed-order reduction keeps training bit-reproducible.
            let scale = E::of_f64(1.0 / chunk.len() as f64);
            let mut grads: Vec<Vec<E>> = results[0].0.clone();
            for (item_grads, _) in &results[1..] {
                for (acc, item) in grads.iter_mut().zip(item_grads) {
                    for (a, &v) in acc.iter_mut().zip(item) {
                        *a = *a + v;
                    }
                }
            }
            for buf in &mut grads {
                for v in buf.iter_mut() {
                    *v = *v * scale;
                }
            }
            let batch_loss: f64 = results.iter().map(|(_, l)| l).sum::<f64>() / chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Ok(TrainOutcome {
                    model: AutoencoderModel { params: best_params },
                    history,
                    best_epoch,
                    best_validation,
                    aborted: Some(format!("non-finite training loss at epoch {epoch}")),
                });
            }
            epoch_loss += batch_loss * chunk.len() as f64;
            adam.step(&mut model.params, &grads)?;
        }
        epoch_loss /= train_set.len() as f64;

        let val_loss = evaluate_chamfer(&model, &val_inputs, &val_targets);
        history.push((epoch_loss, val_loss));
        if val_loss < best_validation {
            best_validation = val_loss;
            best_epoch = epoch;
            best_params = model.params.cast::<E>();
        }
        adam.config.lr = scheduler.step(val_loss, adam.config.lr);
    }
    Ok(TrainOutcome {
        model: AutoencoderModel { params: best_params },
        history,
        best_epoch,
        best_validation,
        aborted: None,
    })
}

fn evaluate_chamfer<E: Elem>(
    model: &AutoencoderModel<E>,
    inputs: &[Tensor<E>],
    targets: &[Tensor<E>],
) -> f64 {
    let losses: Vec<f64> = inputs
        .par_iter()
        .zip(targets)
        .map(|(x, target)| {
            let mut g = Graph::new();
            let leaves = model.params.inject(&mut g);
            let xv = g.constant(x.clone());
            let tv = g.constant(target.clone());
            let latent = model.encode_graph(&mut g, &leaves, xv).expect("encoder shapes");
            let pred = model.decode_graph(&mut g, &leaves, latent).expect("decoder shapes");
            let loss = chamfer_graph(&mut g, pred, tv);
            g.value(loss).data()[0].as_f64()
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Encode every cloud and record the dataset latent range for the
/// diffusion-space affine map.
pub fn embed_dataset<E: Elem>(
    model: &AutoencoderModel<E>,
    clouds: &[EnhancedPointCloud],
) -> Result<(Vec<LatentEmbedding>, LatentScale)> {
    if clouds.is_empty() {
        return Err(Error::Dataset("embed_dataset: no clouds".into()));
    }
    let embeddings: Vec<LatentEmbedding> = clouds
        .par_iter()
        .map(|c| model.encode(c))
        .collect::<Result<Vec<_>>>()?;
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for e in &embeddings {
        for &v in &e.grid {
            min = min.min(v);
            max = max.max(v);
        }
    }
    Ok((embeddings, LatentScale { min, max }))
}

// ── Embedding file format ("GRE1") ─────────────────────────────────

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GRE1";
const EMBEDDING_VERSION: u32 = 1;

/// Write embeddings with the latent range and metadata in the header.
pub fn write_embeddings(
    path: impl AsRef<Path>,
    embeddings: &[LatentEmbedding],
    scale: LatentScale,
    meta: &std::collections::BTreeMap<String, String>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    out.extend_from_slice(&scale.min.to_le_bytes());
    out.extend_from_slice(&scale.max.to_le_bytes());
    out.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    for e in embeddings {
        out.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
        out.extend_from_slice(e.id.as_bytes());
        for &v in &e.grid {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Read a GRE1 embedding file.
#[allow(clippy::type_complexity)]
pub fn read_embeddings(
    path: impl AsRef<Path>,
) -> Result<(Vec<LatentEmbedding>, LatentScale, std::collections::BTreeMap<String, String>)> {
    let path_str = path.as_ref().display().to_string();
    let bytes = fs::read(path.as_ref())?;
    let bad = |msg: &str| Error::format(path_str.clone(), msg.to_string());
    if bytes.len() < 8 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad("missing GRE1 magic"));
    }
    let mut pos = 4usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::format(path_str.clone(), "truncated embedding file"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(bad("unsupported version"));
    }
    let meta_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let meta_text = String::from_utf8(take(meta_len)?.to_vec()).map_err(|_| bad("non-UTF-8 metadata"))?;
    let mut meta = std::collections::BTreeMap::new();
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let min = f32::from_le_bytes(take(4)?.try_into().unwrap());
    let max = f32::from_le_bytes(take(4)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut embeddings = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("non-UTF-8 id"))?;
        let raw = take(LATENT_DIM * 4)?;
        let grid: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        embeddings.push(LatentEmbedding::new(id, grid)?);
    }
    Ok((embeddings, LatentScale { min, max }, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vec3;
    use crate::pointcloud::synthetic::ellipsoid_cloud;
    use crate::rng::run_rng;

    fn pc(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud {
            id: "t".into(),
            points: pts.iter().map(|&a| Vec3::from_array(a)).collect(),
            scale_state: ScaleState::Normalized,
        }
    }

    #[test]
    fn chamfer_identity_is_zero() {
        let a = pc(&[[0.1, 0.2, 0.3], [-0.4, 0.0, 0.2]]);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_single_pair() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_uneven_counts_brute_force() {
        // P_A = {(0,0,0), (2,0,0)}, P_B = {(0,0,0)}: (0 + 4)/2 + 0/1 = 2.
        let a = pc(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let b = pc(&[[0.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_symmetric_bit_exact() {
        let mut rng = run_rng(4);
        let a = ellipsoid_cloud("a", vec3(0.2, 0.15, 0.1), 40, &mut rng);
        let b = ellipsoid_cloud("b", vec3(0.1, 0.22, 0.18), 55, &mut rng);
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert!(ab > 0.0);
        let empty = PointCloud { id: "e".into(), points: vec![], scale_state: ScaleState::Raw };
        assert!(chamfer(&a, &empty).is_err());
    }

    #[test]
    fn chamfer_graph_matches_brute_force_and_differentiates() {
        use crate::tensor::gradcheck::check_gradients;
        let mut rng = run_rng(8);
        let a = ellipsoid_cloud("a", vec3(0.2, 0.15, 0.1), 12, &mut rng);
        let b = ellipsoid_cloud("b", vec3(0.15, 0.2, 0.12), 9, &mut rng);
        let ta = coords_tensor::<f64>(&a);
        let tb = coords_tensor::<f64>(&b);
        let mut g = Graph::new();
        let va = g.constant(ta.clone());
        let vb = g.constant(tb.clone());
        let loss = chamfer_graph(&mut g, va, vb);
        let brute = chamfer(&a, &b).unwrap();
        assert!((g.value(loss).data()[0] - brute).abs() < 1e-12);

        let report = check_gradients(&[ta, tb], None, |g, vars| chamfer_graph(g, vars[0], vars[1]));
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    fn enhanced(cloud: PointCloud) -> EnhancedPointCloud {
        let n = cloud.len();
        let features: Vec<f32> = (0..n * FEATURE_DIM).map(|i| ((i % 17) as f32) / 17.0).collect();
        EnhancedPointCloud::new(cloud, features).unwrap()
    }

    #[test]
    fn encode_is_permutation_invariant_bit_exact() {
        let mut rng = run_rng(10);
        let mut cloud = ellipsoid_cloud("g", vec3(0.25, 0.2, 0.15), 64, &mut rng);
        cloud.scale_state = ScaleState::Normalized;
        let e = enhanced(cloud);
        let model = AutoencoderModel::<f32>::init(&mut rng);
        let original = model.encode(&e).unwrap();

        // Shuffle points together with their feature rows.
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..e.base.len()).collect();
        order.shuffle(&mut rng);
        let points: Vec<Vec3> = order.iter().map(|&i| e.base.points[i]).collect();
        let mut features = Vec::with_capacity(e.features.len());
        for &i in &order {
            features.extend_from_slice(&e.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]);
        }
        let shuffled = EnhancedPointCloud::new(
            PointCloud { id: "g".into(), points, scale_state: ScaleState::Normalized },
            features,
        )
        .unwrap();
        let permuted = model.encode(&shuffled).unwrap();
        assert_eq!(
            original.grid.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            permuted.grid.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn decode_emits_600_by_3_and_is_deterministic() {
        let mut rng = run_rng(11);
        let model = AutoencoderModel::<f32>::init(&mut rng);
        let grid: Vec<f32> = (0..LATENT_DIM).map(|i| (i as f32 / LATENT_DIM as f32) - 0.5).collect();
        let emb = LatentEmbedding::new("sample", grid).unwrap();
        let a = model.decode(&emb).unwrap();
        let b = model.decode(&emb).unwrap();
        assert_eq!(a.len(), OUTPUT_POINTS);
        assert_eq!(a.points, b.points);
        assert!(a.points.iter().all(|p| p.x.abs() <= 1.0 && p.y.abs() <= 1.0 && p.z.abs() <= 1.0));
        let bad = LatentEmbedding::new("b", vec![f32::NAN; LATENT_DIM]);
        assert!(bad.is_err(), "non-finite embedding is rejected at construction");
    }

    #[test]
    fn latent_scale_round_trip() {
        let scale = LatentScale { min: -3.5, max: 9.25 };
        for v in [-3.5f32, 0.0, 2.0, 9.25] {
            let u = scale.to_unit(v);
            assert!((-1.0..=1.0).contains(&u));
            assert!((scale.from_unit(u) - v).abs() < 1e-5);
        }
    }

    #[test]
    fn embeddings_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.gre");
        let embeddings: Vec<LatentEmbedding> = (0..3)
            .map(|i| {
                LatentEmbedding::new(
                    format!("g{i}"),
                    (0..LATENT_DIM).map(|k| (k as f32) * 0.001 + i as f32).collect(),
                )
                .unwrap()
            })
            .collect();
        let scale = LatentScale { min: -1.5, max: 2.5 };
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("config_hash".to_string(), "cafebabe".to_string());
        write_embeddings(&path, &embeddings, scale, &meta).unwrap();
        let (back, scale2, meta2) = read_embeddings(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].id, "g1");
        assert_eq!(scale2.min, -1.5);
        assert_eq!(meta2.get("config_hash").map(String::as_str), Some("cafebabe"));
        for (a, b) in back.iter().zip(&embeddings) {
            assert_eq!(a.grid, b.grid);
        }
    }

    #[test]
    fn tiny_training_run_improves_and_reproduces() {
        let mut rng = run_rng(21);
        let clouds: Vec<EnhancedPointCloud> = (0..8)
            .map(|i| {
                let mut c = ellipsoid_cloud(
                    format!("e{i}"),
                    vec3(0.1 + 0.01 * i as f64, 0.15, 0.12),
                    OUTPUT_POINTS,
                    &mut rng,
                );
                c.scale_state = ScaleState::Normalized;
                enhanced(c)
            })
            .collect();
        let opts = TrainOptions { epochs: 3, batch_size: 4, initial_lr: 1e-3, seed: 5 };
        let run = || train_autoencoder::<f32>(&clouds[..6], &clouds[6..], &opts).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), 3);
        // Bit-identical histories for identical seeds.
        for ((ta, va), (tb, vb)) in a.history.iter().zip(&b.history) {
            assert_eq!(ta.to_bits(), tb.to_bits());
            assert_eq!(va.to_bits(), vb.to_bits());
        }
        // Best-so-far validation is non-increasing by construction.
        assert!(a.best_validation <= a.history[0].1);
        assert!(a.aborted.is_none());
    }
}
