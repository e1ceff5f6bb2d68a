//! Node embeddings from biased random walks and skip-gram training.
//!
//! For each grain the unweighted, undirected surface-mesh graph is walked;
//! walk windows feed a skip-gram objective with negative sampling. The
//! 8-dimensional input vectors become the per-point feature block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{RunRng, uniform};

/// Walk and training hyperparameters (dimension fixed to the feature width).
#[derive(Debug, Clone)]
pub struct Node2VecConfig {
    pub dimensions: usize,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    /// Return parameter `p` of the biased walk.
    pub return_p: f64,
    /// In-out parameter `q` of the biased walk.
    pub in_out_q: f64,
    pub negative_samples: usize,
    pub epochs: usize,
    pub initial_lr: f64,
}

impl Default for Node2VecConfig {
    fn default() -> Self {
        Node2VecConfig {
            dimensions: super::FEATURE_DIM,
            walks_per_node: 10,
            walk_length: 20,
            window: 5,
            return_p: 1.0,
            in_out_q: 1.0,
            negative_samples: 5,
            epochs: 5,
            initial_lr: 0.025,
        }
    }
}

/// Undirected graph as a sorted adjacency list; node order matches point
/// order.
#[derive(Debug, Clone)]
pub struct MeshGraph {
    adjacency: Vec<Vec<usize>>,
}

impl MeshGraph {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adjacency = vec![Vec::new(); node_count];
        for (a, b) in edges {
            if a == b || a >= node_count || b >= node_count {
                continue;
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        MeshGraph { adjacency }
    }

    /// Build from triangle faces.
    pub fn from_faces(node_count: usize, faces: &[[usize; 3]]) -> Self {
        let edges = faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .collect::<Vec<_>>();
        Self::new(node_count, edges)
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    /// Connected components as sorted node lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut components = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut queue = vec![start];
            let mut comp = Vec::new();
            seen[start] = true;
            while let Some(v) = queue.pop() {
                comp.push(v);
                for &u in &self.adjacency[v] {
                    if !seen[u] {
                        seen[u] = true;
                        queue.push(u);
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
        components
    }
}

/// One second-order biased walk starting at `start`.
fn biased_walk(
    graph: &MeshGraph,
    start: usize,
    length: usize,
    config: &Node2VecConfig,
    rng: &mut RunRng,
) -> Vec<usize> {
    let mut walk = Vec::with_capacity(length);
    walk.push(start);
    while walk.len() < length {
        let current = *walk.last().unwrap();
        let neighbors = graph.neighbors(current);
        if neighbors.is_empty() {
            break;
        }
        let next = if walk.len() == 1 {
            neighbors[rng.gen_range(0..neighbors.len())]
        } else {
            let prev = walk[walk.len() - 2];
            // Unnormalized transition weights: 1/p back to the previous
            // node, 1 to common neighbors of prev, 1/q otherwise.
            let weights: Vec<f64> = neighbors
                .iter()
                .map(|&n| {
                    if n == prev {
                        1.0 / config.return_p
                    } else if graph.neighbors(prev).binary_search(&n).is_ok() {
                        1.0
                    } else {
                        1.0 / config.in_out_q
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut draw = uniform(rng, 0.0, total);
            let mut chosen = neighbors[neighbors.len() - 1];
            for (&n, &w) in neighbors.iter().zip(&weights) {
                if draw < w {
                    chosen = n;
                    break;
                }
                draw -= w;
            }
            chosen
        };
        walk.push(next);
    }
    walk
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Learn an `n x dimensions` embedding for a connected mesh graph.
///
/// Deterministic for a given seed: walks, window pairs, and negative draws
/// all come from one stream in a fixed order.
pub fn node2vec_features(
    graph: &MeshGraph,
    config: &Node2VecConfig,
    rng: &mut RunRng,
) -> Result<Vec<f32>> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::Dataset("node2vec: empty graph".into()));
    }
    let components = graph.components();
    if components.len() > 1 {
        let sizes: Vec<usize> = components.iter().map(Vec::len).collect();
        return Err(Error::Dataset(format!(
            "node2vec: graph is disconnected ({} components with sizes {:?})",
            components.len(),
            sizes
        )));
    }
    let dim = config.dimensions;
    let bound = 0.5 / dim as f64;
    let mut input: Vec<f64> = (0..n * dim).map(|_| uniform(rng, -bound, bound)).collect();
    let mut output: Vec<f64> = vec![0.0; n * dim];

    // Walk corpus, regenerated once; epochs re-iterate over it.
    let mut walks = Vec::with_capacity(n * config.walks_per_node);
    for _ in 0..config.walks_per_node {
        for start in 0..n {
            walks.push(biased_walk(graph, start, config.walk_length, config, rng));
        }
    }

    let total_updates: u64 = (config.epochs * walks.len()) as u64;
    let mut done: u64 = 0;
    for _epoch in 0..config.epochs {
        for walk in &walks {
            let progress = done as f64 / total_updates.max(1) as f64;
            let lr = (config.initial_lr * (1.0 - progress)).max(config.initial_lr * 1e-3);
            for (pos, &center) in walk.iter().enumerate() {
                let lo = pos.saturating_sub(config.window);
                let hi = (pos + config.window + 1).min(walk.len());
                for ctx_pos in lo..hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = walk[ctx_pos];
                    train_pair(
                        &mut input,
                        &mut output,
                        center,
                        context,
                        dim,
                        lr,
                        config.negative_samples,
                        n,
                        rng,
                    );
                }
            }
            done += 1;
        }
    }
    Ok(input.iter().map(|&v| v as f32).collect())
}

#[allow(clippy::too_many_arguments)]
fn train_pair(
    input: &mut [f64],
    output: &mut [f64],
    center: usize,
    context: usize,
    dim: usize,
    lr: f64,
    negatives: usize,
    n: usize,
    rng: &mut RunRng,
) {
    let mut center_grad = vec![0.0; dim];
    {
        // Positive pair.
        let dot: f64 = (0..dim).map(|d| input[center * dim + d] * output[context * dim + d]).sum();
        let g = (sigmoid(dot) - 1.0) * lr;
        for d in 0..dim {
            center_grad[d] += g * output[context * dim + d];
            output[context * dim + d] -= g * input[center * dim + d];
        }
    }
    for _ in 0..negatives {
        let target = rng.gen_range(0..n);
        if target == context {
            continue;
        }
        let dot: f64 = (0..dim).map(|d| input[center * dim + d] * output[target * dim + d]).sum();
        let g = sigmoid(dot) * lr;
        for d in 0..dim {
            center_grad[d] += g * output[target * dim + d];
            output[target * dim + d] -= g * input[center * dim + d];
        }
    }
    for d in 0..dim {
        input[center * dim + d] -= center_grad[d];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::run_rng;

    fn ring(n: usize) -> MeshGraph {
        MeshGraph::new(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    }

    #[test]
    fn output_shape_is_n_by_8() {
        let g = ring(30);
        let mut rng = run_rng(1);
        let feats = node2vec_features(&g, &Node2VecConfig::default(), &mut rng).unwrap();
        assert_eq!(feats.len(), 30 * 8);
        assert!(feats.iter().all(|f| f.is_finite()));
    }

    #[test]
    fn deterministic_for_seed() {
        let g = ring(20);
        let cfg = Node2VecConfig::default();
        let a = node2vec_features(&g, &cfg, &mut run_rng(9)).unwrap();
        let b = node2vec_features(&g, &cfg, &mut run_rng(9)).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn disconnected_graph_lists_components() {
        let g = MeshGraph::new(6, [(0, 1), (1, 2), (3, 4), (4, 5)]);
        let mut rng = run_rng(1);
        let err = node2vec_features(&g, &Node2VecConfig::default(), &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 components"), "{msg}");
    }

    #[test]
    fn ring_adjacency_beats_antipodes() {
        // Statistical oracle: embeddings of adjacent ring nodes are more
        // similar than embeddings of antipodal nodes, averaged over seeds.
        let n = 50;
        let g = ring(n);
        let cfg = Node2VecConfig { epochs: 3, walks_per_node: 6, ..Default::default() };
        let mut adjacent_total = 0.0;
        let mut antipodal_total = 0.0;
        for seed in 0..20 {
            let feats = node2vec_features(&g, &cfg, &mut run_rng(seed)).unwrap();
            let emb = |i: usize| &feats[i * 8..(i + 1) * 8];
            let mut adj = 0.0;
            let mut anti = 0.0;
            for i in 0..n {
                adj += cosine(emb(i), emb((i + 1) % n));
                anti += cosine(emb(i), emb((i + n / 2) % n));
            }
            adjacent_total += adj / n as f64;
            antipodal_total += anti / n as f64;
        }
        let adjacent = adjacent_total / 20.0;
        let antipodal = antipodal_total / 20.0;
        assert!(
            adjacent > antipodal,
            "adjacent similarity {adjacent} must exceed antipodal {antipodal}"
        );
    }

    #[test]
    fn faces_build_expected_graph() {
        let g = MeshGraph::from_faces(4, &[[0, 1, 2], [0, 2, 3]]);
        assert_eq!(g.neighbors(0), &[1, 2, 3]);
        assert_eq!(g.neighbors(2), &[0, 1, 3]);
        assert_eq!(g.components().len(), 1);
    }
}
