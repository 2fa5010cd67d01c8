//! Seeded synthetic graphs: stochastic block models for correctness and
//! ablation runs, and regular graphs for the scaling bench.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, SplitSpec};
use crate::rng::{self, stream};

/// Two-or-more-block SBM with block-aligned gaussian features and labels
/// equal to the block id.
#[derive(Clone, Debug)]
pub struct SbmSpec {
    pub nodes: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    /// Mean offset on the block's own feature dims; lower it to make labels
    /// depend more on structure than on raw features.
    pub feat_shift: f64,
    pub feat_noise: f64,
    pub ratios: [f64; 3],
}

impl SbmSpec {
    /// Cleanly feature-separable two-block instance.
    pub fn feature_friendly(nodes: usize) -> Self {
        Self {
            nodes,
            blocks: 2,
            p_in: 0.1,
            p_out: 0.01,
            feat_dim: 16,
            feat_shift: 1.0,
            feat_noise: 1.0,
            ratios: [0.6, 0.2, 0.2],
        }
    }

    /// Weak features, strong homophily: classification needs the structure.
    pub fn structure_bound(nodes: usize) -> Self {
        Self {
            nodes,
            blocks: 2,
            p_in: 0.1,
            p_out: 0.01,
            feat_dim: 16,
            feat_shift: 0.25,
            feat_noise: 1.0,
            ratios: [0.6, 0.2, 0.2],
        }
    }
}

pub fn sbm(spec: &SbmSpec, seed: u64) -> Graph {
    let n = spec.nodes;
    let blocks = spec.blocks.max(1);
    let block_of = |i: usize| (i * blocks / n) as u32;

    let mut r = rng::rng(seed, &[stream::SYNTH, 1]);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block_of(i) == block_of(j) { spec.p_in } else { spec.p_out };
            if r.random::<f64>() < p {
                edges.push((i as u32, j as u32));
            }
        }
    }

    let mut fr = rng::rng(seed, &[stream::SYNTH, 2]);
    let normal = Normal::new(0.0, spec.feat_noise).unwrap();
    let dims_per_block = (spec.feat_dim / blocks).max(1);
    let mut features = Vec::with_capacity(n * spec.feat_dim);
    for i in 0..n {
        let b = block_of(i) as usize;
        for d in 0..spec.feat_dim {
            let mean = if d / dims_per_block == b { spec.feat_shift } else { 0.0 };
            features.push(mean + normal.sample(&mut fr));
        }
    }
    let labels: Vec<u32> = (0..n).map(block_of).collect();

    Graph::from_parts(
        &edges,
        features,
        spec.feat_dim,
        labels,
        SplitSpec::stratified(spec.ratios, rng::derive(seed, &[stream::SYNTH, 3])),
    )
    .expect("SBM construction is always valid")
}

/// 20-node two-cluster toy used by training sanity tests.
pub fn two_cluster_toy(seed: u64) -> Graph {
    let spec = SbmSpec {
        nodes: 20,
        blocks: 2,
        p_in: 0.6,
        p_out: 0.05,
        feat_dim: 8,
        feat_shift: 1.0,
        feat_noise: 0.5,
        ratios: [0.6, 0.2, 0.2],
    };
    sbm(&spec, seed)
}

/// Exactly `degree`-regular graph: a circulant relabeled by a seeded
/// permutation. `degree` must be even or `n` even, and `degree < n`.
pub fn regular_graph(n: usize, degree: usize, seed: u64) -> Graph {
    assert!(degree < n, "degree {degree} must be below n {n}");
    assert!(
        degree % 2 == 0 || n % 2 == 0,
        "odd degree needs an even node count"
    );
    let mut label: Vec<u32> = (0..n as u32).collect();
    use rand::seq::SliceRandom;
    label.shuffle(&mut rng::rng(seed, &[stream::SYNTH, 4]));

    let mut edges = Vec::with_capacity(n * degree / 2);
    for t in 1..=degree / 2 {
        for i in 0..n {
            edges.push((label[i], label[(i + t) % n]));
        }
    }
    if degree % 2 == 1 {
        for i in 0..n / 2 {
            edges.push((label[i], label[i + n / 2]));
        }
    }

    let feat_dim = 8;
    let mut fr = rng::rng(seed, &[stream::SYNTH, 5]);
    let features: Vec<f64> = (0..n * feat_dim).map(|_| fr.random::<f64>() * 2.0 - 1.0).collect();
    let labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
    Graph::from_parts(
        &edges,
        features,
        feat_dim,
        labels,
        SplitSpec::stratified([0.6, 0.2, 0.2], rng::derive(seed, &[stream::SYNTH, 6])),
    )
    .expect("regular graph construction is always valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Split;

    #[test]
    fn sbm_is_deterministic_and_stratified() {
        let spec = SbmSpec::feature_friendly(200);
        let a = sbm(&spec, 7);
        let b = sbm(&spec, 7);
        assert_eq!(a, b);
        assert_ne!(a, sbm(&spec, 8));
        assert_eq!(a.num_nodes(), 200);
        assert_eq!(a.num_classes(), 2);
        let train = a.split_nodes(Split::Train).len();
        assert_eq!(train, 120);
    }

    #[test]
    fn sbm_block_densities_are_ordered() {
        let spec = SbmSpec::feature_friendly(200);
        let g = sbm(&spec, 3);
        let mut within = 0usize;
        let mut across = 0usize;
        for i in 0..g.num_nodes() as u32 {
            for &j in g.neighbors(i) {
                if g.label(i) == g.label(j) {
                    within += 1;
                } else {
                    across += 1;
                }
            }
        }
        assert!(within > 5 * across, "within {within} across {across}");
    }

    #[test]
    fn regular_graph_has_uniform_degree() {
        for (n, k) in [(100, 8), (101, 8), (64, 3)] {
            let g = regular_graph(n, k, 5);
            for v in 0..n as u32 {
                assert_eq!(g.degree(v), k, "node {v} of ({n},{k})");
            }
            assert!(g.is_symmetric());
        }
    }
}
