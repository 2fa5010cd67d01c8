//! Node-to-sequence conversion: sample a layered ego-graph around a center
//! node, attach shared global-node slots, attach per-pair structural
//! proximity encodings, and assemble padded batches.
//!
//! Token order inside an instance is fixed: center at position 0, then the
//! sampled context nodes in draw order, then the global slots, then padding.
//! Attention over an instance is all-to-all across its non-PAD tokens —
//! structure enters only through the proximity encodings.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::graph::{AdjPowers, Graph, GraphError};
use crate::rng::{self, stream};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("fanouts {fanouts:?} do not match depth {depth}")]
    FanoutDepth { fanouts: Vec<usize>, depth: usize },
    #[error("samples_per_node must be >= 1")]
    NoSamples,
    #[error("proximity views must be >= 2 (identity view plus global indicator)")]
    TooFewViews,
    #[error("batch size {batch} is below the {samples} samples of one group")]
    BatchBelowGroup { batch: usize, samples: usize },
    #[error("cannot batch zero ego-graphs")]
    EmptyBatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Ego-graph sampling configuration.
#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub depth: usize,
    pub fanouts: Vec<usize>,
    pub samples_per_node: usize,
    pub num_global: usize,
    pub prox_views: usize,
    pub master_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            fanouts: vec![8, 4],
            samples_per_node: 2,
            num_global: 1,
            prox_views: 3,
            master_seed: 42,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.fanouts.len() != self.depth {
            return Err(SampleError::FanoutDepth {
                fanouts: self.fanouts.clone(),
                depth: self.depth,
            });
        }
        if self.samples_per_node == 0 {
            return Err(SampleError::NoSamples);
        }
        if self.prox_views < 2 {
            return Err(SampleError::TooFewViews);
        }
        Ok(())
    }

    /// Hard sequence-length bound: 1 + sum over layers of the cumulative
    /// fanout products, plus the global slots. Independent of graph size.
    pub fn max_tokens(&self) -> usize {
        let mut bound = 1usize;
        let mut frontier = 1usize;
        for &f in &self.fanouts {
            frontier *= f;
            bound += frontier;
        }
        bound + self.num_global
    }
}

/// Identifies one draw so its RNG stream is reproducible in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleKey {
    pub epoch: u64,
    pub sample_idx: u64,
}

/// A sampled ego-graph: member 0 is the center; members are deduplicated and
/// tagged with the layer they were first drawn at (diagnostic only).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EgoGraph {
    pub center: u32,
    pub members: Vec<u32>,
    pub hops: Vec<u8>,
}

impl EgoGraph {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the center
    }
}

/// Layered uniform neighbor sampling without replacement. Each frontier node
/// at layer `l` contributes up to `fanouts[l]` distinct neighbors; nodes
/// already drawn keep their first (smallest) hop tag.
pub fn sample_ego_graph(
    g: &Graph,
    center: u32,
    cfg: &SamplerConfig,
    key: SampleKey,
) -> EgoGraph {
    let mut rng = rng::rng(
        cfg.master_seed,
        &[stream::EGO_SAMPLE, center as u64, key.epoch, key.sample_idx],
    );
    let mut members = vec![center];
    let mut hops = vec![0u8];
    let mut seen: HashMap<u32, ()> = HashMap::from([(center, ())]);
    let mut frontier = vec![center];
    let mut scratch: Vec<u32> = Vec::new();

    for (layer, &fanout) in cfg.fanouts.iter().enumerate() {
        let mut next = Vec::new();
        for &u in &frontier {
            let neigh = g.neighbors(u);
            let take = fanout.min(neigh.len());
            let drawn: &[u32] = if take == neigh.len() {
                neigh
            } else {
                // partial Fisher-Yates: first `take` entries are a uniform
                // draw without replacement
                scratch.clear();
                scratch.extend_from_slice(neigh);
                for t in 0..take {
                    let pick = rng.random_range(t..scratch.len());
                    scratch.swap(t, pick);
                }
                &scratch[..take]
            };
            for &v in drawn {
                if seen.insert(v, ()).is_none() {
                    members.push(v);
                    hops.push(layer as u8 + 1);
                    next.push(v);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    EgoGraph { center, members, hops }
}

/// All nodes within `depth` hops, in deterministic BFS order (used by
/// full-ego inference).
pub fn full_ego_graph(g: &Graph, center: u32, depth: usize) -> EgoGraph {
    let mut members = vec![center];
    let mut hops = vec![0u8];
    let mut seen: HashMap<u32, ()> = HashMap::from([(center, ())]);
    let mut frontier = vec![center];
    for layer in 0..depth {
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in g.neighbors(u) {
                if seen.insert(v, ()).is_none() {
                    members.push(v);
                    hops.push(layer as u8 + 1);
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    EgoGraph { center, members, hops }
}

/// Per-pair structural encodings for one instance of `tokens` positions
/// (real members then `n_g` global slots), flattened `[tokens, tokens, views]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProximityTensor {
    pub tokens: usize,
    pub views: usize,
    pub data: Vec<f64>,
}

impl ProximityTensor {
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.tokens + j) * self.views;
        &self.data[base..base + self.views]
    }
}

/// Computes the proximity tensor of one ego-graph on the full graph's
/// normalized adjacency: view m < views-1 holds the m-step reachability
/// between the pair (view 0 is the identity), the last view flags pairs
/// touching a global slot.
pub fn proximity_encoding(
    powers: &AdjPowers,
    ego: &EgoGraph,
    n_g: usize,
    views: usize,
) -> Result<ProximityTensor, SampleError> {
    if views < 2 {
        return Err(SampleError::TooFewViews);
    }
    if views >= 2 && views - 2 > powers.m_max() {
        return Err(GraphError::PowerBudget { m: views - 2, m_max: powers.m_max() }.into());
    }
    let real = ego.members.len();
    let tokens = real + n_g;
    let mut data = vec![0.0; tokens * tokens * views];
    let pos: HashMap<u32, usize> =
        ego.members.iter().enumerate().map(|(t, &gid)| (gid, t)).collect();

    let idx = |i: usize, j: usize, m: usize| (i * tokens + j) * views + m;
    for (i, &gid) in ego.members.iter().enumerate() {
        data[idx(i, i, 0)] = 1.0; // members are deduplicated
        for m in 1..=views - 2 {
            let row = powers.row(gid, m)?;
            for &(col, v) in row.iter() {
                if let Some(&j) = pos.get(&col) {
                    data[idx(i, j, m)] = v;
                }
            }
        }
    }
    for i in 0..tokens {
        for j in 0..tokens {
            if i >= real || j >= real {
                data[idx(i, j, views - 1)] = 1.0;
            }
        }
    }
    Ok(ProximityTensor { tokens, views, data })
}

/// One token slot of a padded batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Node(u32),
    Global(u16),
    Pad,
}

/// Padded batch of ego-graph instances ready for the model.
#[derive(Clone, Debug)]
pub struct EgoBatch {
    pub instances: usize,
    /// Padded sequence length (max member count in the batch + global slots).
    pub tokens: usize,
    pub views: usize,
    /// `[instances * tokens]`, center always at slot 0 of each instance.
    pub slots: Vec<Token>,
    /// `[instances * tokens * tokens]`; true = may attend. Non-PAD tokens
    /// attend all non-PAD tokens of their instance; PAD rows keep only the
    /// diagonal so no attention row is ever empty.
    pub mask: Vec<bool>,
    /// `[instances * tokens * tokens * views]`, PAD pairs all-zero.
    pub phi: Vec<f64>,
    /// Per-instance label of the center node.
    pub labels: Vec<u32>,
    /// Per-instance center id; the consistency groups of one node share it.
    pub groups: Vec<u32>,
    /// Per-instance real-token count (members, excluding globals and PAD).
    pub real_lens: Vec<usize>,
}

impl EgoBatch {
    pub fn slot(&self, instance: usize, t: usize) -> Token {
        self.slots[instance * self.tokens + t]
    }

    pub fn allows(&self, instance: usize, i: usize, j: usize) -> bool {
        self.mask[(instance * self.tokens + i) * self.tokens + j]
    }

    pub fn phi_at(&self, instance: usize, i: usize, j: usize) -> &[f64] {
        let base = ((instance * self.tokens + i) * self.tokens + j) * self.views;
        &self.phi[base..base + self.views]
    }
}

/// Pads the given ego-graphs into one batch, appending `num_global` global
/// slots after each instance's real tokens and computing masks + proximity.
pub fn build_batch(
    egos: &[EgoGraph],
    g: &Graph,
    powers: &AdjPowers,
    cfg: &SamplerConfig,
) -> Result<EgoBatch, SampleError> {
    if egos.is_empty() {
        return Err(SampleError::EmptyBatch);
    }
    let n_g = cfg.num_global;
    let views = cfg.prox_views;
    let max_real = egos.iter().map(EgoGraph::len).max().unwrap();
    let tokens = max_real + n_g;
    let instances = egos.len();

    let mut slots = vec![Token::Pad; instances * tokens];
    let mut mask = vec![false; instances * tokens * tokens];
    let mut phi = vec![0.0; instances * tokens * tokens * views];
    let mut labels = Vec::with_capacity(instances);
    let mut groups = Vec::with_capacity(instances);
    let mut real_lens = Vec::with_capacity(instances);

    for (b, ego) in egos.iter().enumerate() {
        let real = ego.len();
        let active = real + n_g;
        for (t, &gid) in ego.members.iter().enumerate() {
            slots[b * tokens + t] = Token::Node(gid);
        }
        for k in 0..n_g {
            slots[b * tokens + real + k] = Token::Global(k as u16);
        }
        for i in 0..tokens {
            for j in 0..tokens {
                let allowed = if i < active { j < active } else { j == i };
                mask[(b * tokens + i) * tokens + j] = allowed;
            }
        }
        let prox = proximity_encoding(powers, ego, n_g, views)?;
        for i in 0..active {
            for j in 0..active {
                let dst = ((b * tokens + i) * tokens + j) * views;
                phi[dst..dst + views].copy_from_slice(prox.at(i, j));
            }
        }
        labels.push(g.label(ego.center));
        groups.push(ego.center);
        real_lens.push(real);
    }

    Ok(EgoBatch { instances, tokens, views, slots, mask, phi, labels, groups, real_lens })
}

/// Streaming batch plan for one epoch: shuffles the node order by an
/// epoch-derived seed and emits each node's `S` samples contiguously, never
/// splitting a consistency group across batches.
pub struct EpochPlan<'a> {
    g: &'a Graph,
    powers: &'a AdjPowers,
    cfg: &'a SamplerConfig,
    epoch: u64,
    order: Vec<u32>,
    groups_per_batch: usize,
    cursor: usize,
}

pub fn epoch_plan<'a>(
    g: &'a Graph,
    powers: &'a AdjPowers,
    cfg: &'a SamplerConfig,
    epoch: u64,
    nodes: &[u32],
    batch_size: usize,
) -> Result<EpochPlan<'a>, SampleError> {
    cfg.validate()?;
    if batch_size < cfg.samples_per_node {
        return Err(SampleError::BatchBelowGroup {
            batch: batch_size,
            samples: cfg.samples_per_node,
        });
    }
    if nodes.is_empty() {
        return Err(SampleError::EmptyBatch);
    }
    let mut order = nodes.to_vec();
    order.shuffle(&mut rng::rng(cfg.master_seed, &[stream::EPOCH_SHUFFLE, epoch]));
    Ok(EpochPlan {
        g,
        powers,
        cfg,
        epoch,
        order,
        groups_per_batch: batch_size / cfg.samples_per_node,
        cursor: 0,
    })
}

impl EpochPlan<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.groups_per_batch)
    }
}

impl Iterator for EpochPlan<'_> {
    type Item = Result<EgoBatch, SampleError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.groups_per_batch).min(self.order.len());
        let mut egos = Vec::with_capacity((end - self.cursor) * self.cfg.samples_per_node);
        for &center in &self.order[self.cursor..end] {
            for s in 0..self.cfg.samples_per_node {
                let key = SampleKey { epoch: self.epoch, sample_idx: s as u64 };
                egos.push(sample_ego_graph(self.g, center, self.cfg, key));
            }
        }
        self.cursor = end;
        Some(build_batch(&egos, self.g, self.powers, self.cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_adjacency, NormKind, SplitSpec, DEFAULT_M_MAX};
    use crate::synth;

    fn line_graph(n: usize) -> Graph {
        let edges: Vec<(u32, u32)> = (0..n as u32 - 1).map(|i| (i, i + 1)).collect();
        Graph::from_parts(
            &edges,
            vec![0.0; n * 2],
            2,
            vec![0; n],
            SplitSpec::stratified([1.0, 0.0, 0.0], 1),
        )
        .unwrap()
    }

    fn powers_of(g: &Graph) -> AdjPowers {
        AdjPowers::new(normalized_adjacency(g, NormKind::Row), DEFAULT_M_MAX)
    }

    fn cfg(fanouts: Vec<usize>, n_g: usize, views: usize) -> SamplerConfig {
        SamplerConfig {
            depth: fanouts.len(),
            fanouts,
            samples_per_node: 2,
            num_global: n_g,
            prox_views: views,
            master_seed: 7,
        }
    }

    #[test]
    fn isolated_center_yields_singleton() {
        let g = Graph::from_parts(
            &[],
            vec![0.0; 6],
            2,
            vec![0; 3],
            SplitSpec::stratified([1.0, 0.0, 0.0], 1),
        )
        .unwrap();
        let ego = sample_ego_graph(&g, 1, &cfg(vec![8, 4], 0, 3), SampleKey { epoch: 0, sample_idx: 0 });
        assert_eq!(ego.members, vec![1]);
        assert_eq!(ego.hops, vec![0]);
    }

    #[test]
    fn star_center_collects_all_leaves() {
        let g = Graph::from_parts(
            &[(0, 1), (0, 2), (0, 3)],
            vec![0.0; 8],
            2,
            vec![0; 4],
            SplitSpec::stratified([1.0, 0.0, 0.0], 1),
        )
        .unwrap();
        let ego =
            sample_ego_graph(&g, 0, &cfg(vec![3, 3], 0, 3), SampleKey { epoch: 0, sample_idx: 0 });
        let mut sorted = ego.members.clone();
        sorted.sort_unstable();
        assert_eq!(ego.members[0], 0);
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(ego.len(), 4); // leaves lead back only to the center
    }

    #[test]
    fn same_sample_key_is_deterministic() {
        let g = Graph::from_parts(
            &[(0, 1), (1, 2), (2, 3), (3, 0)],
            vec![0.0; 8],
            2,
            vec![0; 4],
            SplitSpec::stratified([1.0, 0.0, 0.0], 1),
        )
        .unwrap();
        let c = cfg(vec![1, 1], 0, 3);
        let key = SampleKey { epoch: 3, sample_idx: 1 };
        assert_eq!(sample_ego_graph(&g, 0, &c, key), sample_ego_graph(&g, 0, &c, key));
        // and a different sample index may differ
        let other = sample_ego_graph(&g, 0, &c, SampleKey { epoch: 3, sample_idx: 2 });
        assert_eq!(other.members[0], 0);
    }

    #[test]
    fn members_stay_within_depth_and_bound() {
        let g = synth::sbm(&synth::SbmSpec::feature_friendly(120), 5);
        let c = cfg(vec![4, 3], 2, 3);
        for center in [0u32, 7, 63, 119] {
            for s in 0..3 {
                let ego = sample_ego_graph(&g, center, &c, SampleKey { epoch: 1, sample_idx: s });
                assert!(ego.len() + c.num_global <= c.max_tokens());
                // BFS distance oracle
                let full = full_ego_graph(&g, center, c.depth);
                for m in &ego.members {
                    assert!(full.members.contains(m), "{m} beyond {} hops of {center}", c.depth);
                }
                let mut uniq = ego.members.clone();
                uniq.sort_unstable();
                uniq.dedup();
                assert_eq!(uniq.len(), ego.len(), "duplicate members");
            }
        }
    }

    #[test]
    fn proximity_on_edge_pair() {
        let g = line_graph(2);
        let powers = powers_of(&g);
        let ego = EgoGraph { center: 0, members: vec![0, 1], hops: vec![0, 1] };
        let phi = proximity_encoding(&powers, &ego, 0, 3).unwrap();
        assert_eq!(phi.at(0, 1), &[0.0, 0.5, 0.0]);
        assert_eq!(phi.at(0, 0), &[1.0, 0.5, 0.0]);
        assert_eq!(phi.at(1, 0), &[0.0, 0.5, 0.0]);
    }

    #[test]
    fn proximity_global_pairs_use_indicator_view() {
        let g = line_graph(2);
        let powers = powers_of(&g);
        let ego = EgoGraph { center: 0, members: vec![0, 1], hops: vec![0, 1] };
        let phi = proximity_encoding(&powers, &ego, 1, 3).unwrap();
        assert_eq!(phi.at(0, 2), &[0.0, 0.0, 1.0]);
        assert_eq!(phi.at(2, 1), &[0.0, 0.0, 1.0]);
        assert_eq!(phi.at(2, 2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn proximity_degenerates_without_globals_at_two_views() {
        let g = line_graph(3);
        let powers = powers_of(&g);
        let ego = EgoGraph { center: 1, members: vec![1, 0, 2], hops: vec![0, 1, 1] };
        let phi = proximity_encoding(&powers, &ego, 0, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want0 = if i == j { 1.0 } else { 0.0 };
                assert_eq!(phi.at(i, j), &[want0, 0.0]);
            }
        }
    }

    #[test]
    fn proximity_view_budget_errors() {
        let g = line_graph(3);
        let powers = powers_of(&g);
        let ego = EgoGraph { center: 0, members: vec![0, 1], hops: vec![0, 1] };
        assert!(matches!(
            proximity_encoding(&powers, &ego, 0, DEFAULT_M_MAX + 3),
            Err(SampleError::Graph(GraphError::PowerBudget { .. }))
        ));
    }

    #[test]
    fn proximity_matches_dense_oracle_exactly() {
        let g = synth::sbm(&synth::SbmSpec::feature_friendly(150), 11);
        let adj = normalized_adjacency(&g, NormKind::Row);
        let powers = AdjPowers::new(adj.clone(), DEFAULT_M_MAX);
        let dense: Vec<Vec<f64>> =
            (0..3).map(|m| crate::graph::dense_power(&adj, m)).collect();
        let c = cfg(vec![6, 3], 1, 4);
        let n = g.num_nodes();
        for center in [0u32, 50, 149] {
            let ego = sample_ego_graph(&g, center, &c, SampleKey { epoch: 0, sample_idx: 0 });
            let phi = proximity_encoding(&powers, &ego, 1, 4).unwrap();
            for (i, &gi) in ego.members.iter().enumerate() {
                for (j, &gj) in ego.members.iter().enumerate() {
                    for m in 0..3 {
                        let want = dense[m][gi as usize * n + gj as usize];
                        assert_eq!(phi.at(i, j)[m], want, "pair ({gi},{gj}) view {m}");
                    }
                    assert_eq!(phi.at(i, j)[3], 0.0);
                }
            }
        }
    }

    #[test]
    fn batch_padding_masks_and_ordering() {
        let g = line_graph(8);
        let powers = powers_of(&g);
        let c = cfg(vec![2, 2], 1, 3);
        let egos = vec![
            EgoGraph { center: 0, members: vec![0, 1, 2], hops: vec![0, 1, 2] },
            EgoGraph { center: 3, members: vec![3, 2, 4, 1, 5], hops: vec![0, 1, 1, 2, 2] },
        ];
        let b = build_batch(&egos, &g, &powers, &c).unwrap();
        assert_eq!(b.tokens, 6);
        assert_eq!(b.slot(0, 0), Token::Node(0));
        assert_eq!(b.slot(0, 3), Token::Global(0));
        assert_eq!(b.slot(0, 4), Token::Pad);
        // instance 0 has 4 non-PAD tokens: its active rows sum to 4
        for i in 0..4 {
            let sum: usize = (0..6).filter(|&j| b.allows(0, i, j)).count();
            assert_eq!(sum, 4, "row {i}");
        }
        // PAD rows keep only the diagonal
        for i in 4..6 {
            for j in 0..6 {
                assert_eq!(b.allows(0, i, j), i == j);
            }
        }
        // PAD pairs carry zero proximity
        assert_eq!(b.phi_at(0, 4, 0), &[0.0, 0.0, 0.0]);
        assert_eq!(b.phi_at(0, 0, 5), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_token_order_with_two_globals() {
        let g = line_graph(3);
        let powers = powers_of(&g);
        let c = cfg(vec![1], 2, 3);
        let egos = vec![EgoGraph { center: 1, members: vec![1, 0], hops: vec![0, 1] }];
        let b = build_batch(&egos, &g, &powers, &c).unwrap();
        assert_eq!(
            (0..4).map(|t| b.slot(0, t)).collect::<Vec<_>>(),
            vec![Token::Node(1), Token::Node(0), Token::Global(0), Token::Global(1)]
        );
        assert_eq!(b.phi_at(0, 0, 2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn singleton_batch_has_all_true_mask() {
        let g = line_graph(2);
        let powers = powers_of(&g);
        let c = cfg(vec![], 0, 3);
        let egos = vec![EgoGraph { center: 0, members: vec![0], hops: vec![0] }];
        let b = build_batch(&egos, &g, &powers, &c).unwrap();
        assert_eq!(b.tokens, 1);
        assert!(b.allows(0, 0, 0));
    }

    #[test]
    fn epoch_plan_groups_and_determinism() {
        let g = synth::sbm(&synth::SbmSpec::feature_friendly(40), 2);
        let powers = powers_of(&g);
        let mut c = cfg(vec![3, 2], 1, 3);
        c.samples_per_node = 2;
        let nodes: Vec<u32> = (0..10).collect();

        let plan = epoch_plan(&g, &powers, &c, 4, &nodes, 4).unwrap();
        assert_eq!(plan.num_batches(), 5);
        let batches: Vec<EgoBatch> = plan.map(Result::unwrap).collect();
        assert_eq!(batches.len(), 5);
        for b in &batches {
            assert_eq!(b.instances, 4);
            // the two samples of each group are adjacent and share the center
            assert_eq!(b.groups[0], b.groups[1]);
            assert_eq!(b.groups[2], b.groups[3]);
            assert_ne!(b.groups[1], b.groups[2]);
        }

        let again: Vec<EgoBatch> =
            epoch_plan(&g, &powers, &c, 4, &nodes, 4).unwrap().map(Result::unwrap).collect();
        for (a, b) in batches.iter().zip(&again) {
            assert_eq!(a.slots, b.slots);
            assert_eq!(a.phi, b.phi);
            assert_eq!(a.groups, b.groups);
        }
        let other_epoch: Vec<EgoBatch> =
            epoch_plan(&g, &powers, &c, 5, &nodes, 4).unwrap().map(Result::unwrap).collect();
        assert_ne!(
            batches.iter().flat_map(|b| b.groups.clone()).collect::<Vec<_>>(),
            other_epoch.iter().flat_map(|b| b.groups.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn epoch_plan_rejects_batch_below_group() {
        let g = line_graph(4);
        let powers = powers_of(&g);
        let mut c = cfg(vec![2], 0, 3);
        c.samples_per_node = 4;
        let err = epoch_plan(&g, &powers, &c, 0, &[0, 1], 2).err().unwrap();
        assert!(matches!(err, SampleError::BatchBelowGroup { batch: 2, samples: 4 }));
    }

    #[test]
    fn single_sample_groups_are_singletons() {
        let g = line_graph(6);
        let powers = powers_of(&g);
        let mut c = cfg(vec![2], 0, 3);
        c.samples_per_node = 1;
        let batches: Vec<EgoBatch> =
            epoch_plan(&g, &powers, &c, 0, &[0, 1, 2, 3], 2).unwrap().map(Result::unwrap).collect();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.instances, 2);
            assert_ne!(b.groups[0], b.groups[1]);
        }
    }

    #[test]
    fn full_ego_is_superset_of_samples() {
        let g = synth::sbm(&synth::SbmSpec::feature_friendly(80), 9);
        let c = cfg(vec![3, 2], 0, 3);
        for center in [0u32, 17, 79] {
            let full = full_ego_graph(&g, center, 2);
            for s in 0..4 {
                let ego = sample_ego_graph(&g, center, &c, SampleKey { epoch: 2, sample_idx: s });
                for m in &ego.members {
                    assert!(full.members.contains(m));
                }
            }
        }
    }
}
