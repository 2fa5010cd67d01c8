//! Inference and evaluation: multi-sample prediction averaging, deterministic
//! full-ego-graph inference, whole-graph single-sequence mode, accuracy
//! reports over seeds, and the ablation driver.

use thiserror::Error;

use crate::autodiff::Array;
use crate::graph::{AdjPowers, Graph, GraphError, Split};
use crate::model::{
    forward_sequence_eval, predict_batch, ModelConfig, ModelError, ModelParams,
};
use crate::node2seq::{
    build_batch, full_ego_graph, sample_ego_graph, SampleError, SampleKey,
    SamplerConfig,
};
use crate::rng::{self, stream};
use crate::train::{fit, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("sequence of {tokens} tokens exceeds the cap of {cap}")]
    TokenCap { tokens: usize, cap: usize },
    #[error("s_prime must be >= 1")]
    NoSamples,
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    MultiSample,
    FullEgo,
    FullGraph,
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InferenceMode::MultiSample => "multi_sample",
            InferenceMode::FullEgo => "full_ego",
            InferenceMode::FullGraph => "full_graph",
        })
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multi_sample" => Ok(InferenceMode::MultiSample),
            "full_ego" => Ok(InferenceMode::FullEgo),
            "full_graph" => Ok(InferenceMode::FullGraph),
            other => Err(format!("unknown inference mode {other:?}")),
        }
    }
}

pub const DEFAULT_TOKEN_CAP: usize = 6000;

#[derive(Clone, Debug)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub s_prime: usize,
    pub token_cap: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { mode: InferenceMode::MultiSample, s_prime: 8, token_cap: DEFAULT_TOKEN_CAP }
    }
}

/// Test-time sampler: same strategy as training, seed lineage disjoint from
/// every training stream.
fn inference_sampler(sampler: &SamplerConfig, seed: u64) -> SamplerConfig {
    SamplerConfig {
        master_seed: rng::derive(seed, &[stream::INFERENCE]),
        ..sampler.clone()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// prediction modes
// ---------------------------------------------------------------------------

/// Averaged class distribution over `s_prime` independently sampled
/// ego-graphs of one node.
pub fn multi_sample_predict(
    params: &ModelParams,
    g: &Graph,
    powers: &AdjPowers,
    sampler: &SamplerConfig,
    node: u32,
    s_prime: usize,
    seed: u64,
) -> Result<Vec<f64>, InferError> {
    let out = msi_probs(params, g, powers, sampler, &[node], s_prime, seed)?;
    Ok(out.into_iter().next().unwrap())
}

/// Multi-sample prediction for many nodes, batching the samples; rows are
/// aligned with `nodes`.
pub fn msi_probs(
    params: &ModelParams,
    g: &Graph,
    powers: &AdjPowers,
    sampler: &SamplerConfig,
    nodes: &[u32],
    s_prime: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, InferError> {
    if s_prime == 0 {
        return Err(InferError::NoSamples);
    }
    let scfg = inference_sampler(sampler, seed);
    let c = params.cfg.classes;
    let nodes_per_chunk = (256 / s_prime).max(1);
    let mut out = Vec::with_capacity(nodes.len());
    for chunk in nodes.chunks(nodes_per_chunk) {
        let mut egos = Vec::with_capacity(chunk.len() * s_prime);
        for &node in chunk {
            for s in 0..s_prime {
                let key = SampleKey { epoch: 0, sample_idx: s as u64 };
                egos.push(sample_ego_graph(g, node, &scfg, key));
            }
        }
        let batch = build_batch(&egos, g, powers, &scfg)?;
        let inputs = crate::model::BatchInputs::from_batch(&batch, g, scfg.num_global)?;
        let probs = predict_batch(params, &inputs, true)?;
        for (i, _) in chunk.iter().enumerate() {
            let mut mean = vec![0.0; c];
            for s in 0..s_prime {
                let row = &probs.data()[(i * s_prime + s) * c..(i * s_prime + s + 1) * c];
                for (m, &p) in mean.iter_mut().zip(row) {
                    *m += p;
                }
            }
            for m in &mut mean {
                *m /= s_prime as f64;
            }
            out.push(mean);
        }
    }
    Ok(out)
}

/// Fraction of `nodes` whose averaged prediction hits the label.
pub fn msi_accuracy(
    params: &ModelParams,
    g: &Graph,
    powers: &AdjPowers,
    sampler: &SamplerConfig,
    nodes: &[u32],
    s_prime: usize,
    seed: u64,
) -> Result<f64, InferError> {
    let probs = msi_probs(params, g, powers, sampler, nodes, s_prime, seed)?;
    let hits = nodes
        .iter()
        .zip(&probs)
        .filter(|(&n, p)| argmax(p) == g.label(n) as usize)
        .count();
    Ok(hits as f64 / nodes.len() as f64)
}

/// Deterministic inference on the complete depth-hop neighborhood.
pub fn full_ego_predict(
    params: &ModelParams,
    g: &Graph,
    powers: &AdjPowers,
    sampler: &SamplerConfig,
    node: u32,
    token_cap: usize,
) -> Result<Vec<f64>, InferError> {
    let ego = full_ego_graph(g, node, sampler.depth);
    let tokens = ego.len() + sampler.num_global;
    if tokens > token_cap {
        return Err(InferError::TokenCap { tokens, cap: token_cap });
    }
    let batch = build_batch(std::slice::from_ref(&ego), g, powers, sampler)?;
    let inputs = crate::model::BatchInputs::from_batch(&batch, g, sampler.num_global)?;
    let probs = predict_batch(params, &inputs, true)?;
    Ok(probs.data()[..params.cfg.classes].to_vec())
}

/// Estimated bytes of the dense pairwise proximity tensor in full-graph mode.
pub fn phi_mem_bytes(tokens: usize, views: usize) -> u64 {
    (tokens as u64).pow(2) * views as u64 * 8
}

pub struct FullGraphRun {
    /// One probability row per graph node.
    pub probs: Array,
    pub tokens: usize,
    pub phi_bytes: u64,
}

/// Treats the whole graph as one fully-connected sequence (plus global
/// slots). Refused above the token cap; the proximity-tensor size is
/// reported before it is allocated.
pub fn full_graph_forward(
    params: &ModelParams,
    g: &Graph,
    powers: &AdjPowers,
    token_cap: usize,
    pe_enabled: bool,
) -> Result<FullGraphRun, InferError> {
    let n = g.num_nodes();
    let n_g = params.cfg.num_global;
    let tokens = n + n_g;
    if tokens > token_cap {
        return Err(InferError::TokenCap { tokens, cap: token_cap });
    }
    let views = params.cfg.prox_views;
    let phi_bytes = phi_mem_bytes(tokens, views);
    eprintln!(
        "full-graph mode: {tokens} tokens, proximity tensor {views} views = {phi_bytes} bytes"
    );

    let mut phi = Array::zeros(&[tokens * tokens, views]);
    {
        let data = phi.data_mut();
        for i in 0..n {
            data[(i * tokens + i) * views] = 1.0;
            for m in 1..=views.saturating_sub(2) {
                let row = powers.row(i as u32, m)?;
                for &(j, v) in row.iter() {
                    data[(i * tokens + j as usize) * views + m] = v;
                }
            }
        }
        for i in 0..tokens {
            for j in 0..tokens {
                if i >= n || j >= n {
                    data[(i * tokens + j) * views + views - 1] = 1.0;
                }
            }
        }
    }
    let mut x = Array::zeros(&[tokens, g.feat_dim()]);
    for i in 0..n {
        let d = g.feat_dim();
        x.data_mut()[i * d..(i + 1) * d].copy_from_slice(g.feature_row(i as u32));
    }
    let all = forward_sequence_eval(params, &x, &phi, pe_enabled)?;
    // strip the global-slot rows
    let c = params.cfg.classes;
    let probs = Array::new(vec![n, c], all.data()[..n * c].to_vec())
        .expect("row count");
    Ok(FullGraphRun { probs, tokens, phi_bytes })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PredRecord {
    pub node: u32,
    pub argmax: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: Split,
    pub mode: InferenceMode,
    pub s_prime: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Flagged when only one seed ran (std is trivially zero).
    pub single_run: bool,
    /// Per-class accuracy averaged over seeds.
    pub per_class: Vec<f64>,
    /// Predictions of the first seed.
    pub predictions: Vec<PredRecord>,
    /// Identifies (checkpoint, inference config, data) for reproducibility.
    pub fingerprint: u64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "split={} mode={} s_prime={} seeds={:?}\naccuracy {:.4} +- {:.4}{}\n",
            self.split,
            self.mode,
            self.s_prime,
            self.seeds,
            self.mean,
            self.std,
            if self.single_run { " (single run)" } else { "" }
        );
        for (c, acc) in self.per_class.iter().enumerate() {
            s.push_str(&format!("class {c}: {acc:.4}\n"));
        }
        s.push_str(&format!("fingerprint {:016x}\n", self.fingerprint));
        s
    }

    pub fn predictions_dump(&self) -> String {
        let mut out = String::new();
        for p in &self.predictions {
            let probs: Vec<String> = p.probs.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{} {} {}\n", p.node, p.argmax, probs.join(" ")));
        }
        out
    }
}

fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn fingerprint(params: &ModelParams, cfg: &InferenceConfig, seeds: &[u64], g: &Graph) -> u64 {
    let mut bytes: Vec<u8> = Vec::new();
    for a in params.arrays() {
        for v in a.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes.extend_from_slice(format!("{}|{}", cfg.mode, cfg.s_prime).as_bytes());
    for s in seeds {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    bytes.extend_from_slice(&(g.num_nodes() as u64).to_le_bytes());
    bytes.extend_from_slice(&(g.num_edges() as u64).to_le_bytes());
    fnv1a64(bytes)
}

/// Accuracy of the checkpoint on one split, repeated over seeds
/// (mean ± std); deterministic modes produce identical repetitions.
pub fn evaluate(
    params: &ModelParams,
    g: &Graph,
    powers: &AdjPowers,
    sampler: &SamplerConfig,
    split: Split,
    cfg: &InferenceConfig,
    seeds: &[u64],
) -> Result<EvalReport, InferError> {
    let nodes = g.split_nodes(split);
    assert!(!nodes.is_empty(), "evaluation split is empty");
    let c = params.cfg.classes;
    let mut accuracies = Vec::with_capacity(seeds.len());
    let mut per_class_sum = vec![0.0; c];
    let mut predictions: Vec<PredRecord> = Vec::new();

    for (si, &seed) in seeds.iter().enumerate() {
        let probs: Vec<Vec<f64>> = match cfg.mode {
            InferenceMode::MultiSample => {
                msi_probs(params, g, powers, sampler, &nodes, cfg.s_prime, seed)?
            }
            InferenceMode::FullEgo => nodes
                .iter()
                .map(|&n| full_ego_predict(params, g, powers, sampler, n, cfg.token_cap))
                .collect::<Result<_, _>>()?,
            InferenceMode::FullGraph => {
                let run = full_graph_forward(params, g, powers, cfg.token_cap, true)?;
                nodes
                    .iter()
                    .map(|&n| run.probs.data()[n as usize * c..(n as usize + 1) * c].to_vec())
                    .collect()
            }
        };
        let mut hits = 0usize;
        let mut class_hits = vec![0usize; c];
        let mut class_counts = vec![0usize; c];
        for (&node, p) in nodes.iter().zip(&probs) {
            let label = g.label(node) as usize;
            class_counts[label] += 1;
            if argmax(p) == label {
                hits += 1;
                class_hits[label] += 1;
            }
        }
        accuracies.push(hits as f64 / nodes.len() as f64);
        for k in 0..c {
            if class_counts[k] > 0 {
                per_class_sum[k] += class_hits[k] as f64 / class_counts[k] as f64;
            }
        }
        if si == 0 {
            predictions = nodes
                .iter()
                .zip(&probs)
                .map(|(&node, p)| PredRecord { node, argmax: argmax(p), probs: p.clone() })
                .collect();
        }
    }

    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
        / accuracies.len() as f64;
    Ok(EvalReport {
        split,
        mode: cfg.mode,
        s_prime: cfg.s_prime,
        seeds: seeds.to_vec(),
        mean,
        std: var.sqrt(),
        single_run: seeds.len() == 1,
        per_class: per_class_sum.iter().map(|s| s / seeds.len() as f64).collect(),
        predictions,
        accuracies,
        fingerprint: fingerprint(params, cfg, seeds, g),
    })
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    /// Proximity bias frozen at zero (and its gradients removed).
    WithoutPe,
    /// Consistency regularization off (lambda = 0).
    WithoutCr,
    /// No global-node slots.
    WithoutGn,
    /// Trained normally, evaluated on the complete depth-hop neighborhood.
    FullInference,
    /// Multi-sample inference with this many samples.
    MsiK(usize),
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationVariant::Full => write!(f, "full"),
            AblationVariant::WithoutPe => write!(f, "wo_pe"),
            AblationVariant::WithoutCr => write!(f, "wo_cr"),
            AblationVariant::WithoutGn => write!(f, "wo_gn"),
            AblationVariant::FullInference => write!(f, "full_inf"),
            AblationVariant::MsiK(k) => write!(f, "msi_{k}"),
        }
    }
}

/// Standard suite: every named variant plus the sample-count sweep.
pub fn default_suite() -> Vec<AblationVariant> {
    let mut v = vec![
        AblationVariant::Full,
        AblationVariant::WithoutPe,
        AblationVariant::WithoutCr,
        AblationVariant::WithoutGn,
        AblationVariant::FullInference,
    ];
    v.extend([1usize, 2, 4, 8, 16].map(AblationVariant::MsiK));
    v
}

#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub eval_s_prime: usize,
    pub token_cap: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>8}  per-seed\n", "variant", "mean", "std");
        for r in &self.rows {
            let per: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
            s.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4}  {}\n",
                r.variant,
                r.mean,
                r.std,
                per.join(" ")
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mean,std,accuracies\n");
        for r in &self.rows {
            let per: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
            s.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                r.variant,
                r.mean,
                r.std,
                per.join(";")
            ));
        }
        s
    }
}

/// Trains and evaluates every requested variant over the seeds. The base
/// training is shared by `full`, `full_inf`, and every `msi_k` row; the
/// structural ablations retrain with the corresponding piece removed.
pub fn run_ablation(
    g: &Graph,
    powers: &AdjPowers,
    suite: &[AblationVariant],
    s: &AblationSettings,
) -> Result<AblationReport, InferError> {
    let needs_base = suite.iter().any(|v| {
        matches!(
            v,
            AblationVariant::Full | AblationVariant::FullInference | AblationVariant::MsiK(_)
        )
    });
    let test_nodes = g.split_nodes(Split::Test);
    let mut rows: Vec<AblationRow> =
        suite.iter().map(|v| AblationRow { variant: v.to_string(), accuracies: vec![], mean: 0.0, std: 0.0 }).collect();

    for &seed in &s.seeds {
        let seeded_sampler = SamplerConfig { master_seed: seed, ..s.sampler.clone() };
        let train_variant = |tcfg: TrainConfig,
                             sampler: &SamplerConfig,
                             model: ModelConfig|
         -> Result<ModelParams, InferError> {
            let res = fit(g, powers, model, sampler, &tcfg).map_err(Box::new)?;
            Ok(res.params)
        };

        let base = if needs_base {
            Some(train_variant(s.train.clone(), &seeded_sampler, s.model.clone())?)
        } else {
            None
        };

        for (row, variant) in rows.iter_mut().zip(suite) {
            let acc = match variant {
                AblationVariant::Full => msi_accuracy(
                    base.as_ref().unwrap(),
                    g,
                    powers,
                    &seeded_sampler,
                    &test_nodes,
                    s.eval_s_prime,
                    seed,
                )?,
                AblationVariant::MsiK(k) => msi_accuracy(
                    base.as_ref().unwrap(),
                    g,
                    powers,
                    &seeded_sampler,
                    &test_nodes,
                    *k,
                    seed,
                )?,
                AblationVariant::FullInference => {
                    let params = base.as_ref().unwrap();
                    let hits = test_nodes
                        .iter()
                        .map(|&n| {
                            full_ego_predict(params, g, powers, &seeded_sampler, n, s.token_cap)
                                .map(|p| argmax(&p) == g.label(n) as usize)
                        })
                        .collect::<Result<Vec<bool>, _>>()?;
                    hits.iter().filter(|&&h| h).count() as f64 / test_nodes.len() as f64
                }
                AblationVariant::WithoutPe => {
                    let tcfg = TrainConfig { pe_enabled: false, ..s.train.clone() };
                    let params = train_variant(tcfg, &seeded_sampler, s.model.clone())?;
                    msi_accuracy(&params, g, powers, &seeded_sampler, &test_nodes, s.eval_s_prime, seed)?
                }
                AblationVariant::WithoutCr => {
                    let tcfg = TrainConfig { lambda: 0.0, ..s.train.clone() };
                    let params = train_variant(tcfg, &seeded_sampler, s.model.clone())?;
                    msi_accuracy(&params, g, powers, &seeded_sampler, &test_nodes, s.eval_s_prime, seed)?
                }
                AblationVariant::WithoutGn => {
                    let sampler = SamplerConfig { num_global: 0, ..seeded_sampler.clone() };
                    let model = ModelConfig { num_global: 0, ..s.model.clone() };
                    let params = train_variant(s.train.clone(), &sampler, model)?;
                    msi_accuracy(&params, g, powers, &sampler, &test_nodes, s.eval_s_prime, seed)?
                }
            };
            row.accuracies.push(acc);
        }
    }

    for row in &mut rows {
        let n = row.accuracies.len() as f64;
        row.mean = row.accuracies.iter().sum::<f64>() / n;
        let var =
            row.accuracies.iter().map(|a| (a - row.mean) * (a - row.mean)).sum::<f64>() / n;
        row.std = var.sqrt();
    }
    Ok(AblationReport { rows })
}

// ---------------------------------------------------------------------------
// scaling bench
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub nodes: usize,
    /// Padded sequence bound in ego mode; independent of graph size.
    pub ego_tokens: usize,
    /// Attention-plane bytes per ego instance (heads * tokens^2 * 8).
    pub ego_attn_bytes: u64,
    pub ego_forward_ms: f64,
    pub full_tokens: usize,
    /// None when the sequence exceeds the token cap (mode refused).
    pub full_phi_bytes: Option<u64>,
    pub full_attn_bytes: Option<u64>,
    pub full_forward_ms: Option<f64>,
}

/// Tokens-per-instance and one-forward wall time for ego mode vs full-graph
/// mode on seeded regular graphs of the requested sizes. Full-graph rows
/// above the token cap are marked infeasible rather than attempted.
pub fn scaling_bench(
    sizes: &[usize],
    degree: usize,
    sampler: &SamplerConfig,
    model: &ModelConfig,
    token_cap: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, InferError> {
    use std::time::Instant;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let g = crate::synth::regular_graph(n, degree, seed);
        let powers = AdjPowers::new(
            crate::graph::normalized_adjacency(&g, crate::graph::NormKind::Row),
            crate::graph::DEFAULT_M_MAX,
        );
        let mcfg = ModelConfig {
            feat_dim: g.feat_dim(),
            classes: g.num_classes(),
            num_global: sampler.num_global,
            prox_views: sampler.prox_views,
            ..model.clone()
        };
        let params = ModelParams::init(mcfg, seed)?;

        let ego_tokens = sampler.max_tokens();
        let centers: Vec<u32> = (0..n.min(32) as u32).collect();
        let egos: Vec<_> = centers
            .iter()
            .map(|&c| sample_ego_graph(&g, c, sampler, SampleKey { epoch: 0, sample_idx: 0 }))
            .collect();
        let batch = build_batch(&egos, &g, &powers, sampler)?;
        let inputs = crate::model::BatchInputs::from_batch(&batch, &g, sampler.num_global)?;
        let t0 = Instant::now();
        predict_batch(&params, &inputs, true)?;
        let ego_ms = t0.elapsed().as_secs_f64() * 1e3;

        let full_tokens = n + sampler.num_global;
        let feasible = full_tokens <= token_cap;
        let (full_phi, full_attn, full_ms) = if feasible {
            let t0 = Instant::now();
            let run = full_graph_forward(&params, &g, &powers, token_cap, true)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            (
                Some(run.phi_bytes),
                Some(params.cfg.heads as u64 * (full_tokens as u64).pow(2) * 8),
                Some(ms),
            )
        } else {
            (None, None, None)
        };

        rows.push(BenchRow {
            nodes: n,
            ego_tokens,
            ego_attn_bytes: params.cfg.heads as u64 * (ego_tokens as u64).pow(2) * 8,
            ego_forward_ms: ego_ms,
            full_tokens,
            full_phi_bytes: full_phi,
            full_attn_bytes: full_attn,
            full_forward_ms: full_ms,
        });
    }
    Ok(rows)
}

pub fn bench_table_text(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>8} {:>10} {:>14} {:>10} {:>11} {:>16} {:>10}\n",
        "nodes", "ego_tokens", "ego_attn_B", "ego_ms", "full_tokens", "full_phi_B", "full_ms"
    );
    for r in rows {
        let phi = r.full_phi_bytes.map_or("infeasible".into(), |b| b.to_string());
        let ms = r.full_forward_ms.map_or("-".into(), |m| format!("{m:.1}"));
        s.push_str(&format!(
            "{:>8} {:>10} {:>14} {:>10.1} {:>11} {:>16} {:>10}\n",
            r.nodes, r.ego_tokens, r.ego_attn_bytes, r.ego_forward_ms, r.full_tokens, phi, ms
        ));
    }
    s
}

pub fn bench_table_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "nodes,ego_tokens,ego_attn_bytes,ego_forward_ms,full_tokens,full_phi_bytes,full_attn_bytes,full_forward_ms\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.3},{},{},{},{}\n",
            r.nodes,
            r.ego_tokens,
            r.ego_attn_bytes,
            r.ego_forward_ms,
            r.full_tokens,
            r.full_phi_bytes.map_or(String::new(), |b| b.to_string()),
            r.full_attn_bytes.map_or(String::new(), |b| b.to_string()),
            r.full_forward_ms.map_or(String::new(), |m| format!("{m:.3}")),
        ));
    }
    s
}
