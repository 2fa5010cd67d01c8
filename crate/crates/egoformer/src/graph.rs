//! Immutable input graph: CSR adjacency, dense features, labels, and the
//! train/val/test split, plus the normalized adjacency and its lazily
//! expanded powers used by the proximity encodings.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: node id {id} out of range (graph has {num_nodes} feature rows)")]
    NodeOutOfRange { path: PathBuf, line: usize, id: usize, num_nodes: usize },
    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios([f64; 3]),
    #[error("class {0} has no node in the train split; stratification impossible")]
    ClassMissingFromTrain(u32),
    #[error("label file has {labels} entries but the graph has {nodes} nodes")]
    LabelCount { labels: usize, nodes: usize },
    #[error("split file has {got} entries but the graph has {nodes} nodes")]
    SplitCount { got: usize, nodes: usize },
    #[error("adjacency power {m} exceeds the memo budget (max {m_max})")]
    PowerBudget { m: usize, m_max: usize },
    #[error("graph has no nodes")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// How the split is produced: seeded stratified ratios, or an explicit file.
#[derive(Clone, Debug)]
pub enum SplitSpec {
    Stratified { ratios: [f64; 3], seed: u64 },
    File(PathBuf),
}

impl SplitSpec {
    pub fn stratified(ratios: [f64; 3], seed: u64) -> Self {
        SplitSpec::Stratified { ratios, seed }
    }
}

/// Counters reported by the loader.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LoadStats {
    pub self_loops_dropped: usize,
    pub duplicate_edges_dropped: usize,
    pub split_counts: [usize; 3],
}

/// Immutable graph: symmetrized CSR adjacency without self-loops, dense
/// feature matrix, one class label and one split tag per node.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    features: Vec<f64>,
    feat_dim: usize,
    labels: Vec<u32>,
    num_classes: usize,
    split: Vec<Split>,
    stats: LoadStats,
}

impl Graph {
    /// Assembles and validates a graph from raw parts. Edges may be listed in
    /// either or both directions and may contain duplicates or self-loops;
    /// storage is symmetrized, sorted, deduplicated, and self-loop free.
    pub fn from_parts(
        edges: &[(u32, u32)],
        features: Vec<f64>,
        feat_dim: usize,
        labels: Vec<u32>,
        split: SplitSpec,
    ) -> Result<Self, GraphError> {
        if feat_dim == 0 || features.is_empty() || features.len() % feat_dim != 0 {
            return Err(GraphError::Empty);
        }
        let num_nodes = features.len() / feat_dim;
        if labels.len() != num_nodes {
            return Err(GraphError::LabelCount { labels: labels.len(), nodes: num_nodes });
        }
        let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);

        let mut self_loops = 0usize;
        let mut directed: Vec<(u32, u32)> = Vec::with_capacity(edges.len() * 2);
        for &(a, b) in edges {
            if a == b {
                self_loops += 1;
                continue;
            }
            directed.push((a, b));
            directed.push((b, a));
        }
        directed.sort_unstable();
        let before = directed.len();
        directed.dedup();
        // each duplicate undirected input edge removed two directed entries
        let duplicates = (before - directed.len()) / 2;

        let mut offsets = vec![0usize; num_nodes + 1];
        for &(a, _) in &directed {
            offsets[a as usize + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let neighbors: Vec<u32> = directed.iter().map(|&(_, b)| b).collect();

        let split = match split {
            SplitSpec::Stratified { ratios, seed } => {
                stratified_split(&labels, num_classes, ratios, seed)?
            }
            SplitSpec::File(path) => read_split_file(&path, num_nodes)?,
        };
        let mut split_counts = [0usize; 3];
        for s in &split {
            split_counts[*s as usize] += 1;
        }
        for c in 0..num_classes as u32 {
            let has_train = labels
                .iter()
                .zip(&split)
                .any(|(&l, &s)| l == c && s == Split::Train);
            if !has_train {
                return Err(GraphError::ClassMissingFromTrain(c));
            }
        }

        let stats = LoadStats {
            self_loops_dropped: self_loops,
            duplicate_edges_dropped: duplicates,
            split_counts,
        };
        Ok(Self {
            num_nodes,
            offsets,
            neighbors,
            features,
            feat_dim,
            labels,
            num_classes,
            split,
            stats,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.neighbors[self.offsets[v as usize]..self.offsets[v as usize + 1]]
    }

    pub fn degree(&self, v: u32) -> usize {
        self.neighbors(v).len()
    }

    pub fn feature_row(&self, v: u32) -> &[f64] {
        let d = self.feat_dim;
        &self.features[v as usize * d..(v as usize + 1) * d]
    }

    pub fn label(&self, v: u32) -> u32 {
        self.labels[v as usize]
    }

    pub fn split_of(&self, v: u32) -> Split {
        self.split[v as usize]
    }

    pub fn split_nodes(&self, which: Split) -> Vec<u32> {
        (0..self.num_nodes as u32).filter(|&v| self.split[v as usize] == which).collect()
    }

    pub fn stats(&self) -> &LoadStats {
        &self.stats
    }

    /// Every stored arc has its reverse stored too.
    pub fn is_symmetric(&self) -> bool {
        (0..self.num_nodes as u32)
            .all(|i| self.neighbors(i).iter().all(|&j| self.neighbors(j).binary_search(&i).is_ok()))
    }
}

fn stratified_split(
    labels: &[u32],
    num_classes: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<Split>, GraphError> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(GraphError::BadRatios(ratios));
    }
    let mut split = vec![Split::Test; labels.len()];
    let mut rng = rng::rng(seed, &[rng::stream::SPLIT]);
    for c in 0..num_classes as u32 {
        let mut members: Vec<u32> = (0..labels.len() as u32).filter(|&v| labels[v as usize] == c).collect();
        members.shuffle(&mut rng);
        let k = members.len();
        let mut counts = [0usize; 3];
        let mut rema: Vec<(f64, usize)> = Vec::with_capacity(3);
        let mut assigned = 0;
        for (t, &r) in ratios.iter().enumerate() {
            let exact = r * k as f64;
            counts[t] = exact.floor() as usize;
            assigned += counts[t];
            rema.push((exact - exact.floor(), t));
        }
        // leftover seats go to the largest remainders; ties favor train first
        rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for i in 0..k - assigned {
            counts[rema[i % 3].1] += 1;
        }
        let mut it = members.into_iter();
        for (t, tag) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
            for _ in 0..counts[t] {
                split[it.next().unwrap() as usize] = tag;
            }
        }
    }
    Ok(split)
}

fn read_split_file(path: &Path, num_nodes: usize) -> Result<Vec<Split>, GraphError> {
    let text = fs::read_to_string(path)
        .map_err(|source| GraphError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let word = strip_comment(line);
        if word.is_empty() {
            continue;
        }
        out.push(match word {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => {
                return Err(GraphError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected train/val/test, got {other:?}"),
                })
            }
        });
    }
    if out.len() != num_nodes {
        return Err(GraphError::SplitCount { got: out.len(), nodes: num_nodes });
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Loads a graph from the three text files:
/// edges (one `src dst` pair per line, 0-based), features (one row of floats
/// per node), labels (one integer per node). `#` starts a comment anywhere.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    split: SplitSpec,
) -> Result<Graph, GraphError> {
    let feat_text = fs::read_to_string(feature_path)
        .map_err(|source| GraphError::Io { path: feature_path.to_path_buf(), source })?;
    let mut features = Vec::new();
    let mut feat_dim = 0usize;
    let mut num_nodes = 0usize;
    for (i, line) in feat_text.lines().enumerate() {
        let body = strip_comment(line);
        if body.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = body.split_whitespace().map(str::parse::<f64>).collect();
        let row = row.map_err(|e| GraphError::Parse {
            path: feature_path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if num_nodes == 0 {
            feat_dim = row.len();
        } else if row.len() != feat_dim {
            return Err(GraphError::Parse {
                path: feature_path.to_path_buf(),
                line: i + 1,
                msg: format!("feature row has {} values, expected {feat_dim}", row.len()),
            });
        }
        features.extend(row);
        num_nodes += 1;
    }
    if num_nodes == 0 {
        return Err(GraphError::Empty);
    }

    let label_text = fs::read_to_string(label_path)
        .map_err(|source| GraphError::Io { path: label_path.to_path_buf(), source })?;
    let mut labels = Vec::new();
    for (i, line) in label_text.lines().enumerate() {
        let body = strip_comment(line);
        if body.is_empty() {
            continue;
        }
        let l: u32 = body.parse().map_err(|e: std::num::ParseIntError| GraphError::Parse {
            path: label_path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        labels.push(l);
    }

    let edge_text = fs::read_to_string(edge_path)
        .map_err(|source| GraphError::Io { path: edge_path.to_path_buf(), source })?;
    let mut edges = Vec::new();
    for (i, line) in edge_text.lines().enumerate() {
        let body = strip_comment(line);
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let parse_id = |tok: Option<&str>| -> Result<usize, GraphError> {
            tok.ok_or_else(|| GraphError::Parse {
                path: edge_path.to_path_buf(),
                line: i + 1,
                msg: "expected `src dst`".into(),
            })?
            .parse::<usize>()
            .map_err(|e| GraphError::Parse {
                path: edge_path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        };
        let src = parse_id(parts.next())?;
        let dst = parse_id(parts.next())?;
        if parts.next().is_some() {
            return Err(GraphError::Parse {
                path: edge_path.to_path_buf(),
                line: i + 1,
                msg: "trailing tokens after `src dst`".into(),
            });
        }
        for id in [src, dst] {
            if id >= num_nodes {
                return Err(GraphError::NodeOutOfRange {
                    path: edge_path.to_path_buf(),
                    line: i + 1,
                    id,
                    num_nodes,
                });
            }
        }
        edges.push((src as u32, dst as u32));
    }

    Graph::from_parts(&edges, features, feat_dim, labels, split)
}

/// Writes a graph back out in the loader's file formats; used to build
/// fixtures and to materialize synthetic datasets for the CLI.
pub fn write_dataset_files(g: &Graph, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut edges = String::new();
    for i in 0..g.num_nodes() as u32 {
        for &j in g.neighbors(i) {
            if i < j {
                edges.push_str(&format!("{i} {j}\n"));
            }
        }
    }
    fs::write(dir.join("edges.txt"), edges)?;
    let mut feats = String::new();
    for v in 0..g.num_nodes() as u32 {
        let row: Vec<String> = g.feature_row(v).iter().map(|x| format!("{x}")).collect();
        feats.push_str(&row.join(" "));
        feats.push('\n');
    }
    fs::write(dir.join("features.txt"), feats)?;
    let labels: String = (0..g.num_nodes() as u32).map(|v| format!("{}\n", g.label(v))).collect();
    fs::write(dir.join("labels.txt"), labels)?;
    let split: String =
        (0..g.num_nodes() as u32).map(|v| format!("{}\n", g.split_of(v))).collect();
    fs::write(dir.join("split.txt"), split)
}

// ---------------------------------------------------------------------------
// normalized adjacency and its powers
// ---------------------------------------------------------------------------

/// Which normalization produces the self-looped adjacency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormKind {
    /// Random-walk: entry (i, j) is 1/(deg(i)+1); rows sum to 1 and powers
    /// are m-step reachability probabilities.
    #[default]
    Row,
    /// Symmetric: entry (i, j) is 1/sqrt((deg(i)+1)(deg(j)+1)).
    Sym,
}

/// CSR matrix over the graph's nodes with strictly positive stored values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRowMatrix {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseRowMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: u32) -> (&[u32], &[f64]) {
        let r = self.offsets[i as usize]..self.offsets[i as usize + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn entry(&self, i: u32, j: u32) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    pub fn row_sum(&self, i: u32) -> f64 {
        self.row(i).1.iter().sum()
    }
}

/// Row- or symmetrically-normalized (A + I); isolated nodes get the single
/// entry (i, i) = 1.
pub fn normalized_adjacency(g: &Graph, kind: NormKind) -> SparseRowMatrix {
    let n = g.num_nodes();
    let mut offsets = vec![0usize; n + 1];
    let mut cols = Vec::with_capacity(g.neighbors.len() + n);
    let mut vals = Vec::with_capacity(g.neighbors.len() + n);
    for i in 0..n as u32 {
        let neigh = g.neighbors(i);
        let di = (neigh.len() + 1) as f64;
        // merge the self-loop into the sorted neighbor run
        let mut placed = false;
        let push = |j: u32, cols: &mut Vec<u32>, vals: &mut Vec<f64>| {
            let v = match kind {
                NormKind::Row => 1.0 / di,
                NormKind::Sym => 1.0 / (di * (g.degree(j) as f64 + 1.0)).sqrt(),
            };
            cols.push(j);
            vals.push(v);
        };
        for &j in neigh {
            if !placed && j > i {
                push(i, &mut cols, &mut vals);
                placed = true;
            }
            push(j, &mut cols, &mut vals);
        }
        if !placed {
            push(i, &mut cols, &mut vals);
        }
        offsets[i as usize + 1] = cols.len();
    }
    SparseRowMatrix { n, offsets, cols, vals }
}

/// Lazily expanded rows of the normalized adjacency's powers, memoized per
/// (row, order). The memo is behind a mutex so concurrent batch builders can
/// share one instance.
pub struct AdjPowers {
    adj: SparseRowMatrix,
    m_max: usize,
    cache: Mutex<HashMap<(u32, u8), Arc<Vec<(u32, f64)>>>>,
}

pub const DEFAULT_M_MAX: usize = 3;

impl AdjPowers {
    pub fn new(adj: SparseRowMatrix, m_max: usize) -> Self {
        Self { adj, m_max, cache: Mutex::new(HashMap::new()) }
    }

    pub fn adj(&self) -> &SparseRowMatrix {
        &self.adj
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    /// Row i of the m-th power as sorted (col, value) pairs.
    pub fn row(&self, i: u32, m: usize) -> Result<Arc<Vec<(u32, f64)>>, GraphError> {
        if m > self.m_max {
            return Err(GraphError::PowerBudget { m, m_max: self.m_max });
        }
        if m == 0 {
            return Ok(Arc::new(vec![(i, 1.0)]));
        }
        if m == 1 {
            let (cols, vals) = self.adj.row(i);
            return Ok(Arc::new(cols.iter().copied().zip(vals.iter().copied()).collect()));
        }
        if let Some(hit) = self.cache.lock().unwrap().get(&(i, m as u8)) {
            return Ok(hit.clone());
        }
        let prev = self.row(i, m - 1)?;
        // expand one step: acc_j = sum_k prev_k * adj[k, j], k ascending so
        // the accumulation order matches a dense i-k-j matrix product
        let mut acc = vec![0.0f64; self.adj.n()];
        for &(k, w) in prev.iter() {
            let (cols, vals) = self.adj.row(k);
            for (&j, &v) in cols.iter().zip(vals) {
                acc[j as usize] += w * v;
            }
        }
        let row: Arc<Vec<(u32, f64)>> = Arc::new(
            acc.into_iter()
                .enumerate()
                .filter(|&(_, v)| v != 0.0)
                .map(|(j, v)| (j as u32, v))
                .collect(),
        );
        self.cache.lock().unwrap().insert((i, m as u8), row.clone());
        Ok(row)
    }

    /// Entry (i, j) of the m-th power; m = 0 is the identity.
    pub fn entry(&self, m: usize, i: u32, j: u32) -> Result<f64, GraphError> {
        if m > self.m_max {
            return Err(GraphError::PowerBudget { m, m_max: self.m_max });
        }
        match m {
            0 => Ok(if i == j { 1.0 } else { 0.0 }),
            1 => Ok(self.adj.entry(i, j)),
            _ => {
                let row = self.row(i, m)?;
                Ok(row
                    .binary_search_by_key(&j, |&(c, _)| c)
                    .map_or(0.0, |k| row[k].1))
            }
        }
    }
}

/// Dense m-th power oracle with i-k-j accumulation order; matches the sparse
/// row expansion bit for bit. Test support only.
#[cfg(test)]
pub(crate) fn dense_power(adj: &SparseRowMatrix, m: usize) -> Vec<f64> {
    let n = adj.n();
    let mut dense = vec![0.0; n * n];
    for i in 0..n as u32 {
        let (cols, vals) = adj.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            dense[i as usize * n + j as usize] = v;
        }
    }
    let mut out: Vec<f64> =
        (0..n * n).map(|x| if x / n == x % n { 1.0 } else { 0.0 }).collect();
    for _ in 0..m {
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = out[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += a * dense[k * n + j];
                }
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn toy(edges: &[(u32, u32)], n: usize) -> Graph {
        let features: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        let labels = vec![0u32; n];
        Graph::from_parts(
            edges,
            features,
            2,
            labels,
            SplitSpec::stratified([1.0, 0.0, 0.0], 1),
        )
        .unwrap()
    }

    #[test]
    fn triangle_graph_loads() {
        let g = toy(&[(0, 1), (1, 2), (0, 2)], 3);
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_edges(), 3);
        assert_eq!(g.neighbors(0), &[1, 2]);
        assert!(g.is_symmetric());
    }

    #[test]
    fn empty_edge_file_gives_isolated_nodes() {
        let g = toy(&[], 3);
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_edges(), 0);
        assert!(g.neighbors(1).is_empty());
    }

    #[test]
    fn duplicates_reversals_and_self_loops_cleaned() {
        let g = toy(&[(0, 1), (1, 0), (0, 1), (2, 2)], 3);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.stats().self_loops_dropped, 1);
        assert_eq!(g.stats().duplicate_edges_dropped, 2);
    }

    #[test]
    fn loader_reports_line_numbers() {
        let dir = TempDir::new().unwrap();
        let e = dir.path().join("edges.txt");
        let f = dir.path().join("features.txt");
        let l = dir.path().join("labels.txt");
        std::fs::write(&f, "0.0 1.0\n1.0 0.0\n").unwrap();
        std::fs::write(&l, "0\n0\n").unwrap();

        std::fs::write(&e, "# fine\n0 1\n0 x\n").unwrap();
        let err = load_graph(&e, &f, &l, SplitSpec::stratified([1.0, 0.0, 0.0], 0)).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");

        std::fs::write(&e, "0 5\n").unwrap();
        let err = load_graph(&e, &f, &l, SplitSpec::stratified([1.0, 0.0, 0.0], 0)).unwrap_err();
        assert!(matches!(err, GraphError::NodeOutOfRange { line: 1, id: 5, .. }), "{err}");
    }

    #[test]
    fn loader_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let e = dir.path().join("edges.txt");
        let f = dir.path().join("features.txt");
        let l = dir.path().join("labels.txt");
        std::fs::write(&e, "0 1 # comment\n1 2\n").unwrap();
        std::fs::write(&f, "0.5 1\n1 0\n0 0.25\n").unwrap();
        std::fs::write(&l, "0\n1\n0\n").unwrap();
        let spec = SplitSpec::stratified([0.4, 0.3, 0.3], 9);
        let a = load_graph(&e, &f, &l, spec.clone()).unwrap();
        let b = load_graph(&e, &f, &l, spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_split_sizes_and_determinism() {
        let labels: Vec<u32> = (0..10).map(|i| i % 2).collect();
        let s1 = stratified_split(&labels, 2, [0.6, 0.2, 0.2], 5).unwrap();
        let s2 = stratified_split(&labels, 2, [0.6, 0.2, 0.2], 5).unwrap();
        assert_eq!(s1, s2);
        let count = |t: Split| s1.iter().filter(|&&s| s == t).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
    }

    #[test]
    fn class_absent_from_train_rejected() {
        let features = vec![0.0; 4];
        let labels = vec![0, 1];
        let err = Graph::from_parts(
            &[],
            features,
            2,
            labels,
            SplitSpec::stratified([0.0, 0.5, 0.5], 1),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::ClassMissingFromTrain(_)));
    }

    #[test]
    fn normalization_examples() {
        // single isolated node
        let g = toy(&[], 1);
        let adj = normalized_adjacency(&g, NormKind::Row);
        assert_eq!(adj.row(0), (&[0u32][..], &[1.0][..]));

        // two nodes, one edge: every stored entry 0.5
        let g = toy(&[(0, 1)], 2);
        let adj = normalized_adjacency(&g, NormKind::Row);
        for i in 0..2 {
            let (_, vals) = adj.row(i);
            assert!(vals.iter().all(|&v| v == 0.5));
        }

        // path 0-1-2: row 1 all 1/3, row 0 = {0: 1/2, 1: 1/2}
        let g = toy(&[(0, 1), (1, 2)], 3);
        let adj = normalized_adjacency(&g, NormKind::Row);
        let (cols, vals) = adj.row(1);
        assert_eq!(cols, &[0, 1, 2]);
        assert!(vals.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(adj.entry(0, 0), 0.5);
        assert_eq!(adj.entry(0, 1), 0.5);
        assert_eq!(adj.entry(0, 2), 0.0);
    }

    #[test]
    fn symmetric_normalization_matches_formula() {
        let g = toy(&[(0, 1), (1, 2)], 3);
        let adj = normalized_adjacency(&g, NormKind::Sym);
        // deg+1: node 0 -> 2, node 1 -> 3
        assert!((adj.entry(0, 1) - 1.0 / (2.0f64 * 3.0).sqrt()).abs() < 1e-15);
        assert!((adj.entry(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn power_entries_on_path_graph() {
        let g = toy(&[(0, 1), (1, 2)], 3);
        let powers = AdjPowers::new(normalized_adjacency(&g, NormKind::Row), DEFAULT_M_MAX);
        assert_eq!(powers.entry(0, 0, 0).unwrap(), 1.0);
        assert_eq!(powers.entry(0, 0, 2).unwrap(), 0.0);
        assert_eq!(powers.entry(1, 0, 2).unwrap(), 0.0);
        let e = powers.entry(2, 0, 2).unwrap();
        assert!((e - 1.0 / 6.0).abs() < 1e-12, "got {e}");
        assert!(matches!(
            powers.entry(4, 0, 0),
            Err(GraphError::PowerBudget { m: 4, m_max: 3 })
        ));
    }

    fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
        use rand::Rng;
        let mut r = rng::rng(seed, &[0x5247]);
        let mut edges = Vec::new();
        for i in 0..n as u32 {
            for j in i + 1..n as u32 {
                if r.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let features = vec![0.0; n * 2];
        Graph::from_parts(&edges, features, 2, vec![0; n], SplitSpec::stratified([1.0, 0.0, 0.0], 1))
            .unwrap()
    }

    #[test]
    fn power_rows_match_dense_oracle_and_stay_stochastic() {
        for seed in 0..4 {
            let g = random_graph(60 + seed as usize * 40, 0.06, seed);
            let adj = normalized_adjacency(&g, NormKind::Row);
            let powers = AdjPowers::new(adj.clone(), DEFAULT_M_MAX);
            for m in 0..=3usize {
                let dense = dense_power(&adj, m);
                let n = adj.n();
                for i in (0..n as u32).step_by(7) {
                    let row = powers.row(i, m).unwrap();
                    let sum: f64 = row.iter().map(|&(_, v)| v).sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row sum {sum} at m={m}");
                    for j in (0..n as u32).step_by(3) {
                        let got = powers.entry(m, i, j).unwrap();
                        let want = dense[i as usize * n + j as usize];
                        assert!(
                            (got - want).abs() < 1e-12,
                            "m={m} ({i},{j}): {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = TempDir::new().unwrap();
        let g = toy(&[(0, 1), (1, 2), (2, 3)], 4);
        write_dataset_files(&g, dir.path()).unwrap();
        let loaded = load_graph(
            &dir.path().join("edges.txt"),
            &dir.path().join("features.txt"),
            &dir.path().join("labels.txt"),
            SplitSpec::File(dir.path().join("split.txt")),
        )
        .unwrap();
        assert_eq!(loaded.num_edges(), g.num_edges());
        assert_eq!(loaded.feature_row(2), g.feature_row(2));
        for v in 0..4 {
            assert_eq!(loaded.split_of(v), g.split_of(v));
        }
    }
}
