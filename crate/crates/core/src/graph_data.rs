//! Graph data model, JSONL ingestion, synthetic grouped graphs and k-fold splits.
//!
//! Storage is dense (`n×n` adjacency, `n×n×d_e` edge features). That is the
//! right trade-off for molecule-sized graphs and the wrong one for large graphs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An undirected attributed graph `G = (A, X, E)` with an optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_features: Tensor,
    edge_features: Tensor,
    adjacency: Tensor,
    pub label: Option<f64>,
}

/// One undirected edge `(i, j)` with its feature vector.
pub type EdgeRecord = (usize, usize, Vec<f64>);

impl Graph {
    /// Builds a graph from node rows and an undirected edge list.
    ///
    /// Each edge is mirrored into both directions. Repeating an edge is
    /// accepted only with identical features.
    pub fn new(
        nodes: &[Vec<f64>],
        edges: &[EdgeRecord],
        d_e: usize,
        label: Option<f64>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "graph needs at least one node".into(),
            ));
        }
        let node_features = Tensor::from_rows(nodes)?;
        if node_features.cols() == 0 {
            return Err(Error::InvalidArgument(
                "node features need at least one dimension".into(),
            ));
        }
        if d_e == 0 {
            return Err(Error::InvalidArgument(
                "edge features need at least one dimension".into(),
            ));
        }
        let mut adjacency = Tensor::zeros([n, n]);
        let mut edge_features = Tensor::zeros([n, n, d_e]);
        for (k, (i, j, f)) in edges.iter().enumerate() {
            let (i, j) = (*i, *j);
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge {k} ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!(
                    "edge {k} is a self loop on node {i}"
                )));
            }
            if f.len() != d_e {
                return Err(Error::InvalidArgument(format!(
                    "edge {k} has {} features, expected {d_e}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "edge {k} has a non-finite feature"
                )));
            }
            if adjacency.get(i, j) == 1.0 {
                let existing = &edge_features.data()[(i * n + j) * d_e..(i * n + j + 1) * d_e];
                if existing != f.as_slice() {
                    return Err(Error::InvalidArgument(format!(
                        "edge {k} ({i}, {j}) repeated with different features"
                    )));
                }
                continue;
            }
            for (a, b) in [(i, j), (j, i)] {
                adjacency.set(a, b, 1.0);
                edge_features.data_mut()[(a * n + b) * d_e..(a * n + b + 1) * d_e]
                    .copy_from_slice(f);
            }
        }
        let graph = Self {
            node_features,
            edge_features,
            adjacency,
            label,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let d_e = self.d_e();
        if n == 0 || self.d_n() == 0 || d_e == 0 {
            return Err(Error::InvalidArgument(
                "graph dimensions must be positive".into(),
            ));
        }
        if !self.node_features.all_finite() || !self.edge_features.all_finite() {
            return Err(Error::InvalidArgument(
                "graph features must be finite".into(),
            ));
        }
        if self.label.is_some_and(|y| !y.is_finite()) {
            return Err(Error::InvalidArgument("label must be finite".into()));
        }
        for i in 0..n {
            if self.adjacency.get(i, i) != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "adjacency has a self loop at {i}"
                )));
            }
            for j in 0..n {
                let a = self.adjacency.get(i, j);
                if a != 0.0 && a != 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency[{i}][{j}] = {a} is not binary"
                    )));
                }
                if a != self.adjacency.get(j, i) {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency not symmetric at ({i}, {j})"
                    )));
                }
                if a == 0.0 && self.edge_feature(i, j).iter().any(|&v| v != 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "edge features present without edge ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.node_features.rows()
    }

    pub fn d_n(&self) -> usize {
        self.node_features.cols()
    }

    pub fn d_e(&self) -> usize {
        self.edge_features.shape()[2]
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    /// Dense `n×n×d_e` edge features, zero where there is no edge.
    pub fn edge_features(&self) -> &Tensor {
        &self.edge_features
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn edge_feature(&self, i: usize, j: usize) -> &[f64] {
        let (n, d) = (self.n(), self.d_e());
        &self.edge_features.data()[(i * n + j) * d..(i * n + j + 1) * d]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i, j) != 0.0
    }

    /// Undirected edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument(
                "not a permutation of the node set".into(),
            ));
        }
        let (d_n, d_e) = (self.d_n(), self.d_e());
        let mut x = Tensor::zeros([n, d_n]);
        let mut e = Tensor::zeros([n, n, d_e]);
        for i in 0..n {
            x.data_mut()[perm[i] * d_n..(perm[i] + 1) * d_n]
                .copy_from_slice(self.node_features.row(i));
            for j in 0..n {
                let dst = (perm[i] * n + perm[j]) * d_e;
                e.data_mut()[dst..dst + d_e].copy_from_slice(self.edge_feature(i, j));
            }
        }
        Ok(Graph {
            node_features: x,
            edge_features: e,
            adjacency: self.adjacency.permute_square(perm),
            label: self.label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Graphs sharing feature dimensions and a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub task: Task,
    pub d_n: usize,
    pub d_e: usize,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, task: Task) -> Result<Self> {
        let (d_n, d_e) = graphs.first().map_or((0, 0), |g| (g.d_n(), g.d_e()));
        let ds = Self {
            graphs,
            task,
            d_n,
            d_e,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, g) in self.graphs.iter().enumerate() {
            if g.d_n() != self.d_n || g.d_e() != self.d_e {
                return Err(Error::InvalidArgument(format!(
                    "graph {k} has dimensions ({}, {}), dataset has ({}, {})",
                    g.d_n(),
                    g.d_e(),
                    self.d_n,
                    self.d_e
                )));
            }
            match (g.label, self.task) {
                (None, _) => return Err(Error::InvalidArgument(format!("graph {k} has no label"))),
                (Some(y), Task::Classification) if y != 0.0 && y != 1.0 => {
                    return Err(Error::InvalidArgument(format!(
                        "graph {k}: classification label {y} is not 0/1"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.graphs
            .iter()
            .map(|g| g.label.unwrap_or(f64::NAN))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            task: self.task,
            d_n: self.d_n,
            d_e: self.d_e,
        }
    }

    /// Keeps graphs whose node count lies in `[min_nodes, max_nodes]`.
    pub fn filter_by_size(&self, min_nodes: Option<usize>, max_nodes: Option<usize>) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let n = self.graphs[i].n();
                min_nodes.is_none_or(|m| n >= m) && max_nodes.is_none_or(|m| n <= m)
            })
            .collect();
        self.subset(&keep)
    }

    pub fn mean_size(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.graphs.iter().map(|g| g.n() as f64).sum::<f64>() / self.len() as f64
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    nodes: Vec<Vec<f64>>,
    edges: Vec<EdgeRecord>,
    label: serde_json::Number,
}

fn schema(line: usize, field: &'static str, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        field,
        message: message.into(),
    }
}

/// Reads one graph per line.
///
/// Labels written as the integers `0`/`1` throughout make a classification
/// dataset; anything else is regression. If no line has an edge, `d_e` is 1.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(raw).map_err(|e| schema(line, "record", e.to_string()))?;
        records.push((line, rec));
    }

    let mut d_n = None;
    let mut d_e = None;
    for (line, rec) in &records {
        let width = rec
            .nodes
            .first()
            .map(Vec::len)
            .ok_or_else(|| schema(*line, "nodes", "graph has no nodes"))?;
        if width == 0 {
            return Err(schema(*line, "nodes", "node features are empty"));
        }
        if let Some(row) = rec.nodes.iter().position(|r| r.len() != width) {
            return Err(schema(
                *line,
                "nodes",
                format!(
                    "row {row} has {} values, expected {width}",
                    rec.nodes[row].len()
                ),
            ));
        }
        match d_n {
            None => d_n = Some(width),
            Some(d) if d != width => {
                return Err(schema(
                    *line,
                    "nodes",
                    format!("feature dimension {width} differs from earlier lines ({d})"),
                ))
            }
            _ => {}
        }
        for (k, (_, _, f)) in rec.edges.iter().enumerate() {
            match d_e {
                None if f.is_empty() => {
                    return Err(schema(*line, "edges", format!("edge {k} has no features")))
                }
                None => d_e = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(schema(
                        *line,
                        "edges",
                        format!("edge {k} has {} features, expected {d}", f.len()),
                    ))
                }
                _ => {}
            }
        }
    }
    let d_e = d_e.unwrap_or(1);

    let classification = !records.is_empty()
        && records
            .iter()
            .all(|(_, r)| matches!(r.label.as_u64(), Some(0 | 1)));
    let task = if classification {
        Task::Classification
    } else {
        Task::Regression
    };

    let mut graphs = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let label = rec
            .label
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| schema(line, "label", "not a finite number"))?;
        let g = Graph::new(&rec.nodes, &rec.edges, d_e, Some(label)).map_err(|e| match e {
            Error::InvalidArgument(m) if m.starts_with("edge") => schema(line, "edges", m),
            other => schema(line, "nodes", other.to_string()),
        })?;
        graphs.push(g);
    }
    let ds = Dataset {
        graphs,
        task,
        d_n: d_n.unwrap_or(0),
        d_e,
    };
    Ok(ds)
}

fn push_real(out: &mut String, v: f64) {
    // 17 significant digits round-trip every f64.
    let _ = write!(out, "{v:.16e}");
}

fn push_reals(out: &mut String, values: &[f64]) {
    out.push('[');
    for (k, &v) in values.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        push_real(out, v);
    }
    out.push(']');
}

/// Serializes one graph as a JSONL record (without the trailing newline).
pub fn graph_to_json_line(g: &Graph, task: Task) -> String {
    let mut out = String::from("{\"nodes\":[");
    for i in 0..g.n() {
        if i > 0 {
            out.push(',');
        }
        push_reals(&mut out, g.node_features().row(i));
    }
    out.push_str("],\"edges\":[");
    for (k, (i, j)) in g.undirected_edges().into_iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{i},{j},");
        push_reals(&mut out, g.edge_feature(i, j));
        out.push(']');
    }
    out.push_str("],\"label\":");
    let y = g.label.unwrap_or(0.0);
    match task {
        Task::Classification => {
            let _ = write!(out, "{}", if y == 1.0 { 1 } else { 0 });
        }
        Task::Regression => push_real(&mut out, y),
    }
    out.push('}');
    out
}

pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for g in &ds.graphs {
        buf.push_str(&graph_to_json_line(g, ds.task));
        buf.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Label is the number of groups.
    GroupCount,
    /// Label is the sum of all group mean-vector entries.
    GroupFeatureSum,
}

/// Parameters for clustered synthetic graphs: dense intra-group cliques
/// joined by a few bridge edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Inclusive range the per-graph group count is drawn from.
    pub groups: (usize, usize),
    /// Inclusive range each group's size is drawn from.
    pub group_size: (usize, usize),
    /// Bridge edges inserted between every pair of groups.
    pub inter_group_edges: usize,
    pub noise: f64,
    pub node_dim: usize,
    pub target_rule: TargetRule,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 100,
            groups: (3, 3),
            group_size: (3, 5),
            inter_group_edges: 1,
            noise: 0.1,
            node_dim: 4,
            target_rule: TargetRule::GroupCount,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.groups.0 < 1 || self.groups.0 > self.groups.1 {
            return bad(format!(
                "group count range {:?} must satisfy 1 <= min <= max",
                self.groups
            ));
        }
        if self.group_size.0 < 1 || self.group_size.0 > self.group_size.1 {
            return bad(format!(
                "group size range {:?} must satisfy 1 <= min <= max",
                self.group_size
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!(
                "noise must be a non-negative number, got {}",
                self.noise
            ));
        }
        if self.node_dim < 1 {
            return bad("node_dim must be at least 1".into());
        }
        Ok(())
    }
}

/// Edge feature of intra-group edges; bridges use `[0, 1]`.
pub const INTRA_GROUP_EDGE: [f64; 2] = [1.0, 0.0];
pub const BRIDGE_EDGE: [f64; 2] = [0.0, 1.0];

/// Synthetic dataset together with each graph's ground-truth node groups.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub memberships: Vec<Vec<usize>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_synthetic_with_groups(spec)?.dataset)
}

pub fn generate_synthetic_with_groups(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut graphs = Vec::with_capacity(spec.count);
    let mut memberships = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let g = rng.random_range(spec.groups.0..=spec.groups.1);
        let sizes: Vec<usize> = (0..g)
            .map(|_| rng.random_range(spec.group_size.0..=spec.group_size.1))
            .collect();
        let means: Vec<Vec<f64>> = (0..g)
            .map(|_| {
                (0..spec.node_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();

        let mut membership = Vec::new();
        let mut nodes = Vec::new();
        let mut starts = Vec::with_capacity(g);
        for (group, &k) in sizes.iter().enumerate() {
            starts.push(nodes.len());
            for _ in 0..k {
                membership.push(group);
                nodes.push(
                    means[group]
                        .iter()
                        .map(|&m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + spec.noise * z
                        })
                        .collect::<Vec<f64>>(),
                );
            }
        }

        let mut edges = Vec::new();
        for (group, &k) in sizes.iter().enumerate() {
            let s = starts[group];
            for i in s..s + k {
                for j in (i + 1)..s + k {
                    edges.push((i, j, INTRA_GROUP_EDGE.to_vec()));
                }
            }
        }
        for a in 0..g {
            for b in (a + 1)..g {
                let mut candidates: Vec<(usize, usize)> = (starts[a]..starts[a] + sizes[a])
                    .flat_map(|i| (starts[b]..starts[b] + sizes[b]).map(move |j| (i, j)))
                    .collect();
                candidates.shuffle(&mut rng);
                for &(i, j) in candidates.iter().take(spec.inter_group_edges) {
                    edges.push((i, j, BRIDGE_EDGE.to_vec()));
                }
            }
        }

        let label = match spec.target_rule {
            TargetRule::GroupCount => g as f64,
            TargetRule::GroupFeatureSum => means.iter().flatten().sum(),
        };
        graphs.push(Graph::new(&nodes, &edges, 2, Some(label))?);
        memberships.push(membership);
    }
    let dataset = Dataset {
        graphs,
        task: Task::Regression,
        d_n: spec.node_dim,
        d_e: 2,
    };
    Ok(SyntheticDataset {
        dataset,
        memberships,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Index-level split: a held-out test set plus `k` train/validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KFoldIndices {
    pub test: Vec<usize>,
    pub folds: Vec<Fold>,
}

/// Carves a uniformly sampled test set, then partitions the remainder into
/// `folds` disjoint validation folds.
pub fn kfold_indices(
    len: usize,
    folds: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<KFoldIndices> {
    if folds < 1 {
        return Err(Error::InvalidArgument("need at least one fold".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in [0, 1)"
        )));
    }
    if len < folds + 1 {
        return Err(Error::InvalidArgument(format!(
            "dataset of {len} graphs is too small for {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (len as f64 * test_fraction).round() as usize;
    let rest = len - n_test;
    if rest < folds {
        return Err(Error::InvalidArgument(format!(
            "only {rest} graphs remain after the test split, need {folds}"
        )));
    }
    let mut test = order[..n_test].to_vec();
    test.sort_unstable();
    let remainder = &order[n_test..];

    let base = rest / folds;
    let extra = rest % folds;
    let mut parts = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let size = base + usize::from(k < extra);
        parts.push(&remainder[start..start + size]);
        start += size;
    }
    let folds = (0..parts.len())
        .map(|k| {
            let mut valid = parts[k].to_vec();
            valid.sort_unstable();
            let mut train: Vec<usize> = parts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            train.sort_unstable();
            Fold { train, valid }
        })
        .collect();
    Ok(KFoldIndices { test, folds })
}

/// Dataset-level split: `(test, [(train, valid); folds])`.
pub fn kfold_split(
    ds: &Dataset,
    folds: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Vec<(Dataset, Dataset)>)> {
    let idx = kfold_indices(ds.len(), folds, test_fraction, seed)?;
    let parts = idx
        .folds
        .iter()
        .map(|f| (ds.subset(&f.train), ds.subset(&f.valid)))
        .collect();
    Ok((ds.subset(&idx.test), parts))
}
