//! Graph data model, bundle file I/O, adjacency normalization, Dirichlet
//! label-skew partitioning into client subgraphs, per-class subgraph sampling
//! and a stochastic-block-model generator for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: {msg}")]
    Load {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Node split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

/// A node-attributed undirected graph with train/val/test masks.
///
/// Edges are stored once with u < v, deduplicated, no self-loops.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Vec<Split>,
    /// Optional edge weights aligned with `edges` (condensed graphs). 1.0 if absent.
    pub edge_weights: Option<Vec<f64>>,
}

impl GraphBundle {
    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn mask(&self, which: Split) -> Vec<bool> {
        self.splits.iter().map(|&s| s == which).collect()
    }

    pub fn mask_nodes(&self, which: Split) -> Vec<usize> {
        (0..self.n).filter(|&v| self.splits[v] == which).collect()
    }

    pub fn adjacency_list(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Degree including the added self-loop, with edge weights if present.
    pub fn tilde_degrees(&self) -> Vec<f64> {
        let mut deg = vec![1.0; self.n];
        for (i, &(u, v)) in self.edges.iter().enumerate() {
            let w = self.edge_weights.as_ref().map_or(1.0, |ws| ws[i]);
            deg[u] += w;
            deg[v] += w;
        }
        deg
    }

    pub fn per_class_train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for v in 0..self.n {
            if self.splits[v] == Split::Train {
                counts[self.labels[v]] += 1;
            }
        }
        counts
    }
}

/// Symmetric normalization D^{-1/2} (A + w_self I) D^{-1/2} as a dense matrix.
#[derive(Debug, Clone)]
pub struct NormalizedAdj {
    pub matrix: Tensor,
}

pub fn normalize_adj(edges: &[(usize, usize)], n: usize, extra_self_weight: f64) -> NormalizedAdj {
    normalize_adj_weighted(edges, None, n, extra_self_weight)
}

pub fn normalize_adj_weighted(
    edges: &[(usize, usize)],
    weights: Option<&[f64]>,
    n: usize,
    extra_self_weight: f64,
) -> NormalizedAdj {
    let mut a = Tensor::zeros(n, n);
    for (i, &(u, v)) in edges.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        a.set(u, v, a.get(u, v) + w);
        a.set(v, u, a.get(v, u) + w);
    }
    for d in 0..n {
        a.set(d, d, a.get(d, d) + extra_self_weight);
    }
    let mut deg = vec![0.0; n];
    for r in 0..n {
        deg[r] = (0..n).map(|c| a.get(r, c)).sum();
    }
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    for r in 0..n {
        for c in 0..n {
            let v = a.get(r, c);
            if v != 0.0 {
                a.set(r, c, v * inv_sqrt[r] * inv_sqrt[c]);
            }
        }
    }
    NormalizedAdj { matrix: a }
}

/// One client's view of the partitioned graph. Node ids are global; `index_of`
/// maps global id to local row.
#[derive(Debug, Clone)]
pub struct ClientSubgraph {
    pub client_id: usize,
    pub nodes: Vec<usize>,
    pub internal_edges: Vec<(usize, usize)>,
    /// (local endpoint, remote endpoint), both global ids.
    pub cross_edges: Vec<(usize, usize)>,
    pub index_of: BTreeMap<usize, usize>,
}

impl ClientSubgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn local_edges(&self) -> Vec<(usize, usize)> {
        self.internal_edges
            .iter()
            .map(|&(u, v)| (self.index_of[&u], self.index_of[&v]))
            .collect()
    }

    pub fn local_adjacency_list(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.internal_edges {
            let (lu, lv) = (self.index_of[&u], self.index_of[&v]);
            adj[lu].push(lv);
            adj[lv].push(lu);
        }
        adj
    }

    pub fn gather_rows(&self, m: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(self.nodes.len(), m.cols());
        for (r, &g) in self.nodes.iter().enumerate() {
            for c in 0..m.cols() {
                out.set(r, c, m.get(g, c));
            }
        }
        out
    }
}

/// Per-class sampled subgraph: class-c training nodes plus their in-client
/// 1-hop neighbors, with induced internal edges.
#[derive(Debug, Clone)]
pub struct SampledSubgraph {
    pub nodes: Vec<usize>,
    pub local_edges: Vec<(usize, usize)>,
    pub loss_mask: Vec<bool>,
    pub index_of: BTreeMap<usize, usize>,
}

/// Sample the class-c training subgraph of a client.
///
/// `labels` and `labeled` are global vectors: `labeled[v]` marks the nodes
/// whose labels participate in training (true train nodes, optionally plus
/// pseudo-labeled ones). Returns None when the client has no labeled node of
/// class c.
pub fn class_subgraph(
    cs: &ClientSubgraph,
    c: usize,
    labels: &[usize],
    labeled: &[bool],
) -> Option<SampledSubgraph> {
    let seeds: Vec<usize> = cs
        .nodes
        .iter()
        .copied()
        .filter(|&v| labeled[v] && labels[v] == c)
        .collect();
    if seeds.is_empty() {
        return None;
    }
    let adj = cs.local_adjacency_list();
    let mut chosen: BTreeSet<usize> = seeds.iter().copied().collect();
    for &v in &seeds {
        let lv = cs.index_of[&v];
        for &lu in &adj[lv] {
            chosen.insert(cs.nodes[lu]);
        }
    }
    let nodes: Vec<usize> = chosen.into_iter().collect();
    let index_of: BTreeMap<usize, usize> =
        nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let loss_mask: Vec<bool> = nodes
        .iter()
        .map(|&v| labeled[v] && labels[v] == c)
        .collect();
    let mut local_edges = Vec::new();
    for &(u, v) in &cs.internal_edges {
        if let (Some(&lu), Some(&lv)) = (index_of.get(&u), index_of.get(&v)) {
            local_edges.push((lu, lv));
        }
    }
    Some(SampledSubgraph {
        nodes,
        local_edges,
        loss_mask,
        index_of,
    })
}

/// Label-skew partition: each class's nodes are divided among clients with
/// proportions drawn from Dirichlet(beta). Deterministic per seed.
pub fn dirichlet_partition(
    g: &GraphBundle,
    m: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<ClientSubgraph>> {
    if m == 0 {
        return Err(GraphError::Param("client count must be >= 1".into()));
    }
    if beta <= 0.0 {
        return Err(GraphError::Param("beta must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut owner = vec![0usize; g.n];
    for c in 0..g.num_classes {
        let mut members: Vec<usize> = (0..g.n).filter(|&v| g.labels[v] == c).collect();
        members.shuffle(&mut rng);
        let props = dirichlet_draw(&mut rng, m, beta);
        let counts = apportion(members.len(), &props);
        let mut at = 0;
        for (j, &k) in counts.iter().enumerate() {
            for &v in &members[at..at + k] {
                owner[v] = j;
            }
            at += k;
        }
    }
    Ok(build_clients(g, &owner, m))
}

/// Draw Dirichlet(beta * 1_m) proportions via normalized Gamma(beta, 1) draws,
/// client index order.
pub fn dirichlet_draw(rng: &mut ChaCha8Rng, m: usize, beta: f64) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0");
    let mut draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    for d in &mut draws {
        *d /= total;
    }
    draws
}

/// Largest-remainder apportionment of `total` items over `props`.
pub fn apportion(total: usize, props: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    // stable tie-break on index
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % props.len()]] += 1;
    }
    counts
}

pub fn build_clients(g: &GraphBundle, owner: &[usize], m: usize) -> Vec<ClientSubgraph> {
    let mut clients: Vec<ClientSubgraph> = (0..m)
        .map(|j| ClientSubgraph {
            client_id: j,
            nodes: Vec::new(),
            internal_edges: Vec::new(),
            cross_edges: Vec::new(),
            index_of: BTreeMap::new(),
        })
        .collect();
    for v in 0..g.n {
        clients[owner[v]].nodes.push(v);
    }
    for c in clients.iter_mut() {
        c.index_of = c.nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    }
    for &(u, v) in &g.edges {
        let (ou, ov) = (owner[u], owner[v]);
        if ou == ov {
            clients[ou].internal_edges.push((u, v));
        } else {
            clients[ou].cross_edges.push((u, v));
            clients[ov].cross_edges.push((v, u));
        }
    }
    clients
}

/// Stochastic block model with class-mean-shifted Gaussian features and a
/// stratified 10/20/70 train/val/test split.
#[allow(clippy::too_many_arguments)]
pub fn sbm_generate(
    blocks: usize,
    per_block: usize,
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    feat_shift: f64,
    seed: u64,
) -> Result<GraphBundle> {
    if per_block < 2 {
        return Err(GraphError::Param("per_block must be >= 2".into()));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out >= p_in {
        return Err(GraphError::Param(
            "require 0 <= p_out < p_in <= 1".into(),
        ));
    }
    if feat_shift < 0.0 {
        return Err(GraphError::Param("feat_shift must be >= 0".into()));
    }
    if feat_dim == 0 {
        return Err(GraphError::Param("feat_dim must be >= 1".into()));
    }
    let n = blocks * per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|v| v / per_block).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let mut features = Tensor::zeros(n, feat_dim);
    for v in 0..n {
        let mean_dim = labels[v] % feat_dim;
        for d in 0..feat_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mean = if d == mean_dim { feat_shift } else { 0.0 };
            features.set(v, d, mean + noise);
        }
    }
    let mut splits = vec![Split::None; n];
    for b in 0..blocks {
        let start = b * per_block;
        let mut ids: Vec<usize> = (start..start + per_block).collect();
        ids.shuffle(&mut rng);
        let n_train = (per_block as f64 * 0.1).round().max(1.0) as usize;
        let n_val = (per_block as f64 * 0.2).round().max(1.0) as usize;
        for (i, &v) in ids.iter().enumerate() {
            splits[v] = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(GraphBundle {
        n,
        edges,
        features,
        labels,
        num_classes: blocks,
        splits,
        edge_weights: None,
    })
}

fn read_file(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn data_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn load_err(file: &str, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Load {
        file: file.into(),
        line,
        msg: msg.into(),
    }
}

/// Load a bundle directory: edges.tsv, features.tsv, labels.tsv, splits.tsv,
/// optionally adjacency_weights.tsv for weighted (condensed) graphs.
pub fn load_bundle(dir: &Path) -> Result<GraphBundle> {
    let feat_raw = read_file(dir, "features.tsv")?;
    let mut feat_rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (ln, line) in data_lines(&feat_raw) {
        let mut parts = line.split('\t');
        let id: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| load_err("features.tsv", ln, "bad node id"))?;
        let vals: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| load_err("features.tsv", ln, "bad feature value"))?;
        if let Some(d) = dim {
            if vals.len() != d {
                return Err(load_err(
                    "features.tsv",
                    ln,
                    format!("ragged row: {} values, expected {}", vals.len(), d),
                ));
            }
        } else {
            dim = Some(vals.len());
        }
        if feat_rows.insert(id, vals).is_some() {
            return Err(load_err("features.tsv", ln, format!("duplicate node {id}")));
        }
    }
    let n = feat_rows.len();
    if n == 0 {
        return Err(load_err("features.tsv", 0, "no nodes"));
    }
    if feat_rows.keys().last() != Some(&(n - 1)) || feat_rows.keys().next() != Some(&0) {
        return Err(load_err(
            "features.tsv",
            0,
            "node ids must be contiguous from 0",
        ));
    }
    let d = dim.unwrap();
    let mut features = Tensor::zeros(n, d);
    for (&id, vals) in &feat_rows {
        for (c, &v) in vals.iter().enumerate() {
            features.set(id, c, v);
        }
    }

    let label_raw = read_file(dir, "labels.tsv")?;
    let mut labels = vec![usize::MAX; n];
    for (ln, line) in data_lines(&label_raw) {
        let mut parts = line.split('\t');
        let id: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| load_err("labels.tsv", ln, "bad node id"))?;
        let lab: usize = parts
            .next()
            .ok_or_else(|| load_err("labels.tsv", ln, "missing label"))?
            .parse()
            .map_err(|_| load_err("labels.tsv", ln, "bad label"))?;
        if id >= n {
            return Err(load_err("labels.tsv", ln, format!("node {id} out of range")));
        }
        labels[id] = lab;
    }
    if let Some(v) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(load_err("labels.tsv", 0, format!("node {v} has no label")));
    }
    let num_classes = labels.iter().max().unwrap() + 1;

    let edge_raw = read_file(dir, "edges.tsv")?;
    let mut edge_set: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (ln, line) in data_lines(&edge_raw) {
        let mut parts = line.split('\t');
        let u: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| load_err("edges.tsv", ln, "bad endpoint"))?;
        let v: usize = parts
            .next()
            .ok_or_else(|| load_err("edges.tsv", ln, "missing endpoint"))?
            .parse()
            .map_err(|_| load_err("edges.tsv", ln, "bad endpoint"))?;
        if u >= n || v >= n {
            return Err(load_err(
                "edges.tsv",
                ln,
                format!("endpoint out of range in edge {u} {v} (n={n})"),
            ));
        }
        if u == v {
            continue; // self-loops are added at normalization, not stored
        }
        edge_set.insert((u.min(v), u.max(v)));
    }
    let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();

    let split_raw = read_file(dir, "splits.tsv")?;
    let mut splits = vec![Split::None; n];
    for (ln, line) in data_lines(&split_raw) {
        let mut parts = line.split('\t');
        let id: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| load_err("splits.tsv", ln, "bad node id"))?;
        let which = parts
            .next()
            .ok_or_else(|| load_err("splits.tsv", ln, "missing split"))?;
        if id >= n {
            return Err(load_err("splits.tsv", ln, format!("node {id} out of range")));
        }
        let s = match which {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(load_err("splits.tsv", ln, format!("unknown split '{other}'"))),
        };
        if splits[id] != Split::None {
            return Err(load_err(
                "splits.tsv",
                ln,
                format!("node {id} assigned to multiple splits"),
            ));
        }
        splits[id] = s;
    }

    let weights_path = dir.join("adjacency_weights.tsv");
    let mut edge_weights = None;
    if weights_path.exists() {
        let raw = read_file(dir, "adjacency_weights.tsv")?;
        let mut wmap: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (ln, line) in data_lines(&raw) {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(load_err("adjacency_weights.tsv", ln, "expected i j weight"));
            }
            let i: usize = parts[0]
                .parse()
                .map_err(|_| load_err("adjacency_weights.tsv", ln, "bad id"))?;
            let j: usize = parts[1]
                .parse()
                .map_err(|_| load_err("adjacency_weights.tsv", ln, "bad id"))?;
            let w: f64 = parts[2]
                .parse()
                .map_err(|_| load_err("adjacency_weights.tsv", ln, "bad weight"))?;
            wmap.insert((i.min(j), i.max(j)), w);
        }
        edge_weights = Some(
            edges
                .iter()
                .map(|e| wmap.get(e).copied().unwrap_or(1.0))
                .collect(),
        );
    }

    Ok(GraphBundle {
        n,
        edges,
        features,
        labels,
        num_classes,
        splits,
        edge_weights,
    })
}

/// Write a bundle directory in the documented TSV formats.
pub fn save_bundle(g: &GraphBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GraphError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, content).map_err(|e| GraphError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };
    let mut edges = String::new();
    for &(u, v) in &g.edges {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    write("edges.tsv", edges)?;

    let mut feats = String::new();
    for v in 0..g.n {
        write!(feats, "{v}").unwrap();
        for c in 0..g.feat_dim() {
            write!(feats, "\t{}", g.features.get(v, c)).unwrap();
        }
        feats.push('\n');
    }
    write("features.tsv", feats)?;

    let mut labels = String::new();
    for v in 0..g.n {
        writeln!(labels, "{v}\t{}", g.labels[v]).unwrap();
    }
    write("labels.tsv", labels)?;

    let mut splits = String::new();
    for v in 0..g.n {
        let s = match g.splits[v] {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => continue,
        };
        writeln!(splits, "{v}\t{s}").unwrap();
    }
    write("splits.tsv", splits)?;

    if let Some(ws) = &g.edge_weights {
        let mut out = String::new();
        for (&(u, v), &w) in g.edges.iter().zip(ws.iter()) {
            writeln!(out, "{u}\t{v}\t{w}").unwrap();
        }
        write("adjacency_weights.tsv", out)?;
    }
    Ok(())
}
