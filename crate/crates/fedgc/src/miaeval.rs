//! Membership-inference attack harness: shadow split construction, shadow
//! GCN + posterior-feature attack MLP training, probing a target model with
//! attacker-visible (optionally rewired) neighborhoods, and the rank-based
//! AUC / accuracy metrics.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fedcore::{argmax_row, digest_f64s};
use crate::graphstore::{normalize_adj, GraphBundle, Split};
use crate::models::{forward, masked_ce, softmax_rows, Arch, ModelParams};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MiaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("insufficient shadow pool: need {need}, have {have}")]
    Pool { need: usize, have: usize },
}

pub type Result<T> = std::result::Result<T, MiaError>;

/// Rank-based (Mann-Whitney) AUC with ties counted 0.5.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MiaError::Param("both classes required for AUC".into()));
    }
    let mut wins = 0.0f64;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            wins += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos * neg) as f64)
}

/// Fraction of masked rows whose argmax matches the label; argmax ties break
/// to the lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let total = mask.iter().filter(|&&b| b).count();
    if total == 0 {
        return Err(MiaError::Param("empty accuracy mask".into()));
    }
    let correct = mask
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .filter(|(i, _)| argmax_row(logits, *i) == labels[*i])
        .count();
    Ok(correct as f64 / total as f64)
}

/// Two equal-size disjoint node sets drawn from outside the target's train
/// and test masks, with their induced edge sets (local indexing).
#[derive(Debug, Clone)]
pub struct ShadowSplit {
    pub train_nodes: Vec<usize>,
    pub out_nodes: Vec<usize>,
    pub train_edges: Vec<(usize, usize)>,
    pub out_edges: Vec<(usize, usize)>,
}

/// Edges of `g` restricted to `nodes`, reindexed to positions within `nodes`.
pub fn induced_edges(g: &GraphBundle, nodes: &[usize]) -> Vec<(usize, usize)> {
    let index: std::collections::BTreeMap<usize, usize> =
        nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    g.edges
        .iter()
        .filter_map(|&(u, v)| match (index.get(&u), index.get(&v)) {
            (Some(&lu), Some(&lv)) => Some((lu.min(lv), lu.max(lv))),
            _ => None,
        })
        .collect()
}

pub fn build_shadow(g: &GraphBundle, size: usize, seed: u64) -> Result<ShadowSplit> {
    let mut pool: Vec<usize> = (0..g.n)
        .filter(|&v| g.splits[v] != Split::Train && g.splits[v] != Split::Test)
        .collect();
    if pool.len() < 2 * size {
        return Err(MiaError::Pool {
            need: 2 * size,
            have: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let train_nodes: Vec<usize> = pool[..size].to_vec();
    let out_nodes: Vec<usize> = pool[size..2 * size].to_vec();
    let train_edges = induced_edges(g, &train_nodes);
    let out_edges = induced_edges(g, &out_nodes);
    Ok(ShadowSplit {
        train_nodes,
        out_nodes,
        train_edges,
        out_edges,
    })
}

/// Shadow GCN plus the 3-layer posterior-feature attack MLP.
#[derive(Debug, Clone)]
pub struct AttackModel {
    pub shadow: ModelParams,
    /// weights: C x h, h x h, h x 2 (member logit at column 1)
    pub attack: Vec<Tensor>,
}

pub fn attack_forward(tape: &mut Tape, weights: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h = tape.matmul(x, weights[0])?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, weights[1])?;
    let h = tape.relu(h)?;
    Ok(tape.matmul(h, weights[2])?)
}

fn init_attack(classes: usize, hidden: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |r: usize, c: usize| {
        let bound = 1.0 / (r as f64).sqrt();
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect())
    };
    vec![
        layer(classes, hidden),
        layer(hidden, hidden),
        layer(hidden, 2),
    ]
}

/// Sorted posterior row for one node presented with a star neighborhood
/// (attacker-visible 1-hop view) under the given model.
pub fn probe_posterior(
    model: &ModelParams,
    g: &GraphBundle,
    v: usize,
    nbrs: &[usize],
) -> Result<Tensor> {
    let nodes: Vec<usize> = std::iter::once(v).chain(nbrs.iter().copied()).collect();
    let edges: Vec<(usize, usize)> = (1..nodes.len()).map(|i| (0, i)).collect();
    let adj = normalize_adj(&edges, nodes.len(), 1.0).matrix;
    let mut x = Tensor::zeros(nodes.len(), g.feat_dim());
    for (r, &u) in nodes.iter().enumerate() {
        for c in 0..g.feat_dim() {
            x.set(r, c, g.features.get(u, c));
        }
    }
    let logits = crate::models::eval_logits(model, &adj, &x, None)?;
    let feats = sorted_posteriors(&logits);
    Ok(Tensor::new(
        1,
        feats.cols(),
        (0..feats.cols()).map(|c| feats.get(0, c)).collect(),
    ))
}

/// Posterior rows sorted descending (class-permutation invariant features).
pub fn sorted_posteriors(logits: &Tensor) -> Tensor {
    let p = softmax_rows(logits);
    let (n, c) = p.shape();
    let mut out = Tensor::zeros(n, c);
    for r in 0..n {
        let mut row: Vec<f64> = (0..c).map(|j| p.get(r, j)).collect();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (j, v) in row.into_iter().enumerate() {
            out.set(r, j, v);
        }
    }
    out
}

fn train_gcn_full(
    g_feats: &Tensor,
    adj: &Tensor,
    labels: &[usize],
    hidden: usize,
    classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    let arch = Arch::Gcn2 {
        input: g_feats.cols(),
        hidden,
        classes,
    };
    let mut params = ModelParams::init(arch, seed);
    let mask = vec![true; labels.len()];
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let w = params.leaves(&mut tape);
        let a = tape.constant(adj.clone());
        let x = tape.constant(g_feats.clone());
        let logits = forward(&mut tape, arch, &w, a, x, None)?;
        let loss = masked_ce(&mut tape, logits, labels, &mask)?;
        let grads = tape.grad_values(loss, &w)?;
        params.step(&grads, lr);
    }
    Ok(params)
}

/// Binary CE training of the attack MLP on sorted posterior feature rows.
fn train_attack(
    features: &Tensor,
    member: &[bool],
    hidden: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut weights = init_attack(features.cols(), hidden, seed);
    let labels: Vec<usize> = member.iter().map(|&m| m as usize).collect();
    let mask = vec![true; labels.len()];
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let w: Vec<NodeId> = weights.iter().map(|t| tape.leaf(t.clone())).collect();
        let x = tape.constant(features.clone());
        let logits = attack_forward(&mut tape, &w, x)?;
        let loss = masked_ce(&mut tape, logits, &labels, &mask)?;
        let grads = tape.grad_values(loss, &w)?;
        for (t, g) in weights.iter_mut().zip(&grads) {
            for (tv, gv) in t.data_mut().iter_mut().zip(g.data()) {
                *tv -= lr * gv;
            }
        }
    }
    Ok(weights)
}

/// Train the shadow GCN on the shadow-train induced subgraph, then the attack
/// MLP on member/non-member sorted posteriors. Classes missing from the
/// shadow-train set are tolerated (training proceeds on what is present).
/// How attack probes view a node: its full star neighborhood, a star with
/// randomly rewired endpoints, or the node alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeView {
    Star,
    StarRewired,
    SelfOnly,
}

pub fn train_shadow_and_attack(
    g: &GraphBundle,
    split: &ShadowSplit,
    hidden: usize,
    epochs: usize,
    view: ProbeView,
    seed: u64,
) -> Result<AttackModel> {
    if split.train_nodes.is_empty() {
        return Err(MiaError::Param("empty shadow split".into()));
    }
    let gather = |nodes: &[usize]| -> (Tensor, Vec<usize>) {
        let mut x = Tensor::zeros(nodes.len(), g.feat_dim());
        for (r, &v) in nodes.iter().enumerate() {
            for c in 0..g.feat_dim() {
                x.set(r, c, g.features.get(v, c));
            }
        }
        (x, nodes.iter().map(|&v| g.labels[v]).collect())
    };
    let (x_tr, y_tr) = gather(&split.train_nodes);
    let adj_tr = normalize_adj(&split.train_edges, split.train_nodes.len(), 1.0).matrix;
    let shadow = train_gcn_full(&x_tr, &adj_tr, &y_tr, hidden, g.num_classes, epochs, 0.5, seed)?;

    // attack-training posteriors are produced through the same probe path as
    // run_attack (star neighborhoods) so their distribution matches what the
    // attack model will see at evaluation time
    let neigh = g.adjacency_list();
    let probe = |nodes: &[usize]| -> Result<Tensor> {
        let mut out = Tensor::zeros(nodes.len(), g.num_classes);
        for (r, &v) in nodes.iter().enumerate() {
            let nbrs: &[usize] = if view == ProbeView::SelfOnly { &[] } else { &neigh[v] };
            let p = probe_posterior(&shadow, g, v, nbrs)?;
            for c in 0..g.num_classes {
                out.set(r, c, p.get(0, c));
            }
        }
        Ok(out)
    };
    let p_tr = probe(&split.train_nodes)?;
    let p_out = probe(&split.out_nodes)?;
    let rows = p_tr.rows() + p_out.rows();
    let mut feats = Tensor::zeros(rows, g.num_classes);
    let mut member = Vec::with_capacity(rows);
    for r in 0..p_tr.rows() {
        for c in 0..g.num_classes {
            feats.set(r, c, p_tr.get(r, c));
        }
        member.push(true);
    }
    for r in 0..p_out.rows() {
        for c in 0..g.num_classes {
            feats.set(p_tr.rows() + r, c, p_out.get(r, c));
        }
        member.push(false);
    }
    let attack = train_attack(&feats, &member, 16, 300, 0.5, seed ^ 0xa77)?;
    Ok(AttackModel { shadow, attack })
}

/// Attack score in [0,1] for each row of sorted posterior features.
pub fn attack_scores(model: &AttackModel, feats: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w: Vec<NodeId> = model.attack.iter().map(|t| tape.constant(t.clone())).collect();
    let x = tape.constant(feats.clone());
    let logits = attack_forward(&mut tape, &w, x)?;
    let p = softmax_rows(tape.value(logits));
    Ok((0..p.rows()).map(|r| p.get(r, 1)).collect())
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub scores: Vec<f64>,
    pub member_labels: Vec<bool>,
    pub auc: f64,
    pub config_digest: u64,
}

/// Probe the target model: each probe node is presented with its 1-hop
/// attacker-visible neighborhood (a star graph), optionally degree-preserving
/// rewired with probability 0.5 per edge to model inexact structure
/// knowledge. Scores come from the attack MLP on the node's sorted posterior.
#[allow(clippy::too_many_arguments)]
pub fn run_attack(
    model: &AttackModel,
    target: &ModelParams,
    g: &GraphBundle,
    members: &[usize],
    nonmembers: &[usize],
    view: ProbeView,
    seed: u64,
) -> Result<AttackReport> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(MiaError::Param("empty member or nonmember set".into()));
    }
    let neigh = g.adjacency_list();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (set, is_member) in [(members, true), (nonmembers, false)] {
        for &v in set {
            let mut nbrs: Vec<usize> = if view == ProbeView::SelfOnly {
                Vec::new()
            } else {
                neigh[v].clone()
            };
            if view == ProbeView::StarRewired {
                for u in nbrs.iter_mut() {
                    if rng.gen_bool(0.5) {
                        // degree-preserving: endpoint swapped for a random node
                        let mut alt = rng.gen_range(0..g.n);
                        while alt == v {
                            alt = rng.gen_range(0..g.n);
                        }
                        *u = alt;
                    }
                }
            }
            let row = probe_posterior(target, g, v, &nbrs)?;
            scores.push(attack_scores(model, &row)?[0]);
            labels.push(is_member);
        }
    }
    let auc_v = auc(&scores, &labels)?;
    let config_digest = digest_f64s([scores.as_slice(), [seed as f64].as_slice()]);
    Ok(AttackReport {
        scores,
        member_labels: labels,
        auc: auc_v,
        config_digest,
    })
}
