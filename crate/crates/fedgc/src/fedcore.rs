//! The federation protocol: typed messages with a deterministic transcript,
//! class-count reporting, per-class client gradients, class-weighted server
//! aggregation, additive-masking secure sums for the one-step neighbor
//! exchange, FedAvg self-training with pseudo-labeling, and the LDP baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graphstore::{class_subgraph, ClientSubgraph, Split};
use crate::models::{forward, masked_ce, Arch, ModelParams};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("secure sum range exceeded: |value| {0} too large for modulus")]
    Range(f64),
    #[error("invalid parameter: {0}")]
    Param(String),
}

pub type Result<T> = std::result::Result<T, FedError>;

/// Training-node count per class for one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts {
    pub counts: Vec<usize>,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    ClassCounts,
    PerClassGrads,
    ModelParams,
    MaskedVectors,
    PseudoLabelAck,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::ClassCounts => "class_counts",
            MessageKind::PerClassGrads => "per_class_grads",
            MessageKind::ModelParams => "model_params",
            MessageKind::MaskedVectors => "masked_vectors",
            MessageKind::PseudoLabelAck => "pseudo_label_ack",
        }
    }
}

/// One transcript record: round, sender, kind, 64-bit payload digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptRecord {
    pub round: usize,
    pub sender: usize,
    pub kind: MessageKind,
    pub digest: u64,
}

/// Deterministic message transcript; digests cover the payload bits.
#[derive(Debug, Default, Clone)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

pub fn digest_f64s<'a>(chunks: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for chunk in chunks {
        for v in chunk {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

pub fn digest_usizes(vals: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in vals {
        for b in (*v as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

impl Transcript {
    pub fn push(&mut self, round: usize, sender: usize, kind: MessageKind, digest: u64) {
        self.records.push(TranscriptRecord {
            round,
            sender,
            kind,
            digest,
        });
    }

    /// Newline-delimited log: round, sender, kind, hex digest.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{:016x}",
                r.round,
                r.sender,
                r.kind.name(),
                r.digest
            )
            .unwrap();
        }
        out
    }

    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.render().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// One client's working state: subgraph view, current feature rows (raw X or
/// transformed Z), one-step cross-client sums, and the degree-consistent
/// normalized local adjacency block.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub sub: ClientSubgraph,
    pub features: Tensor,
    pub cross_sums: Option<Tensor>,
    pub local_adj: Tensor,
}

/// Normalized local adjacency block using global self-loop-augmented degrees
/// (each client knows its own nodes' total degree, cross edges included).
pub fn local_block_adj(sub: &ClientSubgraph, tilde_deg: &[f64]) -> Tensor {
    let n = sub.len();
    let mut adj = Tensor::zeros(n, n);
    for &(u, v) in &sub.internal_edges {
        let w = 1.0 / (tilde_deg[u] * tilde_deg[v]).sqrt();
        let (lu, lv) = (sub.index_of[&u], sub.index_of[&v]);
        adj.set(lu, lv, w);
        adj.set(lv, lu, w);
    }
    for (lv, &v) in sub.nodes.iter().enumerate() {
        adj.set(lv, lv, 1.0 / tilde_deg[v]);
    }
    adj
}

pub fn report_class_counts(
    sub: &ClientSubgraph,
    labels: &[usize],
    labeled: &[bool],
    num_classes: usize,
) -> ClassCounts {
    let mut counts = vec![0usize; num_classes];
    for &v in &sub.nodes {
        if labeled[v] {
            counts[labels[v]] += 1;
        }
    }
    ClassCounts { counts }
}

/// Gradients of the masked per-class cross-entropy on the client's sampled
/// class subgraphs, w.r.t. every tensor in the broadcast parameters. Classes
/// with no labeled node on this client are omitted.
pub fn client_per_class_grads(
    client: &ClientState,
    labels: &[usize],
    labeled: &[bool],
    theta: &ModelParams,
    classes: &[usize],
) -> Result<BTreeMap<usize, Vec<Tensor>>> {
    let mut out = BTreeMap::new();
    for &c in classes {
        let sample = match class_subgraph(&client.sub, c, labels, labeled) {
            Some(s) => s,
            None => continue,
        };
        let n = sample.nodes.len();
        let adj = crate::graphstore::normalize_adj(&sample.local_edges, n, 1.0).matrix;
        let mut x = Tensor::zeros(n, client.features.cols());
        for (r, &g) in sample.nodes.iter().enumerate() {
            let lr = client.sub.index_of[&g];
            for col in 0..client.features.cols() {
                x.set(r, col, client.features.get(lr, col));
            }
        }
        let cross = client.cross_sums.as_ref().map(|cs| {
            let mut m = Tensor::zeros(n, cs.cols());
            for (r, &g) in sample.nodes.iter().enumerate() {
                let lr = client.sub.index_of[&g];
                for col in 0..cs.cols() {
                    m.set(r, col, cs.get(lr, col));
                }
            }
            m
        });
        let sample_labels: Vec<usize> = sample.nodes.iter().map(|&v| labels[v]).collect();

        let mut tape = Tape::new();
        let w = theta.leaves(&mut tape);
        let a = tape.constant(adj);
        let xi = tape.constant(x);
        let cs = cross.map(|m| tape.constant(m));
        let logits = forward(&mut tape, theta.arch, &w, a, xi, cs).map_err(|e| {
            FedError::Protocol(format!("gradient shape mismatch vs broadcast params: {e}"))
        })?;
        let loss = masked_ce(&mut tape, logits, &sample_labels, &sample.loss_mask)?;
        let grads = tape.grad_values(loss, &w)?;
        out.insert(c, grads);
    }
    Ok(out)
}

/// Class-weighted aggregation with exact rational weights n_j(c)/n(c).
pub fn aggregate_weighted(
    per_client: &[BTreeMap<usize, Vec<Tensor>>],
    counts: &[ClassCounts],
    c: usize,
) -> Result<Vec<Tensor>> {
    let n_c: usize = counts.iter().map(|cc| cc.counts[c]).sum();
    if n_c == 0 {
        return Err(FedError::Protocol(format!(
            "aggregate_weighted reached with n({c}) = 0; class should be skipped upstream"
        )));
    }
    // exactness check before any floating division
    debug_assert_eq!(counts.iter().map(|cc| cc.counts[c]).sum::<usize>(), n_c);
    let weights = class_weights(counts, c);
    let mut acc: Option<Vec<Tensor>> = None;
    for ((j, client), grads) in counts.iter().enumerate().zip(per_client) {
        let n_jc = client.counts[c];
        if n_jc == 0 {
            continue;
        }
        let g = grads.get(&c).ok_or_else(|| {
            FedError::Protocol(format!("client reported n_j({c})={n_jc} but sent no gradient"))
        })?;
        let w = weights[j];
        match &mut acc {
            None => {
                acc = Some(g.iter().map(|t| t.map(|v| v * w)).collect());
            }
            Some(sum) => {
                for (s, t) in sum.iter_mut().zip(g) {
                    if s.shape() != t.shape() {
                        return Err(FedError::Protocol(format!(
                            "gradient shape mismatch across clients: {:?} vs {:?}",
                            s.shape(),
                            t.shape()
                        )));
                    }
                    for (sv, tv) in s.data_mut().iter_mut().zip(t.data()) {
                        *sv += w * tv;
                    }
                }
            }
        }
    }
    acc.ok_or_else(|| FedError::Protocol(format!("no gradients for class {c}")))
}

/// Aggregation weights n_j(c)/n(c). The largest contributor absorbs the
/// rounding residual so the weights sum to 1.0 exactly in f64; simple
/// two-client ratios like 3:1 still come out as the exact 0.75/0.25.
pub fn class_weights(counts: &[ClassCounts], c: usize) -> Vec<f64> {
    let n_c: usize = counts.iter().map(|cc| cc.counts[c]).sum();
    let mut weights = vec![0.0; counts.len()];
    if n_c == 0 {
        return weights;
    }
    let big = (0..counts.len())
        .filter(|&j| counts[j].counts[c] > 0)
        .max_by_key(|&j| (counts[j].counts[c], std::cmp::Reverse(j)))
        .expect("n_c > 0 implies a contributor");
    let mut sum_others = 0.0;
    for (j, cc) in counts.iter().enumerate() {
        if j != big && cc.counts[c] > 0 {
            let w = cc.counts[c] as f64 / n_c as f64;
            weights[j] = w;
            sum_others += w;
        }
    }
    weights[big] = 1.0 - sum_others;
    weights
}

const MASK_BITS: u32 = 62;
const MODULUS: u64 = 1 << MASK_BITS;

/// Pairwise additive-masking secure aggregation over Z_{2^62} with
/// fixed-point encoding. Masks cancel exactly: mask(i->j) + mask(j->i) = 0.
#[derive(Debug, Clone)]
pub struct SecureSumSession {
    pub participants: Vec<usize>,
    pub seed: u64,
    pub scale_bits: u32,
}

impl SecureSumSession {
    pub fn new(participants: Vec<usize>, seed: u64) -> Self {
        SecureSumSession {
            participants,
            seed,
            scale_bits: 20,
        }
    }

    pub fn with_scale_bits(mut self, bits: u32) -> Self {
        self.scale_bits = bits;
        self
    }

    fn pair_rng(&self, a: usize, b: usize) -> ChaCha8Rng {
        let (lo, hi) = (a.min(b) as u64, a.max(b) as u64);
        let mixed = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(lo.wrapping_mul(0x2545f4914f6cdd1d))
            .wrapping_add(hi.wrapping_mul(0x27220a95));
        ChaCha8Rng::seed_from_u64(mixed)
    }

    fn encode(&self, x: f64) -> Result<u64> {
        let scale = (1u64 << self.scale_bits) as f64;
        let q = (x * scale).round();
        if q.abs() >= (MODULUS / 2) as f64 {
            return Err(FedError::Range(x));
        }
        let qi = q as i64;
        Ok((qi as u64) & (MODULUS - 1))
    }

    fn decode(&self, r: u64) -> f64 {
        let centered = if r >= MODULUS / 2 {
            r as i64 - MODULUS as i64
        } else {
            r as i64
        };
        centered as f64 / (1u64 << self.scale_bits) as f64
    }

    /// A participant's masked contribution (what the server would observe).
    pub fn masked_contribution(&self, who: usize, values: &[f64]) -> Result<Vec<u64>> {
        if !self.participants.contains(&who) {
            return Err(FedError::Protocol(format!("unknown participant {who}")));
        }
        let mut out = Vec::with_capacity(values.len());
        let mut rngs: Vec<(bool, ChaCha8Rng)> = self
            .participants
            .iter()
            .filter(|&&p| p != who)
            .map(|&p| (who < p, self.pair_rng(who, p)))
            .collect();
        for &v in values {
            let mut acc = self.encode(v)?;
            for (positive, rng) in rngs.iter_mut() {
                let m = rng.next_u64() & (MODULUS - 1);
                let m = if *positive { m } else { MODULUS - m };
                acc = (acc + m) & (MODULUS - 1);
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Server-side sum of masked contributions. Every participant must be
    /// present (pairwise masks would not cancel otherwise).
    pub fn secure_sum(&self, contributions: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
        let mut senders: Vec<usize> = contributions.iter().map(|(p, _)| *p).collect();
        senders.sort_unstable();
        let mut expected = self.participants.clone();
        expected.sort_unstable();
        if senders != expected {
            return Err(FedError::Protocol(format!(
                "participant set mismatch: expected {expected:?}, got {senders:?}"
            )));
        }
        let len = contributions
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| FedError::Protocol("empty session".into()))?;
        if contributions.iter().any(|(_, v)| v.len() != len) {
            return Err(FedError::Protocol("unequal contribution lengths".into()));
        }
        let mut acc = vec![0u64; len];
        for (who, values) in contributions {
            let masked = self.masked_contribution(*who, values)?;
            for (a, m) in acc.iter_mut().zip(masked) {
                *a = (*a + m) & (MODULUS - 1);
            }
        }
        Ok(acc.into_iter().map(|r| self.decode(r)).collect())
    }
}

/// One-step communication: for every client i and local node v,
/// cross_sums[v] = sum over cross-neighbors u of A_{vu} x_u, aggregated via
/// secure sums so no client observes another's individual features.
///
/// Uses a 2^40 fixed-point scale so the reconstruction identity against the
/// global dense product holds to ~1e-12.
pub fn neighbor_exchange(
    clients: &[ClientSubgraph],
    feats_per_client: &[Tensor],
    tilde_deg: &[f64],
    seed: u64,
    transcript: Option<&mut Transcript>,
) -> Result<Vec<Tensor>> {
    let m = clients.len();
    let d = feats_per_client.first().map_or(0, |f| f.cols());
    let mut out = Vec::with_capacity(m);
    let mut log: Vec<TranscriptRecord> = Vec::new();
    for target in clients.iter() {
        let rows = target.len();
        if m == 1 {
            out.push(Tensor::zeros(rows, d));
            continue;
        }
        let others: Vec<usize> = (0..m).filter(|&j| j != target.client_id).collect();
        let session = SecureSumSession::new(others.clone(), seed ^ (target.client_id as u64))
            .with_scale_bits(40);
        let mut contributions = Vec::with_capacity(others.len());
        for &j in &others {
            let src = &clients[j];
            let feats = &feats_per_client[j];
            let mut vec = vec![0.0f64; rows * d];
            // cross edges are mirrored, so the source client sees (u, v) with
            // u local to it and v local to the target
            for &(u, v) in &src.cross_edges {
                if let Some(&target_row) = target.index_of.get(&v) {
                    let w = 1.0 / (tilde_deg[u] * tilde_deg[v]).sqrt();
                    let lu = src.index_of[&u];
                    for col in 0..d {
                        vec[target_row * d + col] += w * feats.get(lu, col);
                    }
                }
            }
            log.push(TranscriptRecord {
                round: 0,
                sender: j,
                kind: MessageKind::MaskedVectors,
                digest: digest_f64s([vec.as_slice()]),
            });
            contributions.push((j, vec));
        }
        let summed = session.secure_sum(&contributions)?;
        out.push(Tensor::new(rows, d, summed));
    }
    if let Some(t) = transcript {
        for r in log {
            t.records.push(r);
        }
    }
    Ok(out)
}

/// Output of federated self-training.
#[derive(Debug, Clone)]
pub struct SelfTrainOutput {
    pub phi_st: ModelParams,
    /// Global label vector: true train labels preserved, other nodes pseudo-labeled.
    pub labels_aug: Vec<usize>,
    /// Marks every node carrying a usable (true or pseudo) label.
    pub labeled: Vec<bool>,
    pub best_val_acc: f64,
    /// True when no validation nodes existed and the final-round model was kept.
    pub val_fallback: bool,
}

/// FedAvg training of a shared GCN: per round, each client takes one local
/// full-batch step and the server averages the updated parameters weighted by
/// train-node counts. The best-validation model is retained and then used to
/// pseudo-label every non-train node.
#[allow(clippy::too_many_arguments)]
pub fn fedavg_self_train(
    clients: &[ClientState],
    labels: &[usize],
    splits: &[Split],
    hidden: usize,
    num_classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
    transcript: Option<&mut Transcript>,
) -> Result<SelfTrainOutput> {
    let d = clients
        .first()
        .map(|c| c.features.cols())
        .ok_or_else(|| FedError::Param("no clients".into()))?;
    let arch = Arch::Gcn2 {
        input: d,
        hidden,
        classes: num_classes,
    };
    let mut phi = ModelParams::init(arch, seed);
    let train_mask: Vec<bool> = splits.iter().map(|&s| s == Split::Train).collect();
    let val_mask: Vec<bool> = splits.iter().map(|&s| s == Split::Val).collect();
    let weights: Vec<f64> = {
        let counts: Vec<usize> = clients
            .iter()
            .map(|c| c.sub.nodes.iter().filter(|&&v| train_mask[v]).count())
            .collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(FedError::Param("no training nodes anywhere".into()));
        }
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };

    let mut best: Option<(f64, ModelParams)> = None;
    let mut any_val = false;
    let mut log: Vec<TranscriptRecord> = Vec::new();
    for round in 0..epochs {
        // clients in ascending id order; parallel execution would merge in the
        // same order so the transcript is unchanged
        let mut avg_update = phi.zeros_like();
        for (j, client) in clients.iter().enumerate() {
            if weights[j] == 0.0 {
                continue;
            }
            let local_labels: Vec<usize> =
                client.sub.nodes.iter().map(|&v| labels[v]).collect();
            let local_train: Vec<bool> =
                client.sub.nodes.iter().map(|&v| train_mask[v]).collect();
            if !local_train.iter().any(|&b| b) {
                continue;
            }
            let mut tape = Tape::new();
            let w = phi.leaves(&mut tape);
            let a = tape.constant(client.local_adj.clone());
            let x = tape.constant(client.features.clone());
            let cs = client.cross_sums.as_ref().map(|c| tape.constant(c.clone()));
            let logits = forward(&mut tape, arch, &w, a, x, cs)?;
            let loss = masked_ce(&mut tape, logits, &local_labels, &local_train)?;
            let grads = tape.grad_values(loss, &w)?;
            log.push(TranscriptRecord {
                round,
                sender: j,
                kind: MessageKind::ModelParams,
                digest: digest_f64s(grads.iter().map(|g| g.data())),
            });
            for (acc, g) in avg_update.iter_mut().zip(&grads) {
                for (av, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                    *av += weights[j] * gv;
                }
            }
        }
        phi.step(&avg_update, lr);

        // global validation accuracy from local posteriors
        let (mut correct, mut total) = (0usize, 0usize);
        for client in clients {
            let local_val: Vec<usize> = client
                .sub
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, &v)| val_mask[v])
                .map(|(i, _)| i)
                .collect();
            if local_val.is_empty() {
                continue;
            }
            let logits = crate::models::eval_logits(
                &phi,
                &client.local_adj,
                &client.features,
                client.cross_sums.as_ref(),
            )?;
            for &lv in &local_val {
                let v = client.sub.nodes[lv];
                let pred = argmax_row(&logits, lv);
                if pred == labels[v] {
                    correct += 1;
                }
                total += 1;
            }
        }
        if total > 0 {
            any_val = true;
            let acc = correct as f64 / total as f64;
            let better = best.as_ref().map_or(true, |(b, _)| acc > *b);
            if better {
                best = Some((acc, phi.clone()));
            }
        }
    }

    let (best_val_acc, phi_st, val_fallback) = match best {
        Some((acc, p)) if any_val => (acc, p, false),
        _ => (0.0, phi, true),
    };

    // pseudo-label every non-train node locally; true labels never overwritten
    let n = labels.len();
    let mut labels_aug = labels.to_vec();
    let mut labeled = train_mask.clone();
    for client in clients {
        let logits = crate::models::eval_logits(
            &phi_st,
            &client.local_adj,
            &client.features,
            client.cross_sums.as_ref(),
        )?;
        for (lv, &v) in client.sub.nodes.iter().enumerate() {
            if !train_mask[v] {
                labels_aug[v] = argmax_row(&logits, lv);
                labeled[v] = true;
            }
        }
    }
    debug_assert_eq!(labels_aug.len(), n);
    if let Some(t) = transcript {
        for r in log {
            t.records.push(r);
        }
    }
    Ok(SelfTrainOutput {
        phi_st,
        labels_aug,
        labeled,
        best_val_acc,
        val_fallback,
    })
}

pub fn argmax_row(m: &Tensor, row: usize) -> usize {
    let mut best = 0;
    for c in 1..m.cols() {
        if m.get(row, c) > m.get(row, best) {
            best = c;
        }
    }
    best
}

/// LDP defense: clip each class's gradient stack to L1 norm `sensitivity`,
/// then add Laplace(0, sensitivity/epsilon) noise per entry.
pub fn ldp_noise(
    grads: &BTreeMap<usize, Vec<Tensor>>,
    epsilon: f64,
    sensitivity: f64,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<Tensor>>> {
    if epsilon <= 0.0 {
        return Err(FedError::Param("epsilon must be positive".into()));
    }
    let b = sensitivity / epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (&c, tensors) in grads {
        let l1: f64 = tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v.abs())
            .sum();
        let scale = if l1 > sensitivity { sensitivity / l1 } else { 1.0 };
        let noised: Vec<Tensor> = tensors
            .iter()
            .map(|t| {
                let (r, cl) = t.shape();
                let data = t
                    .data()
                    .iter()
                    .map(|v| v * scale + laplace_sample(&mut rng, b))
                    .collect();
                Tensor::new(r, cl, data)
            })
            .collect();
        out.insert(c, noised);
    }
    Ok(out)
}

/// Laplace sample with scale b (exposed for the moment-check tests).
pub fn laplace_sample(rng: &mut ChaCha8Rng, b: f64) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}
