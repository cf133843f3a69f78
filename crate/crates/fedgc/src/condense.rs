//! Server-side condensed-graph state and the gradient-matching loop: fixed
//! synthetic labels, learnable features X' and adjacency-generator Phi,
//! matching distances, second-order updates of (X', Phi), and the evolving
//! reference model theta.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::fedcore::ClassCounts;
use crate::graphstore::{apportion, GraphBundle, Split};
use crate::models::{
    forward, masked_ce, normalize_dense_taped, synth_adjacency, Arch, ModelParams,
};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("non-finite matching loss at epoch {epoch}, class {class}")]
    NonFinite { epoch: usize, class: usize },
}

pub type Result<T> = std::result::Result<T, CondenseError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    Mse,
    Cosine,
}

/// Gradient-matching schedule and step sizes.
#[derive(Debug, Clone)]
pub struct MatchConfig {
    pub distance: Distance,
    pub epochs: usize,
    /// theta refresh period: re-initialize every `refresh` outer epochs.
    pub refresh: usize,
    /// alternation: tau1 epochs updating X', then tau2 epochs updating Phi.
    pub tau1: usize,
    pub tau2: usize,
    pub lr_x: f64,
    pub lr_phi: f64,
    pub lr_theta: f64,
    pub ratio: f64,
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refresh < 1 {
            return Err(CondenseError::Param("refresh period must be >= 1".into()));
        }
        if self.tau1 < 1 || self.tau2 < 1 {
            return Err(CondenseError::Param("tau1 and tau2 must be >= 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CondenseError::Param("ratio must be in (0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            distance: Distance::Mse,
            epochs: 120,
            refresh: 20,
            tau1: 10,
            tau2: 1,
            lr_x: 0.05,
            lr_phi: 0.01,
            lr_theta: 0.3,
            ratio: 0.04,
        }
    }
}

/// The condensed graph under optimization. `labels` never change after
/// synthesis; X' and Phi carry adaptive step-size accumulators.
#[derive(Debug, Clone)]
pub struct CondensedState {
    pub x: Tensor,
    pub phi: ModelParams,
    pub labels: Vec<usize>,
    pub acc_x: Tensor,
    pub acc_phi: Vec<Tensor>,
    pub epoch: usize,
}

/// Fixed condensed labels: round(r*N) nodes apportioned over the labeled-node
/// class distribution by largest remainder, with every present class given at
/// least one node. Returns (labels ascending by class, whether the node count
/// had to be raised to the class count).
pub fn synthesize_labels(counts: &ClassCounts, n_total: usize, r: f64) -> Result<(Vec<usize>, bool)> {
    let total: usize = counts.total();
    if total == 0 {
        return Err(CondenseError::Param("no labeled nodes".into()));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(CondenseError::Param("ratio must be in (0, 1]".into()));
    }
    let present: Vec<usize> = (0..counts.counts.len())
        .filter(|&c| counts.counts[c] > 0)
        .collect();
    let mut n_prime = (r * n_total as f64).round() as usize;
    let mut raised = false;
    if n_prime < present.len() {
        n_prime = present.len();
        raised = true;
    }
    let props: Vec<f64> = counts
        .counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    let mut per_class = apportion(n_prime, &props);
    // every present class gets at least one node; take seats from the largest
    loop {
        let needy = present.iter().copied().find(|&c| per_class[c] == 0);
        let Some(c) = needy else { break };
        let donor = (0..per_class.len())
            .max_by_key(|&d| per_class[d])
            .unwrap();
        per_class[donor] -= 1;
        per_class[c] += 1;
    }
    let mut labels = Vec::with_capacity(n_prime);
    for (c, &k) in per_class.iter().enumerate() {
        labels.extend(std::iter::repeat(c).take(k));
    }
    debug_assert_eq!(labels.len(), n_prime);
    Ok((labels, raised))
}

/// Fresh condensed state: X' entries i.i.d. N(0, 0.1 sd), Phi fan-in init.
pub fn init_condensed(labels: Vec<usize>, d: usize, hidden: usize, seed: u64) -> Result<CondensedState> {
    let n = labels.len();
    init_condensed_with(labels, Tensor::zeros(n, d), hidden, seed)
}

/// Condensed state anchored at a warm start (e.g. per-class feature means):
/// X' = x0 + i.i.d. N(0, 0.1 sd) symmetry-breaking noise.
pub fn init_condensed_with(
    labels: Vec<usize>,
    x0: Tensor,
    hidden: usize,
    seed: u64,
) -> Result<CondensedState> {
    let d = x0.cols();
    if d == 0 {
        return Err(CondenseError::Param("feature dim must be >= 1".into()));
    }
    let n = labels.len();
    if x0.rows() != n {
        return Err(CondenseError::Param(format!(
            "warm start has {} rows for {} condensed nodes",
            x0.rows(),
            n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).unwrap();
    let x = Tensor::new(
        n,
        d,
        x0.data().iter().map(|v| v + normal.sample(&mut rng)).collect(),
    );
    let phi = ModelParams::init(
        Arch::AdjGen {
            input: d,
            hidden,
        },
        seed ^ 0x9e37,
    );
    let acc_phi = phi.weights.iter().map(|w| {
        let (r, c) = w.shape();
        Tensor::zeros(r, c)
    }).collect();
    Ok(CondensedState {
        acc_x: Tensor::zeros(n, d),
        x,
        phi,
        labels,
        acc_phi,
        epoch: 0,
    })
}

/// Matching distance between two shape-aligned gradient lists, on the tape.
pub fn match_distance(
    tape: &mut Tape,
    a: &[NodeId],
    b: &[NodeId],
    kind: Distance,
) -> std::result::Result<NodeId, TensorError> {
    let mut total: Option<NodeId> = None;
    let add = |tape: &mut Tape, t: NodeId, total: &mut Option<NodeId>| {
        *total = Some(match *total {
            None => t,
            Some(acc) => tape.add(acc, t).unwrap(),
        });
    };
    for (&ga, &gb) in a.iter().zip(b) {
        match kind {
            Distance::Mse => {
                let diff = tape.sub(ga, gb)?;
                let sq = tape.square(diff)?;
                let m = tape.mean(sq)?;
                add(tape, m, &mut total);
            }
            Distance::Cosine => {
                let cols = tape.value(ga).cols();
                for j in 0..cols {
                    let ca = tape.slice_cols(ga, j, j + 1)?;
                    let cb = tape.slice_cols(gb, j, j + 1)?;
                    let prod = tape.mul_elem(ca, cb)?;
                    let dot = tape.sum(prod)?;
                    // norms floored smoothly: sqrt(sum sq + 1e-24) >= 1e-12
                    let floor = tape.constant(Tensor::scalar(1e-24));
                    let sa = tape.square(ca)?;
                    let ssa = tape.sum(sa)?;
                    let ssa = tape.add(ssa, floor)?;
                    let na = tape.sqrt(ssa)?;
                    let sb = tape.square(cb)?;
                    let ssb = tape.sum(sb)?;
                    let ssb = tape.add(ssb, floor)?;
                    let nb = tape.sqrt(ssb)?;
                    let denom = tape.mul_elem(na, nb)?;
                    let inv = tape.recip(denom)?;
                    let cos = tape.mul_elem(dot, inv)?;
                    let one = tape.constant(Tensor::scalar(1.0));
                    let term = tape.sub(one, cos)?;
                    add(tape, term, &mut total);
                }
            }
        }
    }
    total.ok_or_else(|| TensorError::Invalid("empty gradient lists".into()))
}

fn class_masks(labels: &[usize]) -> BTreeMap<usize, Vec<bool>> {
    let mut out: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for &c in labels {
        out.entry(c)
            .or_insert_with(|| vec![false; labels.len()]);
    }
    for (&c, mask) in out.iter_mut() {
        for (i, &l) in labels.iter().enumerate() {
            mask[i] = l == c;
        }
    }
    out
}

/// One gradient-matching step. Builds A' from Phi and X', differentiates the
/// per-class cross-entropy on the condensed graph w.r.t. theta *as tape
/// nodes*, measures the distance to the aggregated client gradients, and
/// takes one adaptive step on X' or Phi depending on the alternation
/// schedule. Returns the matching loss.
pub fn condensation_round(
    state: &mut CondensedState,
    agg: &BTreeMap<usize, Vec<Tensor>>,
    theta: &ModelParams,
    cfg: &MatchConfig,
) -> Result<f64> {
    cfg.validate()?;
    let update_x = state.epoch % (cfg.tau1 + cfg.tau2) < cfg.tau1;
    let mut tape = Tape::new();
    let x = tape.leaf(state.x.clone());
    let phi: Vec<NodeId> = state
        .phi
        .weights
        .iter()
        .map(|w| tape.leaf(w.clone()))
        .collect();
    let theta_nodes: Vec<NodeId> = theta
        .weights
        .iter()
        .map(|w| tape.leaf(w.clone()))
        .collect();
    let a_raw = synth_adjacency(&mut tape, &phi, x)?;
    let adj = normalize_dense_taped(&mut tape, a_raw)?;
    let logits = forward(&mut tape, theta.arch, &theta_nodes, adj, x, None)?;

    let masks = class_masks(&state.labels);
    let mut total: Option<NodeId> = None;
    for (&c, mask) in &masks {
        let Some(agg_c) = agg.get(&c) else {
            return Err(CondenseError::Param(format!(
                "missing aggregated gradients for class {c}"
            )));
        };
        let loss_c = masked_ce(&mut tape, logits, &state.labels, mask)?;
        let grads_c = tape.backward(loss_c, &theta_nodes)?;
        let agg_nodes: Vec<NodeId> = agg_c.iter().map(|t| tape.constant(t.clone())).collect();
        let dist = match match_distance(&mut tape, &agg_nodes, &grads_c, cfg.distance) {
            Ok(d) => d,
            Err(TensorError::NonFinite { .. }) => {
                return Err(CondenseError::NonFinite {
                    epoch: state.epoch,
                    class: c,
                })
            }
            Err(e) => return Err(e.into()),
        };
        total = Some(match total {
            None => dist,
            Some(acc) => tape.add(acc, dist)?,
        });
    }
    let total = total.ok_or_else(|| CondenseError::Param("no classes to match".into()))?;
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(CondenseError::NonFinite {
            epoch: state.epoch,
            class: *masks.keys().next().unwrap(),
        });
    }

    if update_x {
        let g = tape.grad_values(total, &[x])?.remove(0);
        adagrad_step(&mut state.x, &mut state.acc_x, &g, cfg.lr_x);
    } else {
        let grads = tape.grad_values(total, &phi)?;
        for ((w, acc), g) in state
            .phi
            .weights
            .iter_mut()
            .zip(&mut state.acc_phi)
            .zip(&grads)
        {
            adagrad_step(w, acc, g, cfg.lr_phi);
        }
    }
    state.epoch += 1;
    Ok(loss)
}

fn adagrad_step(param: &mut Tensor, acc: &mut Tensor, grad: &Tensor, lr: f64) {
    for ((p, a), g) in param
        .data_mut()
        .iter_mut()
        .zip(acc.data_mut())
        .zip(grad.data())
    {
        *a += g * g;
        *p -= lr * g / (a.sqrt() + 1e-8);
    }
}

/// The current normalized condensed adjacency, as plain values.
pub fn condensed_adjacency(state: &CondensedState) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(state.x.clone());
    let phi: Vec<NodeId> = state
        .phi
        .weights
        .iter()
        .map(|w| tape.constant(w.clone()))
        .collect();
    let a = synth_adjacency(&mut tape, &phi, x)?;
    let adj = normalize_dense_taped(&mut tape, a)?;
    Ok(tape.value(adj).clone())
}

/// The raw (unnormalized) condensed adjacency A' in [0,1], symmetric.
pub fn raw_adjacency(state: &CondensedState) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(state.x.clone());
    let phi: Vec<NodeId> = state
        .phi
        .weights
        .iter()
        .map(|w| tape.constant(w.clone()))
        .collect();
    let a = synth_adjacency(&mut tape, &phi, x)?;
    Ok(tape.value(a).clone())
}

/// Train theta on the current condensed graph for `steps` full-batch CE
/// steps. The adjacency is frozen at the current (Phi, X').
pub fn evolve_theta(
    theta: &mut ModelParams,
    state: &CondensedState,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let adj = condensed_adjacency(state)?;
    let mask = vec![true; state.labels.len()];
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let w = theta.leaves(&mut tape);
        let a = tape.constant(adj.clone());
        let x = tape.constant(state.x.clone());
        let logits = forward(&mut tape, theta.arch, &w, a, x, None)?;
        let loss = masked_ce(&mut tape, logits, &state.labels, &mask)?;
        losses.push(tape.value(loss).item());
        let grads = tape.grad_values(loss, &w)?;
        theta.step(&grads, lr);
    }
    Ok(losses)
}

/// Export the condensed graph as a weighted bundle: entries of A' below the
/// threshold are dropped, the rest become weighted edges, every node is a
/// training node. Self-loops are implicit (added back at normalization).
pub fn materialize(state: &CondensedState, threshold: f64) -> Result<GraphBundle> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(CondenseError::Param("threshold must be in [0, 1)".into()));
    }
    let a = raw_adjacency(state)?;
    let n = state.labels.len();
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let w = a.get(i, j);
            if w >= threshold && w > 0.0 {
                edges.push((i, j));
                weights.push(w);
            }
        }
    }
    let num_classes = state.labels.iter().max().map_or(1, |&c| c + 1);
    Ok(GraphBundle {
        n,
        edges,
        features: state.x.clone(),
        labels: state.labels.clone(),
        num_classes,
        splits: vec![Split::Train; n],
        edge_weights: Some(weights),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff;

    fn counts(v: &[usize]) -> ClassCounts {
        ClassCounts { counts: v.to_vec() }
    }

    #[test]
    fn labels_uniform_two_class() {
        let (y, raised) = synthesize_labels(&counts(&[50, 50]), 200, 0.05).unwrap();
        assert_eq!(y.len(), 10);
        assert_eq!(y.iter().filter(|&&c| c == 0).count(), 5);
        assert!(!raised);
    }

    #[test]
    fn labels_largest_remainder_hand_case() {
        // counts [3,1], N' = 3 -> quotas [2.25, 0.75] -> [2, 1]
        let (y, _) = synthesize_labels(&counts(&[3, 1]), 100, 0.03).unwrap();
        assert_eq!(y, vec![0, 0, 1]);
    }

    #[test]
    fn labels_cora_like_seventy() {
        // N = 2708, r = 2.6% -> 70 nodes
        let c = counts(&[20, 20, 20, 20, 20, 20, 20]);
        let (y, raised) = synthesize_labels(&c, 2708, 0.026).unwrap();
        assert_eq!(y.len(), 70);
        assert_eq!(y.iter().filter(|&&l| l == 0).count(), 10);
        assert!(!raised);
    }

    #[test]
    fn labels_every_present_class_gets_one() {
        let (y, _) = synthesize_labels(&counts(&[997, 1, 1, 1]), 1000, 0.004).unwrap();
        for c in 0..4 {
            assert!(y.contains(&c), "class {c} missing from {y:?}");
        }
        assert_eq!(y.len(), 4);
    }

    #[test]
    fn labels_raised_when_too_few_seats() {
        let (y, raised) = synthesize_labels(&counts(&[5, 5, 5]), 100, 0.01).unwrap();
        assert!(raised);
        assert_eq!(y, vec![0, 1, 2]);
        assert!(synthesize_labels(&counts(&[0, 0]), 10, 0.5).is_err());
        assert!(synthesize_labels(&counts(&[5]), 10, 0.0).is_err());
    }

    #[test]
    fn init_deterministic_and_variance() {
        let y: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let a = init_condensed(y.clone(), 64, 8, 3).unwrap();
        let b = init_condensed(y.clone(), 64, 8, 3).unwrap();
        assert_eq!(a.x, b.x);
        let c = init_condensed(y.clone(), 64, 8, 4).unwrap();
        assert_ne!(a.x, c.x);
        // 200*64 = 12800 >= 10^4 entries: sample variance near 0.01
        let n = a.x.data().len() as f64;
        let mean: f64 = a.x.data().iter().sum::<f64>() / n;
        let var: f64 = a.x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - 0.01).abs() / 0.01 < 0.1, "variance {var}");
    }

    #[test]
    fn distance_identical_is_zero() {
        let t = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        for kind in [Distance::Mse, Distance::Cosine] {
            let mut tape = Tape::new();
            let a = tape.constant(t.clone());
            let b = tape.constant(t.clone());
            let d = match_distance(&mut tape, &[a], &[b], kind).unwrap();
            assert!(tape.value(d).item().abs() < 1e-12);
        }
    }

    #[test]
    fn distance_cosine_orthogonal_and_opposite() {
        let u = Tensor::from_rows(&[vec![1.0], vec![0.0]]);
        let v = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
        let mut tape = Tape::new();
        let a = tape.constant(u.clone());
        let b = tape.constant(v);
        let d = match_distance(&mut tape, &[a], &[b], Distance::Cosine).unwrap();
        assert!((tape.value(d).item() - 1.0).abs() < 1e-9);

        let neg = u.map(|x| -x);
        let mut tape = Tape::new();
        let a = tape.constant(u);
        let b = tape.constant(neg);
        let d = match_distance(&mut tape, &[a], &[b], Distance::Cosine).unwrap();
        assert!((tape.value(d).item() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn distance_mse_hand_value() {
        // mean squared diff: ((1)^2 + (2)^2)/2 = 2.5
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let b = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let mut tape = Tape::new();
        let na = tape.constant(a);
        let nb = tape.constant(b);
        let d = match_distance(&mut tape, &[na], &[nb], Distance::Mse).unwrap();
        assert!((tape.value(d).item() - 2.5).abs() < 1e-12);
    }

    fn tiny_setup(seed: u64) -> (CondensedState, ModelParams, MatchConfig) {
        let (y, _) = synthesize_labels(&counts(&[2, 2]), 100, 0.04).unwrap();
        let state = init_condensed(y, 3, 4, seed).unwrap();
        let theta = ModelParams::init(
            Arch::Gcn2 { input: 3, hidden: 5, classes: 2 },
            seed + 1,
        );
        let cfg = MatchConfig {
            epochs: 50,
            ..MatchConfig::default()
        };
        (state, theta, cfg)
    }

    /// Server-side per-class grads on the current G', as plain values.
    fn self_grads(state: &CondensedState, theta: &ModelParams) -> BTreeMap<usize, Vec<Tensor>> {
        let mut out = BTreeMap::new();
        let adj = condensed_adjacency(state).unwrap();
        for (c, mask) in class_masks(&state.labels) {
            let mut tape = Tape::new();
            let w = theta.leaves(&mut tape);
            let a = tape.constant(adj.clone());
            let x = tape.constant(state.x.clone());
            let logits = forward(&mut tape, theta.arch, &w, a, x, None).unwrap();
            let loss = masked_ce(&mut tape, logits, &state.labels, &mask).unwrap();
            out.insert(c, tape.grad_values(loss, &w).unwrap());
        }
        out
    }

    #[test]
    fn matching_own_grads_is_zero_loss_and_no_update() {
        let (mut state, theta, cfg) = tiny_setup(0);
        let agg = self_grads(&state, &theta);
        let x_before = state.x.clone();
        let loss = condensation_round(&mut state, &agg, &theta, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(state.x, x_before);
    }

    #[test]
    fn round_rejects_missing_class() {
        let (mut state, theta, cfg) = tiny_setup(1);
        let mut agg = self_grads(&state, &theta);
        agg.remove(&1);
        assert!(condensation_round(&mut state, &agg, &theta, &cfg).is_err());
    }

    #[test]
    fn loss_gradient_wrt_x_matches_finite_diff() {
        // second-order check on N'=4: d(matching loss)/dX' vs central differences
        let (state, theta, cfg) = tiny_setup(2);
        let agg: BTreeMap<usize, Vec<Tensor>> = {
            // fixed target grads from a perturbed state so the loss is nonzero
            let (other, _, _) = tiny_setup(9);
            self_grads(&other, &theta)
        };
        let mut loss_at = |xv: &Tensor| -> crate::tensor::Result<f64> {
            let mut s = state.clone();
            s.x = xv.clone();
            let mut tape = Tape::new();
            let x = tape.leaf(s.x.clone());
            let phi: Vec<NodeId> = s.phi.weights.iter().map(|w| tape.constant(w.clone())).collect();
            let th: Vec<NodeId> = theta.weights.iter().map(|w| tape.leaf(w.clone())).collect();
            let a_raw = synth_adjacency(&mut tape, &phi, x).unwrap();
            let adj = normalize_dense_taped(&mut tape, a_raw).unwrap();
            let logits = forward(&mut tape, theta.arch, &th, adj, x, None).unwrap();
            let mut total = None;
            for (c, mask) in class_masks(&s.labels) {
                let lc = masked_ce(&mut tape, logits, &s.labels, &mask).unwrap();
                let gc = tape.backward(lc, &th).unwrap();
                let an: Vec<NodeId> = agg[&c].iter().map(|t| tape.constant(t.clone())).collect();
                let d = match_distance(&mut tape, &an, &gc, cfg.distance).unwrap();
                total = Some(match total {
                    None => d,
                    Some(acc) => tape.add(acc, d).unwrap(),
                });
            }
            Ok(tape.value(total.unwrap()).item())
        };
        // analytic gradient
        let analytic = {
            let mut tape = Tape::new();
            let x = tape.leaf(state.x.clone());
            let phi: Vec<NodeId> = state.phi.weights.iter().map(|w| tape.constant(w.clone())).collect();
            let th: Vec<NodeId> = theta.weights.iter().map(|w| tape.leaf(w.clone())).collect();
            let a_raw = synth_adjacency(&mut tape, &phi, x).unwrap();
            let adj = normalize_dense_taped(&mut tape, a_raw).unwrap();
            let logits = forward(&mut tape, theta.arch, &th, adj, x, None).unwrap();
            let mut total = None;
            for (c, mask) in class_masks(&state.labels) {
                let lc = masked_ce(&mut tape, logits, &state.labels, &mask).unwrap();
                let gc = tape.backward(lc, &th).unwrap();
                let an: Vec<NodeId> = agg[&c].iter().map(|t| tape.constant(t.clone())).collect();
                let d = match_distance(&mut tape, &an, &gc, cfg.distance).unwrap();
                total = Some(match total {
                    None => d,
                    Some(acc) => tape.add(acc, d).unwrap(),
                });
            }
            tape.grad_values(total.unwrap(), &[x]).unwrap().remove(0)
        };
        let numeric = finite_diff(&mut loss_at, &state.x, 1e-4).unwrap();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            num += (a - n) * (a - n);
            den += n * n;
        }
        let rel = (num / den.max(1e-30)).sqrt();
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn loss_decreases_on_fixed_target() {
        let (mut state, theta, cfg) = tiny_setup(3);
        let agg = {
            let (other, _, _) = tiny_setup(7);
            self_grads(&other, &theta)
        };
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(condensation_round(&mut state, &agg, &theta, &cfg).unwrap());
        }
        let improving = losses.windows(2).filter(|w| w[1] <= w[0] + 1e-12).count();
        assert!(
            improving * 10 >= losses.len() * 8,
            "only {improving}/{} non-increasing steps; losses {losses:?}",
            losses.len() - 1
        );
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn evolve_theta_zero_steps_noop_and_ce_decreases() {
        let (state, mut theta, _) = tiny_setup(4);
        let before = theta.checksum();
        assert!(evolve_theta(&mut theta, &state, 0, 0.1).unwrap().is_empty());
        assert_eq!(theta.checksum(), before);
        let losses = evolve_theta(&mut theta, &state, 20, 0.3).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn adjacency_symmetric_unit_interval_after_updates() {
        let (mut state, theta, cfg) = tiny_setup(5);
        let agg = {
            let (other, _, _) = tiny_setup(8);
            self_grads(&other, &theta)
        };
        for _ in 0..12 {
            condensation_round(&mut state, &agg, &theta, &cfg).unwrap();
        }
        let a = raw_adjacency(&state).unwrap();
        let n = state.labels.len();
        for i in 0..n {
            for j in 0..n {
                let v = a.get(i, j);
                assert!(v > 0.0 && v < 1.0);
                assert_eq!(v.to_bits(), a.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn materialize_thresholds() {
        let (state, _, _) = tiny_setup(6);
        let dense = materialize(&state, 0.0).unwrap();
        let n = state.labels.len();
        assert_eq!(dense.edges.len(), n * (n - 1) / 2);
        assert!(dense.splits.iter().all(|&s| s == Split::Train));
        assert_eq!(dense.labels, state.labels);

        let a = raw_adjacency(&state).unwrap();
        let max_off = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j))
            .fold(0.0f64, f64::max);
        let high = materialize(&state, (max_off + (1.0 - max_off) / 2.0).min(0.999)).unwrap();
        assert!(high.edges.is_empty());
        assert!(materialize(&state, 1.0).is_err());
        assert!(materialize(&state, -0.1).is_err());
    }

    #[test]
    fn labels_immutable_through_rounds() {
        let (mut state, theta, cfg) = tiny_setup(10);
        let y = state.labels.clone();
        let agg = self_grads(&state, &theta);
        for _ in 0..5 {
            condensation_round(&mut state, &agg, &theta, &cfg).unwrap();
        }
        assert_eq!(state.labels, y);
    }
}
