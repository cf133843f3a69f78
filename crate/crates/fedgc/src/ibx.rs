//! Local graph transformation with a variational information bottleneck:
//! each client learns a feature encoder producing stochastic latents Z whose
//! classification head is the frozen self-trained GCN, trading utility
//! against a KL penalty toward a standard-normal prior.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::fedcore::{argmax_row, ClientState};
use crate::models::{eval_logits, gcn_forward, masked_ce, ModelParams};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum IbError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid parameter: {0}")]
    Param(String),
}

pub type Result<T> = std::result::Result<T, IbError>;

const SIGMA_FLOOR: f64 = 1e-6;

/// Per-node encoder h = relu(x W1) W2 with W1: d x d and W2: d x 2d; the 2d
/// output splits into the Gaussian mean and pre-softplus scale.
#[derive(Debug, Clone)]
pub struct IbEncoder {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl IbEncoder {
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::new(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        };
        IbEncoder {
            w1: uniform(d, d, d),
            w2: uniform(d, 2 * d, d),
        }
    }
}

/// Standard-normal noise matrix for the reparameterization trick.
pub fn sample_eps(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )
}

/// Taped latent statistics.
pub struct Latents {
    pub z: NodeId,
    pub mu: NodeId,
    pub sigma: NodeId,
}

fn encoder_h(tape: &mut Tape, w1: NodeId, w2: NodeId, x: NodeId) -> std::result::Result<NodeId, TensorError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.relu(h)?;
    tape.matmul(h, w2)
}

/// One aggregation hop of per-node encodings, reparameterized sample.
/// `cross_x` holds degree-weighted cross-client feature sums exchanged once in
/// x-space; they are mapped through the current encoder locally, which
/// approximates h-space aggregation across cuts.
pub fn encode(
    tape: &mut Tape,
    w1: NodeId,
    w2: NodeId,
    adj: NodeId,
    x: NodeId,
    cross_x: Option<NodeId>,
    eps: &Tensor,
) -> Result<Latents> {
    let d = tape.value(x).cols();
    let h = encoder_h(tape, w1, w2, x)?;
    let mut zhat = tape.matmul(adj, h)?;
    if let Some(cx) = cross_x {
        let ch = encoder_h(tape, w1, w2, cx)?;
        zhat = tape.add(zhat, ch)?;
    }
    let mu = tape.slice_cols(zhat, 0, d)?;
    let pre = tape.slice_cols(zhat, d, 2 * d)?;
    let sp = tape.softplus(pre)?;
    let floor = {
        let (r, c) = tape.value(sp).shape();
        tape.constant(Tensor::new(r, c, vec![SIGMA_FLOOR; r * c]))
    };
    let sigma = tape.add(sp, floor)?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul_elem(sigma, e)?;
    let z = tape.add(mu, noise)?;
    Ok(Latents { z, mu, sigma })
}

/// Mean over nodes of 0.5 * sum_dim (mu^2 + sigma^2 - ln sigma^2 - 1).
pub fn kl_std_normal(tape: &mut Tape, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    let (n, d) = tape.value(mu).shape();
    let mu2 = tape.square(mu)?;
    let s2 = tape.square(sigma)?;
    let ln_s2 = tape.log(s2)?;
    let t = tape.add(mu2, s2)?;
    let t = tape.sub(t, ln_s2)?;
    let total = tape.sum(t)?;
    let ones_term = tape.constant(Tensor::scalar((n * d) as f64));
    let total = tape.sub(total, ones_term)?;
    Ok(tape.scalar_mul(total, 0.5 / n as f64)?)
}

/// L1 + gamma * L2: masked cross-entropy of the frozen GCN head on Z, plus
/// the KL regularizer. Gradients flow only into the encoder (phi enters as
/// constants).
#[allow(clippy::too_many_arguments)]
pub fn ib_loss(
    tape: &mut Tape,
    w1: NodeId,
    w2: NodeId,
    phi: &ModelParams,
    adj: NodeId,
    x: NodeId,
    cross_x: Option<NodeId>,
    labels: &[usize],
    loss_mask: &[bool],
    gamma: f64,
    eps: &Tensor,
) -> Result<NodeId> {
    if gamma < 0.0 {
        return Err(IbError::Param("gamma must be >= 0".into()));
    }
    let lat = encode(tape, w1, w2, adj, x, cross_x, eps)?;
    let phi_nodes = phi.constants(tape);
    let logits = gcn_forward(tape, &phi_nodes, adj, lat.z, None)?;
    let l1 = masked_ce(tape, logits, labels, loss_mask)?;
    if gamma == 0.0 {
        return Ok(l1);
    }
    let l2 = kl_std_normal(tape, lat.mu, lat.sigma)?;
    let l2g = tape.scalar_mul(l2, gamma)?;
    Ok(tape.add(l1, l2g)?)
}

#[derive(Debug, Clone)]
pub struct TransformOutput {
    pub z: Tensor,
    pub encoder: IbEncoder,
    pub best_val_acc: f64,
    /// True when no local validation nodes existed and the final-epoch Z was kept.
    pub val_fallback: bool,
    pub final_kl: f64,
}

/// Train the encoder locally and return the best-validation latent features.
/// The head phi is never updated; the client's structure is untouched (only
/// feature rows are replaced downstream).
#[allow(clippy::too_many_arguments)]
pub fn transform_graph(
    client: &ClientState,
    phi_st: &ModelParams,
    labels_aug: &[usize],
    labeled: &[bool],
    val_mask: &[bool],
    gamma: f64,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TransformOutput> {
    let d = client.features.cols();
    let n = client.sub.len();
    let mut enc = IbEncoder::init(d, seed);
    let local_labels: Vec<usize> = client.sub.nodes.iter().map(|&v| labels_aug[v]).collect();
    let local_mask: Vec<bool> = client.sub.nodes.iter().map(|&v| labeled[v]).collect();
    if !local_mask.iter().any(|&b| b) {
        return Err(IbError::Param("no labeled nodes on client".into()));
    }
    let local_val: Vec<usize> = client
        .sub
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, &v)| val_mask[v])
        .map(|(i, _)| i)
        .collect();

    let sample_z = |enc: &IbEncoder, eps: &Tensor| -> Result<(Tensor, f64)> {
        let mut tape = Tape::new();
        let w1 = tape.constant(enc.w1.clone());
        let w2 = tape.constant(enc.w2.clone());
        let adj = tape.constant(client.local_adj.clone());
        let x = tape.constant(client.features.clone());
        let cx = client.cross_sums.as_ref().map(|c| tape.constant(c.clone()));
        let lat = encode(&mut tape, w1, w2, adj, x, cx, eps)?;
        let kl = kl_std_normal(&mut tape, lat.mu, lat.sigma)?;
        Ok((tape.value(lat.z).clone(), tape.value(kl).item()))
    };

    let mut best: Option<(f64, Tensor)> = None;
    let mut final_z;
    let mut final_kl;
    {
        let eps = sample_eps(n, d, seed ^ 0xe95);
        let (z, kl) = sample_z(&enc, &eps)?;
        final_z = z;
        final_kl = kl;
    }
    for epoch in 0..epochs {
        let eps = sample_eps(n, d, seed ^ 0xe95 ^ ((epoch as u64 + 1) << 17));
        let mut tape = Tape::new();
        let w1 = tape.leaf(enc.w1.clone());
        let w2 = tape.leaf(enc.w2.clone());
        let adj = tape.constant(client.local_adj.clone());
        let x = tape.constant(client.features.clone());
        let cx = client.cross_sums.as_ref().map(|c| tape.constant(c.clone()));
        let loss = ib_loss(
            &mut tape, w1, w2, phi_st, adj, x, cx, &local_labels, &local_mask, gamma, &eps,
        )?;
        let grads = tape.grad_values(loss, &[w1, w2])?;
        for (w, g) in [&mut enc.w1, &mut enc.w2].into_iter().zip(&grads) {
            for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                *wv -= lr * gv;
            }
        }

        let (z, kl) = sample_z(&enc, &eps)?;
        final_kl = kl;
        if !local_val.is_empty() {
            let logits = eval_logits(phi_st, &client.local_adj, &z, None)?;
            let correct = local_val
                .iter()
                .filter(|&&lv| argmax_row(&logits, lv) == local_labels[lv])
                .count();
            let acc = correct as f64 / local_val.len() as f64;
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, z.clone()));
            }
        }
        final_z = z;
    }

    let (z, best_val_acc, val_fallback) = match best {
        Some((acc, z)) => (z, acc, false),
        None => (final_z, 0.0, true),
    };
    Ok(TransformOutput {
        z,
        encoder: enc,
        best_val_acc,
        val_fallback,
        final_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedcore::{local_block_adj, neighbor_exchange};
    use crate::graphstore::{dirichlet_partition, sbm_generate, GraphBundle, Split};
    use crate::models::{forward, Arch};
    use crate::tensor::finite_diff;

    fn latents_for(mu_v: &Tensor, sigma_v: &Tensor) -> (Tape, NodeId, NodeId) {
        let mut tape = Tape::new();
        let mu = tape.constant(mu_v.clone());
        let sigma = tape.constant(sigma_v.clone());
        (tape, mu, sigma)
    }

    #[test]
    fn kl_closed_forms() {
        let (mut tape, mu, sigma) = latents_for(&Tensor::zeros(3, 2), &Tensor::ones(3, 2));
        let kl = kl_std_normal(&mut tape, mu, sigma).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);

        let (mut tape, mu, sigma) = latents_for(&Tensor::ones(1, 1), &Tensor::ones(1, 1));
        let kl = kl_std_normal(&mut tape, mu, sigma).unwrap();
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mu_v = Tensor::new(2, 3, (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let s_v = Tensor::new(2, 3, (0..6).map(|_| rng.gen_range(0.05..3.0)).collect());
            let (mut tape, mu, sigma) = latents_for(&mu_v, &s_v);
            let kl = kl_std_normal(&mut tape, mu, sigma).unwrap();
            assert!(tape.value(kl).item() >= -1e-12);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // KL(N(mu, sigma^2) || N(0,1)) per scalar, averaged per the closed
        // form; MC with 10^6 total draws should land within 2%
        let mu_v = Tensor::from_rows(&[vec![0.7, -0.3], vec![1.1, 0.2]]);
        let s_v = Tensor::from_rows(&[vec![0.6, 1.4], vec![0.9, 0.5]]);
        let (mut tape, mu, sigma) = latents_for(&mu_v, &s_v);
        let kl = kl_std_normal(&mut tape, mu, sigma).unwrap();
        let analytic = tape.value(kl).item();

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let per_scalar = 250_000; // 4 scalars * 250k = 1e6 draws
        let mut total = 0.0;
        for i in 0..4 {
            let (m, s) = (mu_v.data()[i], s_v.data()[i]);
            let mut acc = 0.0;
            for _ in 0..per_scalar {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = m + s * e;
                // ln p(z) - ln q(z)
                let lp = -0.5 * ((z - m) / s).powi(2) - s.ln();
                let lq = -0.5 * z * z;
                acc += lp - lq;
            }
            total += acc / per_scalar as f64;
        }
        let mc = total / 2.0; // mean over the 2 nodes
        assert!(
            (mc - analytic).abs() / analytic.abs() < 0.02,
            "mc {mc} vs analytic {analytic}"
        );
    }

    fn tiny_client(seed: u64) -> (GraphBundle, ClientState) {
        let g = sbm_generate(2, 8, 0.4, 0.1, 3, 1.0, seed).unwrap();
        let clients = dirichlet_partition(&g, 1, 1.0, seed).unwrap();
        let deg = g.tilde_degrees();
        let sub = clients.into_iter().next().unwrap();
        let features = sub.gather_rows(&g.features);
        let local_adj = local_block_adj(&sub, &deg);
        (
            g,
            ClientState {
                sub,
                features,
                cross_sums: None,
                local_adj,
            },
        )
    }

    #[test]
    fn encode_deterministic_and_floor() {
        let (_, client) = tiny_client(0);
        let enc = IbEncoder::init(3, 1);
        let eps = sample_eps(client.sub.len(), 3, 5);
        let run = || {
            let mut tape = Tape::new();
            let w1 = tape.constant(enc.w1.clone());
            let w2 = tape.constant(enc.w2.clone());
            let adj = tape.constant(client.local_adj.clone());
            let x = tape.constant(client.features.clone());
            let lat = encode(&mut tape, w1, w2, adj, x, None, &eps).unwrap();
            (
                tape.value(lat.z).clone(),
                tape.value(lat.mu).clone(),
                tape.value(lat.sigma).clone(),
            )
        };
        let (z1, _, s1) = run();
        let (z2, _, _) = run();
        assert_eq!(z1, z2);
        assert!(s1.data().iter().all(|&s| s >= SIGMA_FLOOR));

        // encoder with hugely negative sigma-half weights: softplus ~ 0, so
        // z collapses to mu up to the floor
        let mut enc2 = enc.clone();
        for c in 3..6 {
            for r in 0..3 {
                enc2.w2.set(r, c, -1e3);
            }
        }
        let mut tape = Tape::new();
        let w1 = tape.constant(enc2.w1.clone());
        let w2 = tape.constant(enc2.w2.clone());
        let adj = tape.constant(client.local_adj.clone());
        let x = tape.constant(client.features.clone());
        let lat = encode(&mut tape, w1, w2, adj, x, None, &eps).unwrap();
        let z = tape.value(lat.z);
        let mu = tape.value(lat.mu);
        for (i, (zv, mv)) in z.data().iter().zip(mu.data()).enumerate() {
            assert!((zv - mv).abs() <= 2.0 * SIGMA_FLOOR * eps.data()[i].abs() + 1e-12);
        }
    }

    #[test]
    fn reparameterization_mean_matches_mu() {
        let (_, client) = tiny_client(1);
        let enc = IbEncoder::init(3, 2);
        let n = client.sub.len();
        let resamples = 10_000;
        let mut mean = Tensor::zeros(n, 3);
        let mut mu_v = Tensor::zeros(n, 3);
        let mut sigma_v = Tensor::zeros(n, 3);
        for k in 0..resamples {
            let eps = sample_eps(n, 3, 1000 + k as u64);
            let mut tape = Tape::new();
            let w1 = tape.constant(enc.w1.clone());
            let w2 = tape.constant(enc.w2.clone());
            let adj = tape.constant(client.local_adj.clone());
            let x = tape.constant(client.features.clone());
            let lat = encode(&mut tape, w1, w2, adj, x, None, &eps).unwrap();
            for (m, z) in mean.data_mut().iter_mut().zip(tape.value(lat.z).data()) {
                *m += z / resamples as f64;
            }
            if k == 0 {
                mu_v = tape.value(lat.mu).clone();
                sigma_v = tape.value(lat.sigma).clone();
            }
        }
        // 4-sigma per entry: 48 simultaneous comparisons at 3 sigma would
        // fail ~12% of the time by chance
        for ((m, mu), s) in mean.data().iter().zip(mu_v.data()).zip(sigma_v.data()) {
            assert!(
                (m - mu).abs() <= 4.0 * s / (resamples as f64).sqrt(),
                "{m} vs {mu} (sigma {s})"
            );
        }
    }

    #[test]
    fn gamma_zero_is_pure_ce() {
        let (g, client) = tiny_client(3);
        let enc = IbEncoder::init(3, 4);
        let phi = ModelParams::init(Arch::Gcn2 { input: 3, hidden: 6, classes: 2 }, 5);
        let eps = sample_eps(client.sub.len(), 3, 6);
        let labels: Vec<usize> = client.sub.nodes.iter().map(|&v| g.labels[v]).collect();
        let mask = vec![true; client.sub.len()];

        let mut tape = Tape::new();
        let w1 = tape.constant(enc.w1.clone());
        let w2 = tape.constant(enc.w2.clone());
        let adj = tape.constant(client.local_adj.clone());
        let x = tape.constant(client.features.clone());
        let loss =
            ib_loss(&mut tape, w1, w2, &phi, adj, x, None, &labels, &mask, 0.0, &eps).unwrap();
        let got = tape.value(loss).item();

        // CE computed independently on the sampled Z
        let mut tape2 = Tape::new();
        let w1 = tape2.constant(enc.w1.clone());
        let w2 = tape2.constant(enc.w2.clone());
        let adj = tape2.constant(client.local_adj.clone());
        let x = tape2.constant(client.features.clone());
        let lat = encode(&mut tape2, w1, w2, adj, x, None, &eps).unwrap();
        let z = tape2.value(lat.z).clone();
        let mut tape3 = Tape::new();
        let w = phi.constants(&mut tape3);
        let a3 = tape3.constant(client.local_adj.clone());
        let z3 = tape3.constant(z);
        let logits = forward(&mut tape3, phi.arch, &w, a3, z3, None).unwrap();
        let ce = masked_ce(&mut tape3, logits, &labels, &mask).unwrap();
        assert!((got - tape3.value(ce).item()).abs() < 1e-12);

        assert!(ib_loss(
            &mut Tape::new(),
            w1, w2, &phi, adj, x, None, &labels, &mask, -0.1, &eps
        )
        .is_err());
    }

    #[test]
    fn ib_loss_gradcheck_w1() {
        let (g, client) = tiny_client(4);
        let enc = IbEncoder::init(3, 7);
        let phi = ModelParams::init(Arch::Gcn2 { input: 3, hidden: 4, classes: 2 }, 8);
        let eps = sample_eps(client.sub.len(), 3, 9);
        let labels: Vec<usize> = client.sub.nodes.iter().map(|&v| g.labels[v]).collect();
        let mask = vec![true; client.sub.len()];

        let loss_of = |w1_v: &Tensor| -> crate::tensor::Result<f64> {
            let mut tape = Tape::new();
            let w1 = tape.constant(w1_v.clone());
            let w2 = tape.constant(enc.w2.clone());
            let adj = tape.constant(client.local_adj.clone());
            let x = tape.constant(client.features.clone());
            let l = ib_loss(&mut tape, w1, w2, &phi, adj, x, None, &labels, &mask, 0.1, &eps)
                .map_err(|_| TensorError::Invalid("ib".into()))?;
            Ok(tape.value(l).item())
        };
        let analytic = {
            let mut tape = Tape::new();
            let w1 = tape.leaf(enc.w1.clone());
            let w2 = tape.constant(enc.w2.clone());
            let adj = tape.constant(client.local_adj.clone());
            let x = tape.constant(client.features.clone());
            let l = ib_loss(&mut tape, w1, w2, &phi, adj, x, None, &labels, &mask, 0.1, &eps)
                .unwrap();
            tape.grad_values(l, &[w1]).unwrap().remove(0)
        };
        let mut f = loss_of;
        let numeric = finite_diff(&mut f, &enc.w1, 1e-5).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            num += (a - n) * (a - n);
            den += n * n;
        }
        let rel = (num / den.max(1e-30)).sqrt();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    fn full_setup(seed: u64) -> (GraphBundle, Vec<ClientState>) {
        let g = sbm_generate(3, 30, 0.3, 0.02, 5, 2.0, seed).unwrap();
        let clients = dirichlet_partition(&g, 2, 1.0, seed + 30).unwrap();
        let deg = g.tilde_degrees();
        let feats: Vec<Tensor> = clients.iter().map(|c| c.gather_rows(&g.features)).collect();
        let cross = neighbor_exchange(&clients, &feats, &deg, 7, None).unwrap();
        let states = clients
            .into_iter()
            .zip(feats)
            .zip(cross)
            .map(|((sub, features), cs)| {
                let local_adj = local_block_adj(&sub, &deg);
                ClientState { sub, features, cross_sums: Some(cs), local_adj }
            })
            .collect();
        (g, states)
    }

    #[test]
    fn transform_zero_epochs_and_phi_frozen() {
        let (g, states) = full_setup(0);
        let phi = ModelParams::init(Arch::Gcn2 { input: 5, hidden: 8, classes: 3 }, 2);
        let checksum = phi.checksum();
        let labeled = vec![true; g.n];
        let val = g.mask(Split::Val);
        let out0 = transform_graph(&states[0], &phi, &g.labels, &labeled, &val, 0.1, 0, 0.05, 3)
            .unwrap();
        assert_eq!(out0.z.shape(), states[0].features.shape());
        assert!(out0.val_fallback); // no epochs -> no validation pass happened

        let out = transform_graph(&states[0], &phi, &g.labels, &labeled, &val, 0.1, 8, 0.05, 3)
            .unwrap();
        assert_eq!(phi.checksum(), checksum);
        assert_eq!(out.z.shape(), states[0].features.shape());
        // deterministic per seed
        let again = transform_graph(&states[0], &phi, &g.labels, &labeled, &val, 0.1, 8, 0.05, 3)
            .unwrap();
        assert_eq!(out.z, again.z);

        // no validation nodes anywhere -> fallback flagged
        let noval = vec![false; g.n];
        let fb = transform_graph(&states[0], &phi, &g.labels, &labeled, &noval, 0.1, 2, 0.05, 3)
            .unwrap();
        assert!(fb.val_fallback);
    }

    #[test]
    fn larger_gamma_smaller_final_kl() {
        let (g, states) = full_setup(1);
        let phi = ModelParams::init(Arch::Gcn2 { input: 5, hidden: 8, classes: 3 }, 2);
        let labeled = vec![true; g.n];
        let val = g.mask(Split::Val);
        let kl_at = |gamma: f64| {
            transform_graph(&states[0], &phi, &g.labels, &labeled, &val, gamma, 30, 0.1, 5)
                .unwrap()
                .final_kl
        };
        assert!(kl_at(1.0) < kl_at(0.0));
    }
}
