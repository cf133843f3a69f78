//! Differentiable model zoo: 2-layer GCN, k-step SGC, 2-layer MLP, and the
//! condensed-adjacency generator. All forwards run on the tape so parameters
//! and inputs stay differentiable.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{NodeId, Result, Tape, Tensor, TensorError};

/// Architecture tag with the shape bookkeeping for each model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// logits = A (relu((A X + cross) W1)) W2
    Gcn2 { input: usize, hidden: usize, classes: usize },
    /// logits = A^k (X + cross at first hop) W
    SgcK { input: usize, classes: usize, k: usize },
    /// logits = relu(X W1) W2, structure-blind
    Mlp2 { input: usize, hidden: usize, classes: usize },
    /// pairwise sigmoid scorer over concatenated condensed features
    AdjGen { input: usize, hidden: usize },
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: Arch,
    pub weights: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform fan-in initialization, deterministic per seed.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Tensor::new(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        };
        let weights = match arch {
            Arch::Gcn2 { input, hidden, classes } => vec![w(input, hidden), w(hidden, classes)],
            Arch::SgcK { input, classes, .. } => vec![w(input, classes)],
            Arch::Mlp2 { input, hidden, classes } => vec![w(input, hidden), w(hidden, classes)],
            Arch::AdjGen { input, hidden } => vec![w(2 * input, hidden), w(hidden, 1)],
        };
        ModelParams { arch, weights }
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.weights
            .iter()
            .map(|w| Tensor::zeros(w.rows(), w.cols()))
            .collect()
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.weights.iter().map(|w| tape.leaf(w.clone())).collect()
    }

    pub fn constants(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.weights.iter().map(|w| tape.constant(w.clone())).collect()
    }

    /// In-place SGD step: w -= lr * g.
    pub fn step(&mut self, grads: &[Tensor], lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(grads) {
            for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                *wv -= lr * gv;
            }
        }
    }

    /// 64-bit FNV-1a over the raw weight bits; used for frozen-parameter checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for w in &self.weights {
            for v in w.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Two-layer GCN forward. `cross_sums`, when present, is added to the first
/// propagation A X (degree-normalized cross-client neighbor contributions).
pub fn gcn_forward(
    tape: &mut Tape,
    weights: &[NodeId],
    adj: NodeId,
    x: NodeId,
    cross_sums: Option<NodeId>,
) -> Result<NodeId> {
    let mut ax = tape.matmul(adj, x)?;
    if let Some(cs) = cross_sums {
        ax = tape.add(ax, cs)?;
    }
    let h = tape.matmul(ax, weights[0])?;
    let h = tape.relu(h)?;
    let ah = tape.matmul(adj, h)?;
    tape.matmul(ah, weights[1])
}

/// k-step SGC forward: A^k (X + cross at the first hop) W.
pub fn sgc_forward(
    tape: &mut Tape,
    weights: &[NodeId],
    k: usize,
    adj: NodeId,
    x: NodeId,
    cross_sums: Option<NodeId>,
) -> Result<NodeId> {
    let mut h = x;
    for hop in 0..k {
        h = tape.matmul(adj, h)?;
        if hop == 0 {
            if let Some(cs) = cross_sums {
                h = tape.add(h, cs)?;
            }
        }
    }
    tape.matmul(h, weights[0])
}

/// Structure-blind 2-layer MLP.
pub fn mlp_forward(tape: &mut Tape, weights: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h = tape.matmul(x, weights[0])?;
    let h = tape.relu(h)?;
    tape.matmul(h, weights[1])
}

/// Forward dispatch on architecture; adj/cross are ignored by the MLP.
pub fn forward(
    tape: &mut Tape,
    params_arch: Arch,
    weights: &[NodeId],
    adj: NodeId,
    x: NodeId,
    cross_sums: Option<NodeId>,
) -> Result<NodeId> {
    match params_arch {
        Arch::Gcn2 { .. } => gcn_forward(tape, weights, adj, x, cross_sums),
        Arch::SgcK { k, .. } => sgc_forward(tape, weights, k, adj, x, cross_sums),
        Arch::Mlp2 { .. } => mlp_forward(tape, weights, x),
        Arch::AdjGen { .. } => Err(TensorError::Invalid(
            "AdjGen has no node-classification forward".into(),
        )),
    }
}

/// Symmetrized condensed adjacency:
/// A'_{ij} = sigmoid((mlp([x_i||x_j]) + mlp([x_j||x_i])) / 2), entries in (0,1).
///
/// Built from row-gathered pairings so it stays taped w.r.t. both the
/// generator weights and the condensed features.
pub fn synth_adjacency(tape: &mut Tape, phi: &[NodeId], x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).rows();
    if n == 0 {
        return Err(TensorError::Invalid("need at least one condensed node".into()));
    }
    // all ordered pairs (i, j) as two gathered copies of x, n^2 rows
    let mut left_idx = Vec::with_capacity(n * n);
    let mut right_idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            left_idx.push(i);
            right_idx.push(j);
        }
    }
    let left = tape.gather_rows(x, &left_idx)?;
    let right = tape.gather_rows(x, &right_idx)?;
    let pairs = tape.concat_cols(left, right)?;
    let h = tape.matmul(pairs, phi[0])?;
    let h = tape.relu(h)?;
    let scores = tape.matmul(h, phi[1])?; // n^2 x 1, row i*n+j = s(i,j)
    // transpose of the score grid via a permutation constant
    let mut perm = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            perm.push(j * n + i);
        }
    }
    let scores_t = tape.gather_rows(scores, &perm)?;
    let sym = tape.add(scores, scores_t)?;
    let half = tape.scalar_mul(sym, 0.5)?;
    let probs = tape.sigmoid(half)?; // n^2 x 1
    // reshape n^2 x 1 -> n x n: select each row block and concatenate columns.
    // A column-slice reshape: matmul with reshaping constants keeps it taped.
    reshape_col_to_grid(tape, probs, n)
}

/// Reshape an n^2 x 1 column (row-major grid order) into an n x n matrix using
/// selection-matrix products so gradients flow through.
fn reshape_col_to_grid(tape: &mut Tape, col: NodeId, n: usize) -> Result<NodeId> {
    // grid = sum_j S_j col e_j^T where S_j selects rows {i*n+j}_i
    let mut grid: Option<NodeId> = None;
    for j in 0..n {
        let idx: Vec<usize> = (0..n).map(|i| i * n + j).collect();
        let column = tape.gather_rows(col, &idx)?; // n x 1
        let mut basis = Tensor::zeros(1, n);
        basis.set(0, j, 1.0);
        let basis = tape.constant(basis);
        let placed = tape.matmul(column, basis)?; // n x n with column j filled
        grid = Some(match grid {
            Some(g) => tape.add(g, placed)?,
            None => placed,
        });
    }
    Ok(grid.unwrap())
}

/// Differentiable symmetric normalization of a dense nonnegative adjacency:
/// D^{-1/2} (A + I) D^{-1/2} with D the row sums of A + I.
pub fn normalize_dense_taped(tape: &mut Tape, adj: NodeId) -> Result<NodeId> {
    let n = tape.value(adj).rows();
    let eye = {
        let mut e = Tensor::zeros(n, n);
        for d in 0..n {
            e.set(d, d, 1.0);
        }
        tape.constant(e)
    };
    let a_tilde = tape.add(adj, eye)?;
    let deg = tape.row_sums(a_tilde)?; // n x 1
    let s = tape.sqrt(deg)?;
    let inv = tape.recip(s)?;
    let scale_rows = tape.bcast_col(inv, n)?; // n x n, row r = d_r^{-1/2}
    let scale_cols = tape.transpose(scale_rows)?;
    let scaled = tape.mul_elem(a_tilde, scale_rows)?;
    tape.mul_elem(scaled, scale_cols)
}

/// Masked mean cross-entropy over softmax logits; see `Tape::masked_cross_entropy`.
pub fn masked_ce(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    loss_mask: &[bool],
) -> Result<NodeId> {
    if !loss_mask.iter().any(|&m| m) {
        return Err(TensorError::Invalid("empty loss mask".into()));
    }
    tape.masked_cross_entropy(logits, labels, loss_mask)
}

/// Evaluate logits for trained params on a plain (untaped) input.
pub fn eval_logits(
    params: &ModelParams,
    adj: &Tensor,
    x: &Tensor,
    cross_sums: Option<&Tensor>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = params.constants(&mut tape);
    let a = tape.constant(adj.clone());
    let xi = tape.constant(x.clone());
    let cs = cross_sums.map(|c| tape.constant(c.clone()));
    let logits = forward(&mut tape, params.arch, &w, a, xi, cs)?;
    Ok(tape.value(logits).clone())
}

/// Row-wise softmax of plain logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row: Vec<f64> = (0..logits.cols()).map(|c| logits.get(r, c)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..logits.cols() {
            out.set(r, c, exps[c] / z);
        }
    }
    out
}
