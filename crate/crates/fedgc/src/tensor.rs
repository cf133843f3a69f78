//! Dense 2-D tensors and a tape for reverse-mode automatic differentiation.
//!
//! Backward passes are themselves recorded onto the tape, so a gradient is an
//! ordinary tape node that can be differentiated again. This is what makes the
//! gradient-matching loss (a function of model gradients) optimizable with
//! respect to the condensed graph.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major matrix of f64. Scalars are 1x1, column vectors n x 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![1.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let lhs = k * other.cols;
                let dst = r * other.cols;
                for c in 0..other.cols {
                    out.data[dst + c] += a * other.data[lhs + c];
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Tensor::new(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Primitive operations recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    MulElem,
    Matmul,
    Transpose,
    ScalarMul(f64),
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Recip,
    Square,
    Sqrt,
    Sum,
    BroadcastScalar(usize, usize),
    RowSoftmax,
    RowLogSumExp,
    ConcatCols,
    SliceCols(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Wengert list. Leaves are the differentiable parameters; constants receive
/// no gradient. `backward` appends adjoint nodes so results stay differentiable.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, vec![], value)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn eval(&self, op: Op, inputs: &[NodeId]) -> Result<Tensor> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let out = match op {
            Op::Leaf | Op::Const => unreachable!("leaf/const are pushed directly"),
            Op::Add => v(0).zip(v(1), "add", |a, b| a + b)?,
            Op::Sub => v(0).zip(v(1), "sub", |a, b| a - b)?,
            Op::MulElem => v(0).zip(v(1), "mul_elem", |a, b| a * b)?,
            Op::Matmul => v(0).matmul(v(1))?,
            Op::Transpose => v(0).transpose(),
            Op::ScalarMul(c) => v(0).map(|a| a * c),
            Op::Relu => v(0).map(|a| a.max(0.0)),
            Op::Sigmoid => v(0).map(sigmoid),
            Op::Softplus => v(0).map(softplus),
            Op::Exp => v(0).map(f64::exp),
            Op::Log => v(0).map(f64::ln),
            Op::Recip => v(0).map(|a| 1.0 / a),
            Op::Square => v(0).map(|a| a * a),
            Op::Sqrt => v(0).map(f64::sqrt),
            Op::Sum => Tensor::scalar(v(0).data().iter().sum()),
            Op::BroadcastScalar(r, c) => {
                let s = v(0);
                if s.shape() != (1, 1) {
                    return Err(TensorError::ShapeMismatch {
                        op: "broadcast_scalar",
                        lhs: s.shape(),
                        rhs: (1, 1),
                    });
                }
                let x = s.item();
                Tensor::new(r, c, vec![x; r * c])
            }
            Op::RowSoftmax => {
                let x = v(0);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = &x.data()[r * x.cols()..(r + 1) * x.cols()];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&a| (a - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for c in 0..x.cols() {
                        out.set(r, c, exps[c] / z);
                    }
                }
                out
            }
            Op::RowLogSumExp => {
                let x = v(0);
                let mut out = Tensor::zeros(x.rows(), 1);
                for r in 0..x.rows() {
                    let row = &x.data()[r * x.cols()..(r + 1) * x.cols()];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = row.iter().map(|&a| (a - m).exp()).sum();
                    out.set(r, 0, m + s.ln());
                }
                out
            }
            Op::ConcatCols => {
                let a = v(0);
                let b = v(1);
                if a.rows() != b.rows() {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: a.shape(),
                        rhs: b.shape(),
                    });
                }
                let mut out = Tensor::zeros(a.rows(), a.cols() + b.cols());
                for r in 0..a.rows() {
                    for c in 0..a.cols() {
                        out.set(r, c, a.get(r, c));
                    }
                    for c in 0..b.cols() {
                        out.set(r, a.cols() + c, b.get(r, c));
                    }
                }
                out
            }
            Op::SliceCols(from, to) => {
                let x = v(0);
                if from > to || to > x.cols() {
                    return Err(TensorError::Invalid(format!(
                        "slice_cols [{from},{to}) out of range for {} cols",
                        x.cols()
                    )));
                }
                let mut out = Tensor::zeros(x.rows(), to - from);
                for r in 0..x.rows() {
                    for c in from..to {
                        out.set(r, c - from, x.get(r, c));
                    }
                }
                out
            }
        };
        Ok(out)
    }

    /// Record a primitive application. The op name in the spec sense.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let value = self.eval(op, inputs)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name(op) });
        }
        Ok(self.push(op, inputs.to_vec(), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MulElem, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Matmul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose, &[a])
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::ScalarMul(c), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid, &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Softplus, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Log, &[a])
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Recip, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Square, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sqrt, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scalar_mul(s, 1.0 / n)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::RowSoftmax, &[a])
    }

    pub fn row_logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::RowLogSumExp, &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::ConcatCols, &[a, b])
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        self.record(Op::SliceCols(from, to), &[a])
    }

    /// Gather rows by index, expressed as a selection-matrix product so the
    /// backward pass needs no scatter primitive.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let n = self.value(a).rows();
        let mut sel = Tensor::zeros(idx.len(), n);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::Invalid(format!("gather index {i} out of {n} rows")));
            }
            sel.set(r, i, 1.0);
        }
        let sel = self.constant(sel);
        self.matmul(sel, a)
    }

    /// Column broadcast: tile an n x 1 column across `cols` columns.
    pub fn bcast_col(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let ones = self.constant(Tensor::ones(1, cols));
        self.matmul(a, ones)
    }

    /// Row sums as an n x 1 column.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let ones = self.constant(Tensor::ones(self.value(a).cols(), 1));
        self.matmul(a, ones)
    }

    /// Mean of -log softmax(logits)[label] over masked rows; taped.
    ///
    /// Composition of primitives via the log-sum-exp form:
    ///   ce_v = lse(logits_v) - logits[v, y_v].
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (n, classes) = self.value(logits).shape();
        if labels.len() != n || mask.len() != n {
            return Err(TensorError::Invalid(format!(
                "labels/mask length {} / {} vs {} rows",
                labels.len(),
                mask.len(),
                n
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid("empty loss mask".into()));
        }
        let mut mask_col = Tensor::zeros(n, 1);
        let mut pick = Tensor::zeros(n, classes);
        for v in 0..n {
            if mask[v] {
                if labels[v] >= classes {
                    return Err(TensorError::Invalid(format!(
                        "label {} out of {} classes",
                        labels[v], classes
                    )));
                }
                mask_col.set(v, 0, 1.0);
                pick.set(v, labels[v], 1.0);
            }
        }
        let mask_col = self.constant(mask_col);
        let pick = self.constant(pick);
        let lse = self.row_logsumexp(logits)?;
        let lse_masked = self.mul_elem(lse, mask_col)?;
        let lse_total = self.sum(lse_masked)?;
        let picked = self.mul_elem(logits, pick)?;
        let picked_total = self.sum(picked)?;
        let diff = self.sub(lse_total, picked_total)?;
        self.scalar_mul(diff, 1.0 / count as f64)
    }

    /// Reverse pass from a scalar `output`. Returns one adjoint node per `wrt`
    /// entry; unreachable parameters get a zero node. The adjoints are tape
    /// nodes and can be differentiated again.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.value(output).shape() != (1, 1) {
            return Err(TensorError::NonScalarOutput {
                shape: self.value(output).shape(),
            });
        }
        let mut adjoint: HashMap<usize, NodeId> = HashMap::new();
        let seed = self.constant(Tensor::scalar(1.0));
        adjoint.insert(output.0, seed);

        for i in (0..=output.0).rev() {
            let g = match adjoint.get(&i) {
                Some(&g) => g,
                None => continue,
            };
            let op = self.nodes[i].op;
            let inputs = self.nodes[i].inputs.clone();
            if inputs.is_empty() {
                continue;
            }
            let contribs = self.vjp(NodeId(i), op, &inputs, g)?;
            for (input, contrib) in inputs.iter().zip(contribs) {
                let contrib = match contrib {
                    Some(c) => c,
                    None => continue,
                };
                match adjoint.get(&input.0) {
                    Some(&acc) => {
                        let merged = self.add(acc, contrib)?;
                        adjoint.insert(input.0, merged);
                    }
                    None => {
                        adjoint.insert(input.0, contrib);
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint.get(&w.0) {
                Some(&g) => out.push(g),
                None => {
                    let shape = self.value(w).shape();
                    out.push(self.constant(Tensor::zeros(shape.0, shape.1)));
                }
            }
        }
        Ok(out)
    }

    /// Backward returning plain tensors (first-order use).
    pub fn grad_values(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let ids = self.backward(output, wrt)?;
        Ok(ids.into_iter().map(|id| self.value(id).clone()).collect())
    }

    /// Vector-Jacobian product per input, expressed in primitives.
    fn vjp(
        &mut self,
        node: NodeId,
        op: Op,
        inputs: &[NodeId],
        g: NodeId,
    ) -> Result<Vec<Option<NodeId>>> {
        let out = match op {
            Op::Leaf | Op::Const => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => {
                let neg = self.scalar_mul(g, -1.0)?;
                vec![Some(g), Some(neg)]
            }
            Op::MulElem => {
                let da = self.mul_elem(g, inputs[1])?;
                let db = self.mul_elem(g, inputs[0])?;
                vec![Some(da), Some(db)]
            }
            Op::Matmul => {
                let bt = self.transpose(inputs[1])?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(inputs[0])?;
                let db = self.matmul(at, g)?;
                vec![Some(da), Some(db)]
            }
            Op::Transpose => {
                let da = self.transpose(g)?;
                vec![Some(da)]
            }
            Op::ScalarMul(c) => {
                let da = self.scalar_mul(g, c)?;
                vec![Some(da)]
            }
            Op::Relu => {
                // subgradient at 0 is 0; the mask is piecewise constant so a
                // detached constant is the exact second-order treatment a.e.
                let mask = self.value(inputs[0]).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                let da = self.mul_elem(g, mask)?;
                vec![Some(da)]
            }
            Op::Sigmoid => {
                let s = node;
                let shape = self.value(s).shape();
                let ones = self.constant(Tensor::ones(shape.0, shape.1));
                let one_minus = self.sub(ones, s)?;
                let fac = self.mul_elem(s, one_minus)?;
                let da = self.mul_elem(g, fac)?;
                vec![Some(da)]
            }
            Op::Softplus => {
                let s = self.sigmoid(inputs[0])?;
                let da = self.mul_elem(g, s)?;
                vec![Some(da)]
            }
            Op::Exp => {
                let da = self.mul_elem(g, node)?;
                vec![Some(da)]
            }
            Op::Log => {
                let r = self.recip(inputs[0])?;
                let da = self.mul_elem(g, r)?;
                vec![Some(da)]
            }
            Op::Recip => {
                let sq = self.mul_elem(node, node)?;
                let prod = self.mul_elem(g, sq)?;
                let da = self.scalar_mul(prod, -1.0)?;
                vec![Some(da)]
            }
            Op::Square => {
                let prod = self.mul_elem(g, inputs[0])?;
                let da = self.scalar_mul(prod, 2.0)?;
                vec![Some(da)]
            }
            Op::Sqrt => {
                let r = self.recip(node)?;
                let half = self.scalar_mul(r, 0.5)?;
                let da = self.mul_elem(g, half)?;
                vec![Some(da)]
            }
            Op::Sum => {
                let shape = self.value(inputs[0]).shape();
                let da = self.record(Op::BroadcastScalar(shape.0, shape.1), &[g])?;
                vec![Some(da)]
            }
            Op::BroadcastScalar(_, _) => {
                let da = self.sum(g)?;
                vec![Some(da)]
            }
            Op::RowSoftmax => {
                // da = y .* (g - rowsum(g .* y) broadcast)
                let y = node;
                let cols = self.value(y).cols();
                let gy = self.mul_elem(g, y)?;
                let rs = self.row_sums(gy)?;
                let rsb = self.bcast_col(rs, cols)?;
                let centered = self.sub(g, rsb)?;
                let da = self.mul_elem(y, centered)?;
                vec![Some(da)]
            }
            Op::RowLogSumExp => {
                // da = (g broadcast across cols) .* softmax(a)
                let cols = self.value(inputs[0]).cols();
                let gb = self.bcast_col(g, cols)?;
                let sm = self.row_softmax(inputs[0])?;
                let da = self.mul_elem(gb, sm)?;
                vec![Some(da)]
            }
            Op::ConcatCols => {
                let ca = self.value(inputs[0]).cols();
                let cb = self.value(inputs[1]).cols();
                let da = self.slice_cols(g, 0, ca)?;
                let db = self.slice_cols(g, ca, ca + cb)?;
                vec![Some(da), Some(db)]
            }
            Op::SliceCols(from, to) => {
                let (rows, cols) = self.value(inputs[0]).shape();
                let mut da = g;
                if from > 0 {
                    let left = self.constant(Tensor::zeros(rows, from));
                    da = self.concat_cols(left, da)?;
                }
                if to < cols {
                    let right = self.constant(Tensor::zeros(rows, cols - to));
                    da = self.concat_cols(da, right)?;
                }
                vec![Some(da)]
            }
        };
        Ok(out)
    }
}

fn op_name(op: Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Const => "const",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::MulElem => "mul_elem",
        Op::Matmul => "matmul",
        Op::Transpose => "transpose",
        Op::ScalarMul(_) => "scalar_mul",
        Op::Relu => "relu",
        Op::Sigmoid => "sigmoid",
        Op::Softplus => "softplus",
        Op::Exp => "exp",
        Op::Log => "log",
        Op::Recip => "recip",
        Op::Square => "square",
        Op::Sqrt => "sqrt",
        Op::Sum => "sum",
        Op::BroadcastScalar(_, _) => "broadcast_scalar",
        Op::RowSoftmax => "row_softmax",
        Op::RowLogSumExp => "row_logsumexp",
        Op::ConcatCols => "concat_cols",
        Op::SliceCols(_, _) => "slice_cols",
    }
}

/// Central-difference gradient of a scalar function, the test oracle for
/// every backward rule.
pub fn finite_diff(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(TensorError::Invalid("eps must be positive".into()));
    }
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += eps;
        let mut lo = x.clone();
        lo.data_mut()[i] -= eps;
        let fh = f(&hi)?;
        let fl = f(&lo)?;
        if !fh.is_finite() || !fl.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff" });
        }
        grad.data_mut()[i] = (fh - fl) / (2.0 * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            num += (x - y) * (x - y);
            den += y * y;
        }
        (num.sqrt()) / (den.sqrt().max(1e-8))
    }

    #[test]
    fn record_add_identity_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0, 8.0, 10.0, 12.0]);

        let eye = tape.constant(Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]));
        let x = tape.leaf(Tensor::from_rows(&[vec![1.5], vec![-2.0], vec![0.25]]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);

        let bad_a = tape.leaf(Tensor::zeros(2, 3));
        let bad_b = tape.leaf(Tensor::zeros(2, 3));
        assert!(matches!(
            tape.matmul(bad_a, bad_b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
        let sq = tape.square(x).unwrap();
        let f = tape.sum(sq).unwrap();
        let g = tape.grad_values(f, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_non_scalar_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y, &[x]),
            Err(TensorError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn backward_unreachable_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let w = tape.leaf(Tensor::zeros(3, 2));
        let f = tape.square(x).unwrap();
        let f = tape.sum(f).unwrap();
        let g = tape.grad_values(f, &[w]).unwrap();
        assert_eq!(g[0], Tensor::zeros(3, 2));
    }

    #[test]
    fn matmul_grad_is_column_sums() {
        // f = sum(x W): df/dW[k][c] = sum_r x[r][k]
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x_val = rand_tensor(&mut rng, 4, 3);
        let w_val = rand_tensor(&mut rng, 3, 2);
        let mut tape = Tape::new();
        let x = tape.constant(x_val.clone());
        let w = tape.leaf(w_val.clone());
        let p = tape.matmul(x, w).unwrap();
        let f = tape.sum(p).unwrap();
        let g = tape.grad_values(f, &[w]).unwrap();
        let mut fd = |wt: &Tensor| -> Result<f64> {
            Ok(x_val.matmul(wt)?.data().iter().sum())
        };
        let oracle = finite_diff(&mut fd, &w_val, 1e-6).unwrap();
        assert!(rel_err(&g[0], &oracle) < 1e-6);
        for k in 0..3 {
            for c in 0..2 {
                let col_sum: f64 = (0..4).map(|r| x_val.get(r, k)).sum();
                assert!((g[0].get(k, c) - col_sum).abs() < 1e-12);
            }
        }
    }

    fn gradcheck_unary(
        op: Op,
        domain: impl Fn(&mut ChaCha8Rng) -> f64,
        seeds: u64,
        tol: f64,
    ) {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x_val = Tensor::new(3, 4, (0..12).map(|_| domain(&mut rng)).collect());
            let mut tape = Tape::new();
            let x = tape.leaf(x_val.clone());
            let y = tape.record(op, &[x]).unwrap();
            // weight the output so the scalar is a generic functional
            let w_val = rand_tensor(&mut rng, tape.value(y).rows(), tape.value(y).cols());
            let w = tape.constant(w_val.clone());
            let p = tape.mul_elem(y, w).unwrap();
            let f = tape.sum(p).unwrap();
            let g = tape.grad_values(f, &[x]).unwrap();
            let mut fd = |xt: &Tensor| -> Result<f64> {
                let mut t = Tape::new();
                let x = t.leaf(xt.clone());
                let y = t.record(op, &[x])?;
                let w = t.constant(w_val.clone());
                let p = t.mul_elem(y, w)?;
                let f = t.sum(p)?;
                Ok(t.value(f).item())
            };
            let oracle = finite_diff(&mut fd, &x_val, 1e-5).unwrap();
            let e = rel_err(&g[0], &oracle);
            assert!(e < tol, "{:?} seed {seed}: rel err {e}", op);
        }
    }

    #[test]
    fn gradcheck_elementwise_primitives() {
        let sym = |rng: &mut ChaCha8Rng| rng.gen_range(-1.0..1.0);
        // keep relu inputs away from the kink
        let off_kink = |rng: &mut ChaCha8Rng| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() < 0.05 {
                v + 0.1 * v.signum().max(0.0).max(0.1)
            } else {
                v
            }
        };
        let pos = |rng: &mut ChaCha8Rng| rng.gen_range(0.1..1.0);
        gradcheck_unary(Op::Relu, off_kink, 20, 1e-4);
        gradcheck_unary(Op::Sigmoid, sym, 20, 1e-4);
        gradcheck_unary(Op::Softplus, sym, 20, 1e-4);
        gradcheck_unary(Op::Exp, sym, 20, 1e-4);
        gradcheck_unary(Op::Log, pos, 20, 1e-4);
        gradcheck_unary(Op::Recip, pos, 20, 1e-4);
        gradcheck_unary(Op::Square, sym, 20, 1e-4);
        gradcheck_unary(Op::Sqrt, pos, 20, 1e-4);
        gradcheck_unary(Op::RowSoftmax, sym, 20, 1e-4);
        gradcheck_unary(Op::Transpose, sym, 20, 1e-4);
        gradcheck_unary(Op::ScalarMul(1.7), sym, 20, 1e-4);
    }

    #[test]
    fn gradcheck_binary_and_structural() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let a_val = rand_tensor(&mut rng, 3, 4);
            let b_val = rand_tensor(&mut rng, 4, 2);
            let c_val = rand_tensor(&mut rng, 3, 4);
            let mut tape = Tape::new();
            let a = tape.leaf(a_val.clone());
            let b = tape.leaf(b_val.clone());
            let c = tape.leaf(c_val.clone());
            // f = sum(softmax(concat(a*c + a - c, (a b)) sliced)) style composite
            let prod = tape.mul_elem(a, c).unwrap();
            let s = tape.add(prod, a).unwrap();
            let s = tape.sub(s, c).unwrap();
            let mm = tape.matmul(a, b).unwrap();
            let cat = tape.concat_cols(s, mm).unwrap();
            let sl = tape.slice_cols(cat, 1, 5).unwrap();
            let sm = tape.row_softmax(sl).unwrap();
            let lse = tape.row_logsumexp(sl).unwrap();
            let smsum = tape.sum(sm).unwrap();
            let lsesum = tape.sum(lse).unwrap();
            let f = tape.add(smsum, lsesum).unwrap();

            let eval = |av: &Tensor, bv: &Tensor, cv: &Tensor| -> f64 {
                let mut t = Tape::new();
                let a = t.leaf(av.clone());
                let b = t.leaf(bv.clone());
                let c = t.leaf(cv.clone());
                let prod = t.mul_elem(a, c).unwrap();
                let s = t.add(prod, a).unwrap();
                let s = t.sub(s, c).unwrap();
                let mm = t.matmul(a, b).unwrap();
                let cat = t.concat_cols(s, mm).unwrap();
                let sl = t.slice_cols(cat, 1, 5).unwrap();
                let sm = t.row_softmax(sl).unwrap();
                let lse = t.row_logsumexp(sl).unwrap();
                let smsum = t.sum(sm).unwrap();
                let lsesum = t.sum(lse).unwrap();
                let f = t.add(smsum, lsesum).unwrap();
                t.value(f).item()
            };

            let g = tape.grad_values(f, &[a, b, c]).unwrap();
            let mut fa = |x: &Tensor| -> Result<f64> { Ok(eval(x, &b_val, &c_val)) };
            let oa = finite_diff(&mut fa, &a_val, 1e-5).unwrap();
            assert!(rel_err(&g[0], &oa) < 1e-4, "seed {seed} d/da");
            let mut fb = |x: &Tensor| -> Result<f64> { Ok(eval(&a_val, x, &c_val)) };
            let ob = finite_diff(&mut fb, &b_val, 1e-5).unwrap();
            assert!(rel_err(&g[1], &ob) < 1e-4, "seed {seed} d/db");
            let mut fc = |x: &Tensor| -> Result<f64> { Ok(eval(&a_val, &b_val, x)) };
            let oc = finite_diff(&mut fc, &c_val, 1e-5).unwrap();
            assert!(rel_err(&g[2], &oc) < 1e-4, "seed {seed} d/dc");
        }
    }

    #[test]
    fn cross_entropy_matches_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let logits_val = rand_tensor(&mut rng, 5, 3);
        let labels = vec![0, 2, 1, 1, 0];
        let mask = vec![true, true, false, true, true];
        let mut tape = Tape::new();
        let logits = tape.leaf(logits_val.clone());
        let loss = tape.masked_cross_entropy(logits, &labels, &mask).unwrap();
        let g = tape.grad_values(loss, &[logits]).unwrap();
        let mut fd = |x: &Tensor| -> Result<f64> {
            let mut t = Tape::new();
            let l = t.leaf(x.clone());
            let loss = t.masked_cross_entropy(l, &labels, &mask)?;
            Ok(t.value(loss).item())
        };
        let oracle = finite_diff(&mut fd, &logits_val, 1e-5).unwrap();
        assert!(rel_err(&g[0], &oracle) < 1e-5);
    }

    #[test]
    fn second_order_grad_norm_matches_finite_diff() {
        // g(x) = || d/dW sum(relu(x W)^2) ||^2, check dg/dx against central
        // differences of the first-order result.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x_val = rand_tensor(&mut rng, 3, 2);
        let w_val = rand_tensor(&mut rng, 2, 2);

        let second = |xv: &Tensor| -> (f64, Option<Tensor>) {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let w = t.leaf(w_val.clone());
            let h = t.matmul(x, w).unwrap();
            let h = t.relu(h).unwrap();
            let h = t.square(h).unwrap();
            let f = t.sum(h).unwrap();
            let gw = t.backward(f, &[w]).unwrap()[0];
            let gsq = t.square(gw).unwrap();
            let norm = t.sum(gsq).unwrap();
            let val = t.value(norm).item();
            let dgdx = t.grad_values(norm, &[x]).unwrap().remove(0);
            (val, Some(dgdx))
        };

        let (_, dgdx) = second(&x_val);
        let dgdx = dgdx.unwrap();
        let mut fd = |xv: &Tensor| -> Result<f64> { Ok(second(xv).0) };
        let oracle = finite_diff(&mut fd, &x_val, 1e-5).unwrap();
        assert!(rel_err(&dgdx, &oracle) < 1e-3, "rel err {}", rel_err(&dgdx, &oracle));
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x_val = rand_tensor(&mut rng, 4, 4);
            let mut t = Tape::new();
            let x = t.leaf(x_val);
            let s = t.sigmoid(x).unwrap();
            let sm = t.row_softmax(s).unwrap();
            let f = t.sum(sm).unwrap();
            let g = t.grad_values(f, &[x]).unwrap().remove(0);
            (t.value(f).item(), g)
        };
        let (f1, g1) = run();
        let (f2, g2) = run();
        assert!(f1.to_bits() == f2.to_bits());
        assert_eq!(
            g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_val = rand_tensor(&mut rng, 3, 3);
        let (a, b) = (2.5, -1.25);
        let mut t = Tape::new();
        let x = t.leaf(x_val.clone());
        let sq = t.square(x).unwrap();
        let f = t.sum(sq).unwrap(); // f = sum(x^2)
        let e = t.exp(x).unwrap();
        let g = t.sum(e).unwrap(); // g = sum(exp(x))
        let fa = t.scalar_mul(f, a).unwrap();
        let gb = t.scalar_mul(g, b).unwrap();
        let combo = t.add(fa, gb).unwrap();
        let gf = t.grad_values(f, &[x]).unwrap().remove(0);
        let gg = t.grad_values(g, &[x]).unwrap().remove(0);
        let gc = t.grad_values(combo, &[x]).unwrap().remove(0);
        for i in 0..gc.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_diff_of_linear_is_ones() {
        let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.0]]);
        let mut f = |t: &Tensor| -> Result<f64> { Ok(t.data().iter().sum()) };
        let g = finite_diff(&mut f, &x, 1e-6).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_square_at_three() {
        let x = Tensor::scalar(3.0);
        let mut f = |t: &Tensor| -> Result<f64> { Ok(t.data().iter().map(|v| v * v).sum()) };
        let g = finite_diff(&mut f, &x, 1e-6).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        let mut f = |_: &Tensor| -> Result<f64> { Ok(0.0) };
        assert!(finite_diff(&mut f, &x, 0.0).is_err());
    }
}
