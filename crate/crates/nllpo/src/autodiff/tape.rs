//! Append-only differentiation tape over 2-D tensors.
//!
//! Nodes record the operation kind and input indices; the forward value is
//! computed at build time, and a single reverse sweep accumulates adjoints.
//! Running the same graph with [`Dual`](super::scalar::Dual) scalars turns
//! the sweep into a forward-over-reverse Hessian-vector product.

use super::scalar::Scalar;
use super::AutodiffError;

/// Index of a node on the tape.
pub type NodeId = usize;

/// Dense 2-D value. Vectors are 1×c or r×1; scalars are 1×1.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_values(rows: usize, cols: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), rows * cols);
        Self { rows, cols, data: values.iter().map(|v| S::from_f64(*v)).collect() }
    }

    pub fn from_values_tangents(rows: usize, cols: usize, values: &[f64], tangents: &[f64]) -> Self {
        assert_eq!(values.len(), rows * cols);
        assert_eq!(tangents.len(), rows * cols);
        let data = values
            .iter()
            .zip(tangents)
            .map(|(v, t)| S::with_tangent(*v, *t))
            .collect();
        Self { rows, cols, data }
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

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn values(&self) -> Vec<f64> {
        self.data.iter().map(|s| s.value()).collect()
    }

    pub fn tangents(&self) -> Vec<f64> {
        self.data.iter().map(|s| s.tangent()).collect()
    }

    fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                for j in 0..other.cols {
                    let v = out.at(i, j) + a * other.at(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    /// self · otherᵀ
    fn matmul_nt(&self, other: &Tensor<S>) -> Tensor<S> {
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = S::zero();
                for k in 0..self.cols {
                    acc += self.at(i, k) * other.at(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// selfᵀ · other
    fn matmul_tn(&self, other: &Tensor<S>) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.at(k, i);
                for j in 0..other.cols {
                    let v = out.at(i, j) + a * other.at(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast 1×1 scalar node times arbitrary tensor node.
    MulScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Clamp(NodeId, f64, f64),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// 1×c replicated down to rows×c.
    BroadcastRow(NodeId, usize),
    /// r×1 replicated across to r×cols.
    BroadcastCol(NodeId, usize),
    SumAll(NodeId),
    /// r×c → r×1, summing each row.
    SumRows(NodeId),
    /// r×c → r×1, numerically stable log Σ exp per row.
    LogSumExpRows(NodeId),
    /// r×c → r×1, picking entry `idx[i]` per row.
    GatherCols(NodeId, Vec<usize>),
    /// 1×n → n×n diagonal embedding.
    DiagEmbed(NodeId),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    fn check_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch { op, a: self.shape(a), b: self.shape(b) });
        }
        Ok(())
    }

    /// Leaf holding arbitrary data; used for inputs and constants alike.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: &[f64]) -> NodeId {
        self.leaf(Tensor::from_values(rows, cols, values))
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(1, 1, &[v])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_same_shape("add", a, b)?;
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..out.data.len() {
            out.data[i] = self.nodes[a].value.data[i] + self.nodes[b].value.data[i];
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_same_shape("sub", a, b)?;
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..out.data.len() {
            out.data[i] = self.nodes[a].value.data[i] - self.nodes[b].value.data[i];
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..out.data.len() {
            out.data[i] = -self.nodes[a].value.data[i];
        }
        self.push(out, Op::Neg(a))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..out.data.len() {
            out.data[i] = self.nodes[a].value.data[i] * self.nodes[b].value.data[i];
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// 1×1 node times arbitrary tensor, broadcast.
    pub fn mul_scalar(&mut self, s: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(s) != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_scalar",
                a: self.shape(s),
                b: (1, 1),
            });
        }
        let sv = self.nodes[s].value.data[0];
        let (r, c) = self.shape(b);
        let mut out = Tensor::zeros(r, c);
        for i in 0..out.data.len() {
            out.data[i] = sv * self.nodes[b].value.data[i];
        }
        Ok(self.push(out, Op::MulScalar(s, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (_, ac) = self.shape(a);
        let (br, _) = self.shape(b);
        if ac != br {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                a: self.shape(a),
                b: self.shape(b),
            });
        }
        let out = self.nodes[a].value.matmul(&self.nodes[b].value);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, self.nodes[a].value.at(i, j));
            }
        }
        self.push(out, Op::Transpose(a))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(S) -> S) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, c);
        for i in 0..out.data.len() {
            out.data[i] = f(self.nodes[a].value.data[i]);
        }
        self.push(out, op)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), |v| v.exp())
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), |v| v.ln())
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), |v| v.tanh())
    }

    /// max(0, x); the derivative at the kink is taken to be 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |v| if v.value() > 0.0 { v } else { S::zero() })
    }

    /// Clamp to [lo, hi]; gradient passes inside the closed interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |v| {
            if v.value() < lo {
                S::from_f64(lo)
            } else if v.value() > hi {
                S::from_f64(hi)
            } else {
                v
            }
        })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = S::from_f64(c);
        self.unary(a, Op::Scale(a, c), |v| v * k)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = S::from_f64(c);
        self.unary(a, Op::AddConst(a), |v| v + k)
    }

    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_row",
                a: (r, c),
                b: (1, c),
            });
        }
        let mut out = Tensor::zeros(rows, c);
        for i in 0..rows {
            for j in 0..c {
                out.set(i, j, self.nodes[a].value.at(0, j));
            }
        }
        Ok(self.push(out, Op::BroadcastRow(a, rows)))
    }

    pub fn broadcast_col(&mut self, a: NodeId, cols: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_col",
                a: (r, c),
                b: (r, 1),
            });
        }
        let mut out = Tensor::zeros(r, cols);
        for i in 0..r {
            for j in 0..cols {
                out.set(i, j, self.nodes[a].value.at(i, 0));
            }
        }
        Ok(self.push(out, Op::BroadcastCol(a, cols)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut acc = S::zero();
        for v in self.nodes[a].value.data.iter() {
            acc += *v;
        }
        let mut out = Tensor::zeros(1, 1);
        out.data[0] = acc;
        self.push(out, Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            let mut acc = S::zero();
            for j in 0..c {
                acc += self.nodes[a].value.at(i, j);
            }
            out.set(i, 0, acc);
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            let mut m = f64::NEG_INFINITY;
            for j in 0..c {
                m = m.max(self.nodes[a].value.at(i, j).value());
            }
            // the shift is a constant, so tangents flow only through x - m
            let shift = S::from_f64(m);
            let mut acc = S::zero();
            for j in 0..c {
                acc += (self.nodes[a].value.at(i, j) - shift).exp();
            }
            out.set(i, 0, shift + acc.ln());
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.shape(a);
        if idx.len() != r || idx.iter().any(|j| *j >= c) {
            return Err(AutodiffError::ShapeMismatch { op: "gather_cols", a: (r, c), b: (idx.len(), 1) });
        }
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            out.set(i, 0, self.nodes[a].value.at(i, idx[i]));
        }
        Ok(self.push(out, Op::GatherCols(a, idx)))
    }

    pub fn diag_embed(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(AutodiffError::ShapeMismatch { op: "diag_embed", a: (r, c), b: (1, c) });
        }
        let mut out = Tensor::zeros(c, c);
        for j in 0..c {
            out.set(j, j, self.nodes[a].value.at(0, j));
        }
        Ok(self.push(out, Op::DiagEmbed(a)))
    }

    /// Mean of all entries as a 1×1 node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar root; returns one adjoint per node.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor<S>>, AutodiffError> {
        if self.shape(root) != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "backward",
                a: self.shape(root),
                b: (1, 1),
            });
        }
        let mut adj: Vec<Tensor<S>> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        adj[root].data[0] = S::one();

        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        adj[*a].data[i] += g.data[i];
                        adj[*b].data[i] += g.data[i];
                    }
                }
                Op::Sub(a, b) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        adj[*a].data[i] += g.data[i];
                        adj[*b].data[i] -= g.data[i];
                    }
                }
                Op::Neg(a) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        adj[*a].data[i] -= g.data[i];
                    }
                }
                Op::Mul(a, b) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        adj[*a].data[i] += g.data[i] * self.nodes[*b].value.data[i];
                        adj[*b].data[i] += g.data[i] * self.nodes[*a].value.data[i];
                    }
                }
                Op::MulScalar(s, b) => {
                    let g = adj[id].clone();
                    let sv = self.nodes[*s].value.data[0];
                    let mut acc = S::zero();
                    for i in 0..g.data.len() {
                        acc += g.data[i] * self.nodes[*b].value.data[i];
                        adj[*b].data[i] += g.data[i] * sv;
                    }
                    adj[*s].data[0] += acc;
                }
                Op::MatMul(a, b) => {
                    let g = adj[id].clone();
                    let ga = g.matmul_nt(&self.nodes[*b].value);
                    let gb = self.nodes[*a].value.matmul_tn(&g);
                    for i in 0..ga.data.len() {
                        adj[*a].data[i] += ga.data[i];
                    }
                    for i in 0..gb.data.len() {
                        adj[*b].data[i] += gb.data[i];
                    }
                }
                Op::Transpose(a) => {
                    let g = adj[id].clone();
                    let (r, c) = g.shape();
                    for i in 0..r {
                        for j in 0..c {
                            let v = adj[*a].at(j, i) + g.at(i, j);
                            adj[*a].set(j, i, v);
                        }
                    }
                }
                Op::Exp(a) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        adj[*a].data[i] += g.data[i] * node.value.data[i];
                    }
                }
                Op::Ln(a) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        adj[*a].data[i] += g.data[i] / self.nodes[*a].value.data[i];
                    }
                }
                Op::Tanh(a) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        let t = node.value.data[i];
                        adj[*a].data[i] += g.data[i] * (S::one() - t * t);
                    }
                }
                Op::Relu(a) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        if self.nodes[*a].value.data[i].value() > 0.0 {
                            adj[*a].data[i] += g.data[i];
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        let v = self.nodes[*a].value.data[i].value();
                        if v >= *lo && v <= *hi {
                            adj[*a].data[i] += g.data[i];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let g = adj[id].clone();
                    let k = S::from_f64(*c);
                    for i in 0..g.data.len() {
                        adj[*a].data[i] += g.data[i] * k;
                    }
                }
                Op::AddConst(a) => {
                    let g = adj[id].clone();
                    for i in 0..g.data.len() {
                        adj[*a].data[i] += g.data[i];
                    }
                }
                Op::BroadcastRow(a, rows) => {
                    let g = adj[id].clone();
                    let c = g.cols;
                    for j in 0..c {
                        let mut acc = S::zero();
                        for i in 0..*rows {
                            acc += g.at(i, j);
                        }
                        adj[*a].data[j] += acc;
                    }
                }
                Op::BroadcastCol(a, cols) => {
                    let g = adj[id].clone();
                    let r = g.rows;
                    for i in 0..r {
                        let mut acc = S::zero();
                        for j in 0..*cols {
                            acc += g.at(i, j);
                        }
                        adj[*a].data[i] += acc;
                    }
                }
                Op::SumAll(a) => {
                    let g = adj[id].data[0];
                    for v in adj[*a].data.iter_mut() {
                        *v += g;
                    }
                }
                Op::SumRows(a) => {
                    let g = adj[id].clone();
                    let (r, c) = self.nodes[*a].value.shape();
                    for i in 0..r {
                        let gi = g.at(i, 0);
                        for j in 0..c {
                            let v = adj[*a].at(i, j) + gi;
                            adj[*a].set(i, j, v);
                        }
                    }
                }
                Op::LogSumExpRows(a) => {
                    let g = adj[id].clone();
                    let (r, c) = self.nodes[*a].value.shape();
                    for i in 0..r {
                        let gi = g.at(i, 0);
                        let lse = node.value.at(i, 0);
                        for j in 0..c {
                            let soft = (self.nodes[*a].value.at(i, j) - lse).exp();
                            let v = adj[*a].at(i, j) + gi * soft;
                            adj[*a].set(i, j, v);
                        }
                    }
                }
                Op::GatherCols(a, idx) => {
                    let g = adj[id].clone();
                    for (i, j) in idx.iter().enumerate() {
                        let v = adj[*a].at(i, *j) + g.at(i, 0);
                        adj[*a].set(i, *j, v);
                    }
                }
                Op::DiagEmbed(a) => {
                    let g = adj[id].clone();
                    let n = g.rows;
                    for j in 0..n {
                        adj[*a].data[j] += g.at(j, j);
                    }
                }
            }
        }
        Ok(adj)
    }
}
