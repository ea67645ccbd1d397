//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! appended after their operands, so the node order is already a
//! topological order and `backward` is a single reverse sweep.
//!
//! ```
//! use altsim_core::tape::Tape;
//! use altsim_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true);
//! let sq = tape.hadamard(w, w).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::SparseMatrix;
use crate::tensor::{gemm_acc, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Hadamard,
    Sigmoid,
    Tanh,
    AddBias,
    Propagate,
    Sum,
    Scale,
    RowNorms,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 11] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Hadamard,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::AddBias,
        OpKind::Propagate,
        OpKind::Sum,
        OpKind::Scale,
        OpKind::RowNorms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::AddBias => "add_bias",
            OpKind::Propagate => "propagate",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
            OpKind::RowNorms => "row_norms",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE
            .into_iter()
            .chain([OpKind::Leaf])
            .find(|k| k.name() == name)
    }
}

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Hadamard,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    AddBias(Var, Var),
    Propagate(Arc<SparseMatrix>, Var),
    Sum(Var),
    Scale(Var, f64),
    RowNorms(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Propagate(..) => OpKind::Propagate,
            Op::Sum(..) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::RowNorms(..) => OpKind::RowNorms,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Outcome of a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradStatus {
    /// Gradients were written into this many tracked nodes.
    Populated(usize),
    /// The loss does not depend on any tracked tensor; no grads changed.
    Detached,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of `kind` (its input adjoints are scaled
    /// by 1.5). Negative control for gradient checking only.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Vars from before the clear are invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::Hadamard(a, b), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.requires_grad(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.requires_grad(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Dispatches one of the pointwise ops. Binary ops need `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::contract("binary elementwise op needs two operands"));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Hadamard => self.hadamard(a, need_b()?),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::Tanh => Ok(self.tanh(a)),
        }
    }

    /// `a[n×k] + bias[k]`, broadcasting over the node axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_row_bias(self.value(bias))?;
        let rg = self.rg2(a, bias);
        Ok(self.push(v, Op::AddBias(a, bias), rg))
    }

    /// Left-multiplies `x` by a constant sparse matrix.
    pub fn propagate(&mut self, matrix: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let v = matrix.mul_dense(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(v, Op::Propagate(Arc::clone(matrix), x), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let rg = self.requires_grad(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    /// Per-row Euclidean norms of a matrix, `[n×1]`. The subgradient at a
    /// zero row is taken as zero.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_norms()?;
        let rg = self.requires_grad(a);
        Ok(self.push(v, Op::RowNorms(a), rg))
    }

    /// Propagates `d loss / d node` to every tracked ancestor of `loss` and
    /// adds it to their grad buffers. Calling it twice doubles the grads.
    pub fn backward(&mut self, loss: Var) -> Result<GradStatus> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(GradStatus::Detached);
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let factor = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
            self.backprop_node(idx, &g, factor, &mut adj);
            adj[idx] = Some(g);
        }

        let mut touched = 0;
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            let Some(a) = a else { continue };
            if !node.requires_grad {
                continue;
            }
            touched += 1;
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&a) {
                        *e += v;
                    }
                }
                None => {
                    node.grad = Some(
                        Tensor::new(node.value.shape().to_vec(), a)
                            .expect("adjoint matches node shape"),
                    );
                }
            }
        }
        Ok(GradStatus::Populated(touched))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], factor: f64, adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(m, n, k, g, false, bv.data(), true, &mut ga);
                    self.acc(adj, *a, &ga, factor);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(k, m, n, av.data(), true, g, false, &mut gb);
                    self.acc(adj, *b, &gb, factor);
                }
            }
            Op::Add(a, b) => {
                self.acc(adj, *a, g, factor);
                self.acc(adj, *b, g, factor);
            }
            Op::Sub(a, b) => {
                self.acc(adj, *a, g, factor);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc(adj, *b, &neg, factor);
                }
            }
            Op::Hadamard(a, b) => {
                if self.requires_grad(*a) {
                    let ga = mul(g, self.value(*b).data());
                    self.acc(adj, *a, &ga, factor);
                }
                if self.requires_grad(*b) {
                    let gb = mul(g, self.value(*a).data());
                    self.acc(adj, *b, &gb, factor);
                }
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.acc(adj, *a, &ga, factor);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.acc(adj, *a, &ga, factor);
            }
            Op::AddBias(a, b) => {
                self.acc(adj, *a, g, factor);
                if self.requires_grad(*b) {
                    let k = self.value(*b).numel();
                    let mut gb = vec![0.0; k];
                    for row in g.chunks(k) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.acc(adj, *b, &gb, factor);
                }
            }
            Op::Propagate(p, x) => {
                let cols = self.value(*x).cols();
                let gx = p.mul_transpose_slice(g, cols);
                self.acc(adj, *x, &gx, factor);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(adj, *a, &vec![g[0]; n], factor);
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|v| v * k).collect();
                self.acc(adj, *a, &ga, factor);
            }
            Op::RowNorms(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = vec![0.0; av.numel()];
                for (i, (&norm, &gi)) in out.iter().zip(g).enumerate() {
                    if norm > 0.0 {
                        let s = gi / norm;
                        for (dst, src) in ga[i * c..(i + 1) * c].iter_mut().zip(av.row(i)) {
                            *dst = s * src;
                        }
                    }
                }
                self.acc(adj, *a, &ga, factor);
            }
        }
    }

    fn acc(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64], factor: f64) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += factor * x;
                }
            }
            slot @ None => {
                *slot = Some(if factor == 1.0 {
                    g.to_vec()
                } else {
                    g.iter().map(|x| factor * x).collect()
                });
            }
        }
    }
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]), true);
        let l = tape.sum(w);
        assert_eq!(tape.backward(l).unwrap(), GradStatus::Populated(2));
        assert_eq!(tape.grad(w).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn quadratic_gives_twice_w() {
        let mut tape = Tape::new();
        let wt = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let w = tape.leaf(wt.clone(), true);
        let sq = tape.hadamard(w, w).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &wt.scale(2.0));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_rows(&[vec![0.3, -0.7]]), true);
        let s = tape.sigmoid(w);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        let once = tape.grad(w).unwrap().clone();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &once.scale(2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_loss_leaves_grads_empty() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2, 2]));
        let l = tape.sum(c);
        assert_eq!(tape.backward(l).unwrap(), GradStatus::Detached);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let t = tape.tanh(z);
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(t).item(), 0.0);
        let a = tape.constant(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![4.0, 5.0]).unwrap());
        let h = tape.elementwise(ElementwiseOp::Hadamard, a, Some(b)).unwrap();
        assert_eq!(tape.value(h).data(), &[8.0, 15.0]);
        assert!(tape.elementwise(ElementwiseOp::Add, a, None).is_err());
    }

    #[test]
    fn binary_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { op: "add", .. })));
        assert!(tape.matmul(a, a).is_ok());
        assert!(matches!(tape.matmul(b, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
