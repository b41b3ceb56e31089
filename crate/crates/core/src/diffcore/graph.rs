//! Define-by-run reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`DiffGraph`] is an append-only list of nodes. Every operation pushes a
//! node whose parents already exist, so node order is a topological order and
//! the backward pass is a single reverse sweep.

use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    RowSums,
    ColSums,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Binary(Binary, NodeId, NodeId),
    Unary(Unary, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Reduce(Reduce, NodeId),
    SelectCols(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Binary(..) => "binary",
            Op::Unary(..) => "unary",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Reduce(..) => "reduce",
            Op::SelectCols(..) => "select_cols",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor2>>,
}

impl DiffGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor2) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor2, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            requires_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.parents_of(&self.nodes[id.0].op)
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Gradient of the last backward root w.r.t. `id`, if it depends on a trainable leaf.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor2> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.tag() });
        }
        let requires_grad = self.parents_of(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn parents_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Reduce(_, a)
            | Op::SelectCols(a, _) => vec![*a],
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        let v = match kind {
            Binary::Add => x.zip_map(y, "add", |p, q| p + q)?,
            Binary::Sub => x.zip_map(y, "sub", |p, q| p - q)?,
            Binary::Mul => x.zip_map(y, "mul", |p, q| p * q)?,
            Binary::Div => {
                x.check_same_shape(y, "div")?;
                if let Some(k) = y.data().iter().position(|&d| d == 0.0) {
                    return Err(Error::Domain {
                        op: "div",
                        row: k / y.cols(),
                        col: k % y.cols(),
                        value: 0.0,
                    });
                }
                x.zip_map(y, "div", |p, q| p / q)?
            }
        };
        self.push(v, Op::Binary(kind, a, b))
    }

    pub fn unary(&mut self, kind: Unary, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let domain = |op: &'static str, bad: fn(f64) -> bool| -> Result<()> {
            if let Some(k) = x.data().iter().position(|&v| bad(v)) {
                return Err(Error::Domain {
                    op,
                    row: k / x.cols(),
                    col: k % x.cols(),
                    value: x.data()[k],
                });
            }
            Ok(())
        };
        let v = match kind {
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Tanh => x.map(f64::tanh),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => {
                domain("log", |v| v <= 0.0)?;
                x.map(f64::ln)
            }
            Unary::Sqrt => {
                domain("sqrt", |v| v < 0.0)?;
                x.map(f64::sqrt)
            }
            Unary::Square => x.map(|v| v * v),
        };
        self.push(v, Op::Unary(kind, a))
    }

    pub fn reduce(&mut self, kind: Reduce, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let v = match kind {
            Reduce::Sum => Tensor2::scalar(x.sum()),
            Reduce::Mean => Tensor2::scalar(x.sum() / x.data().len().max(1) as f64),
            Reduce::RowSums => x.row_sums(),
            Reduce::ColSums => x.col_sums(),
        };
        self.push(v, Op::Reduce(kind, a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Shift(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Square, a)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.reduce(Reduce::Sum, a)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.reduce(Reduce::Mean, a)
    }

    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.reduce(Reduce::RowSums, a)
    }

    pub fn col_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.reduce(Reduce::ColSums, a)
    }

    pub fn select_cols(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a).select_cols(indices)?;
        self.push(v, Op::SelectCols(a, indices.to_vec()))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hcat(self.value(b))?;
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Repeats a `1 x c` row `rows` times via `ones(rows, 1) · row`.
    pub fn repeat_rows(&mut self, row: NodeId, rows: usize) -> Result<NodeId> {
        let ones = self.constant(Tensor2::ones(rows, 1));
        self.matmul(ones, row)
    }

    /// Repeats a `r x 1` column `cols` times via `col · ones(1, cols)`.
    pub fn repeat_cols(&mut self, col: NodeId, cols: usize) -> Result<NodeId> {
        let ones = self.constant(Tensor2::ones(1, cols));
        self.matmul(col, ones)
    }

    /// Reverse sweep from a scalar root. Gradients from any earlier call are discarded.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward root must be 1x1, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            self.grads[root.0] = Some(Tensor2::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && grad.is_none() {
                let (r, c) = node.value.shape();
                *grad = Some(Tensor2::zeros(r, c));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor2) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor2) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let ga = g.matmul(&self.value(b).transpose())?;
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let gb = self.value(a).transpose().matmul(g)?;
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(a, g.transpose()),
            Op::Binary(kind, a, b) => {
                let (ga, gb) = {
                    let (x, y) = (self.value(a), self.value(b));
                    match kind {
                        Binary::Add => (g.clone(), g.clone()),
                        Binary::Sub => (g.clone(), g.scale(-1.0)),
                        Binary::Mul => (g.zip_map(y, "mul", |g, y| g * y)?, g.zip_map(x, "mul", |g, x| g * x)?),
                        Binary::Div => {
                            let ga = g.zip_map(y, "div", |g, y| g / y)?;
                            let mut gb = g.zip_map(x, "div", |g, x| g * x)?;
                            for (v, d) in gb.data_mut().iter_mut().zip(y.data()) {
                                *v = -*v / (d * d);
                            }
                            (ga, gb)
                        }
                    }
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Unary(kind, a) => {
                let x = self.value(a);
                let y = &self.nodes[i].value;
                let ga = match kind {
                    Unary::Relu => g.zip_map(x, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?,
                    Unary::Tanh => g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?,
                    Unary::Exp => g.zip_map(y, "exp", |g, y| g * y)?,
                    Unary::Log => g.zip_map(x, "log", |g, x| g / x)?,
                    Unary::Sqrt => g.zip_map(y, "sqrt", |g, y| g / (2.0 * y))?,
                    Unary::Square => g.zip_map(x, "square", |g, x| 2.0 * g * x)?,
                };
                self.accumulate(a, ga);
            }
            Op::Scale(a, s) => self.accumulate(a, g.scale(s)),
            Op::Shift(a) => self.accumulate(a, g.clone()),
            Op::Reduce(kind, a) => {
                let (r, c) = self.value(a).shape();
                let ga = match kind {
                    Reduce::Sum => Tensor2::full(r, c, g.item()),
                    Reduce::Mean => Tensor2::full(r, c, g.item() / (r * c).max(1) as f64),
                    Reduce::RowSums => Tensor2::from_fn(r, c, |i, _| g.get(i, 0)),
                    Reduce::ColSums => Tensor2::from_fn(r, c, |_, j| g.get(0, j)),
                };
                self.accumulate(a, ga);
            }
            Op::SelectCols(a, indices) => {
                let (r, c) = self.value(a).shape();
                let mut ga = Tensor2::zeros(r, c);
                for row in 0..r {
                    for (k, &col) in indices.iter().enumerate() {
                        let v = ga.get(row, col) + g.get(row, k);
                        ga.set(row, col, v);
                    }
                }
                self.accumulate(a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let ga = Tensor2::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                let gb = Tensor2::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j));
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = DiffGraph::new();
        let a = g.constant(t(&[&[1.0, 2.0]]));
        let b = g.constant(t(&[&[3.0, 4.0]]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &t(&[&[4.0, 6.0]]));

        let x = g.constant(t(&[&[-1.0, 2.0]]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &t(&[&[0.0, 2.0]]));

        let n = g.constant(t(&[&[1.0, 1.0]]));
        let d = g.constant(t(&[&[2.0, 4.0]]));
        let q = g.div(n, d).unwrap();
        assert_eq!(g.value(q), &t(&[&[0.5, 0.25]]));
    }

    #[test]
    fn domain_errors_name_the_index() {
        let mut g = DiffGraph::new();
        let n = g.constant(t(&[&[1.0, 1.0]]));
        let d = g.constant(t(&[&[2.0, 0.0]]));
        match g.div(n, d).unwrap_err() {
            Error::Domain { op, row, col, .. } => assert_eq!((op, row, col), ("div", 0, 1)),
            e => panic!("unexpected {e}"),
        }
        let x = g.constant(t(&[&[1.0], &[-2.0]]));
        match g.log(x).unwrap_err() {
            Error::Domain { op, row, col, .. } => assert_eq!((op, row, col), ("log", 1, 0)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut g = DiffGraph::new();
        let a = g.constant(Tensor2::zeros(1, 2));
        let b = g.constant(Tensor2::zeros(2, 1));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn reductions() {
        let mut g = DiffGraph::new();
        let x = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = g.sum(x).unwrap();
        let r = g.row_sums(x).unwrap();
        let c = g.col_sums(x).unwrap();
        assert_eq!(g.value(s).item(), 10.0);
        assert_eq!(g.value(r), &t(&[&[3.0], &[7.0]]));
        assert_eq!(g.value(c), &t(&[&[4.0, 6.0]]));
        let y = g.constant(t(&[&[2.0, 4.0]]));
        let m = g.mean(y).unwrap();
        assert_eq!(g.value(m).item(), 3.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = DiffGraph::new();
        let x = g.param(t(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor2::ones(2, 2));
    }

    #[test]
    fn backward_of_square() {
        let mut g = DiffGraph::new();
        let x = g.param(t(&[&[3.0]]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        // a second call starts from zero rather than accumulating
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = DiffGraph::new();
        let x = g.param(Tensor2::ones(2, 2));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = DiffGraph::new();
        let w = g.param(t(&[&[2.0]]));
        let c = g.constant(t(&[&[5.0]]));
        let p = g.mul(w, c).unwrap();
        g.backward(p).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap().item(), 5.0);
    }

    #[test]
    fn parents_precede_children() {
        let mut g = DiffGraph::new();
        let a = g.param(Tensor2::ones(2, 2));
        let b = g.tanh(a).unwrap();
        let c = g.matmul(a, b).unwrap();
        for id in [a, b, c] {
            assert!(g.parents(id).iter().all(|p| p.index() < id.index()));
        }
        assert_eq!(g.op_tag(c), "matmul");
    }
}
