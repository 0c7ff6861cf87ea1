//! Computation graph with a numeric reverse pass and symbolic input gradients.
//!
//! Nodes are appended in topological order, so a node's parents always have
//! smaller ids. Shapes are inferred when a node is added; a mismatch is
//! remembered and reported by [`Graph::forward`] together with the node that
//! caused it, which keeps the building API free of `?` noise.
//!
//! [`Graph::input_gradient`] differentiates a scalar node with respect to an
//! input by appending the adjoint computation as ordinary nodes. The result
//! is itself differentiable, so running [`Graph::backward`] from a loss built
//! on top of it yields second-order parameter gradients.

use std::collections::{BTreeMap, HashMap};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Parameter(String),
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    /// `1 - tanh(a)^2`
    TanhDeriv(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Recip(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    /// Sum of all entries.
    Sum(NodeId),
    /// `[m, n] -> [1, n]`
    SumRows(NodeId),
    /// `[m, n] -> [m]`
    SumCols(NodeId),
    /// Scalar to the given shape.
    Broadcast(NodeId, Vec<usize>),
    /// `[1, n] -> [m, n]`
    BroadcastRows(NodeId, usize),
    /// `[m]` or `[m, 1]` -> `[m, n]`
    BroadcastCols(NodeId, usize),
    /// Row-wise concatenation.
    Concat(Vec<NodeId>),
    SliceRows {
        src: NodeId,
        start: usize,
        len: usize,
    },
    /// Zero matrix of `rows` rows with `src` placed at row `start`.
    PadRows {
        src: NodeId,
        start: usize,
        rows: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Parameter(_) => "parameter",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Tanh(_) => "tanh",
            Op::TanhDeriv(_) => "tanh-derivative",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Square(_) => "square",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Recip(_) => "recip",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum-rows",
            Op::SumCols(_) => "sum-cols",
            Op::Broadcast(..) => "broadcast",
            Op::BroadcastRows(..) => "broadcast-rows",
            Op::BroadcastCols(..) => "broadcast-cols",
            Op::Concat(_) => "concat",
            Op::SliceRows { .. } => "slice-rows",
            Op::PadRows { .. } => "pad-rows",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Parameter(_) | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Tanh(a)
            | Op::TanhDeriv(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Square(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Recip(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Broadcast(a, _)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::SliceRows { src, .. } | Op::PadRows { src, .. } => vec![*src],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, NodeId>,
    shape_error: Option<(usize, &'static str, String)>,
}

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }
}

pub type Bindings = HashMap<String, Tensor>;

fn dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1]),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = self.nodes.len();
        let shape = match self.infer(&op) {
            Ok(s) => s,
            Err(detail) => {
                if self.shape_error.is_none() {
                    self.shape_error = Some((id, op.name(), detail));
                }
                vec![]
            }
        };
        self.nodes.push(Node { op, shape });
        NodeId(id)
    }

    fn infer(&self, op: &Op) -> std::result::Result<Vec<usize>, String> {
        let s = |id: &NodeId| self.nodes[id.0].shape.clone();
        let same = |a: &NodeId, b: &NodeId| -> std::result::Result<Vec<usize>, String> {
            let (sa, sb) = (s(a), s(b));
            if dims(&sa) == dims(&sb) {
                Ok(sa)
            } else {
                Err(format!("operands have shapes {sa:?} and {sb:?}"))
            }
        };
        match op {
            Op::Input(_) | Op::Parameter(_) => unreachable!("declared with explicit shape"),
            Op::Constant(t) => Ok(t.shape().to_vec()),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => same(a, b),
            Op::MatMul(a, b) => {
                let (sa, sb) = (s(a), s(b));
                let (m, k) = dims(&sa);
                let (k2, n) = dims(&sb);
                if k != k2 {
                    return Err(format!("cannot multiply {sa:?} by {sb:?}"));
                }
                Ok(if sb.len() == 2 { vec![m, n] } else { vec![m] })
            }
            Op::Transpose(a) => {
                let (m, n) = dims(&s(a));
                Ok(vec![n, m])
            }
            Op::Tanh(a)
            | Op::TanhDeriv(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Square(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Recip(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a) => Ok(s(a)),
            Op::Sum(_) => Ok(vec![]),
            Op::SumRows(a) => Ok(vec![1, dims(&s(a)).1]),
            Op::SumCols(a) => Ok(vec![dims(&s(a)).0]),
            Op::Broadcast(a, shape) => {
                if dims(&s(a)) != (1, 1) {
                    return Err(format!("broadcast source must be scalar, got {:?}", s(a)));
                }
                Ok(shape.clone())
            }
            Op::BroadcastRows(a, m) => {
                let (r, n) = dims(&s(a));
                if r != 1 {
                    return Err(format!("broadcast-rows source must have one row, got {:?}", s(a)));
                }
                Ok(vec![*m, n])
            }
            Op::BroadcastCols(a, n) => {
                let (m, c) = dims(&s(a));
                if c != 1 {
                    return Err(format!("broadcast-cols source must have one column, got {:?}", s(a)));
                }
                Ok(vec![m, *n])
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err("empty concat".into());
                }
                let first = s(&parts[0]);
                let cols = dims(&first).1;
                let mut rows = 0;
                for p in parts {
                    let (r, c) = dims(&s(p));
                    if c != cols {
                        return Err(format!("concat parts disagree on columns: {} vs {}", c, cols));
                    }
                    rows += r;
                }
                Ok(if first.len() == 2 { vec![rows, cols] } else { vec![rows] })
            }
            Op::SliceRows { src, start, len } => {
                let sh = s(src);
                let (r, c) = dims(&sh);
                if start + len > r {
                    return Err(format!("rows {}..{} out of range for {:?}", start, start + len, sh));
                }
                Ok(if sh.len() == 2 { vec![*len, c] } else { vec![*len] })
            }
            Op::PadRows { src, start, rows } => {
                let sh = s(src);
                let (r, c) = dims(&sh);
                if start + r > *rows {
                    return Err(format!("cannot place {:?} at row {} of {} rows", sh, start, rows));
                }
                Ok(if sh.len() == 2 { vec![*rows, c] } else { vec![*rows] })
            }
        }
    }

    /// Declares (or returns the existing) input of the given name.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.named_leaf(name, shape, Op::Input(name.to_string()))
    }

    /// Declares (or returns the existing) parameter of the given name.
    pub fn parameter(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.named_leaf(name, shape, Op::Parameter(name.to_string()))
    }

    fn named_leaf(&mut self, name: &str, shape: &[usize], op: Op) -> NodeId {
        if let Some(&id) = self.named.get(name) {
            if self.nodes[id.0].shape != shape && self.shape_error.is_none() {
                self.shape_error = Some((
                    id.0,
                    op.name(),
                    format!("`{}` redeclared as {:?}, was {:?}", name, shape, self.nodes[id.0].shape),
                ));
            }
            return id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape: shape.to_vec(),
        });
        self.named.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn tanh_deriv(&mut self, a: NodeId) -> NodeId {
        self.push(Op::TanhDeriv(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Cos(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Offset(a, c))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Recip(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumCols(a))
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Broadcast(a, shape.to_vec()))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        self.push(Op::BroadcastRows(a, rows))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        self.push(Op::BroadcastCols(a, cols))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceRows { src, start, len })
    }

    pub fn pad_rows(&mut self, src: NodeId, start: usize, rows: usize) -> NodeId {
        self.push(Op::PadRows { src, start, rows })
    }

    /// Column-wise inner product of two `[d, n]` nodes, giving `[1, n]`.
    pub fn col_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum_rows(m)
    }

    /// Scales each column of `a` (`[d, n]`) by the matching entry of `s` (`[1, n]`).
    pub fn col_scale(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let d = dims(self.shape(a)).0;
        let b = self.broadcast_rows(s, d);
        self.mul(a, b)
    }

    /// Evaluates every node.
    pub fn forward(&self, bindings: &Bindings, params: &ParameterStore) -> Result<Evaluation> {
        self.forward_prefix(bindings, params, self.nodes.len())
    }

    /// Evaluates only the first `count` nodes; later nodes cannot influence them.
    pub fn forward_prefix(&self, bindings: &Bindings, params: &ParameterStore, count: usize) -> Result<Evaluation> {
        if let Some((node, op, detail)) = &self.shape_error {
            return Err(Error::Shape {
                node: *node,
                op,
                detail: detail.clone(),
            });
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(count);
        for (i, node) in self.nodes.iter().enumerate().take(count) {
            let v = |id: &NodeId| &values[id.0];
            let out = match &node.op {
                Op::Input(name) => {
                    let t = bindings.get(name).ok_or_else(|| Error::Unbound {
                        node: i,
                        name: name.clone(),
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: i,
                            op: "input",
                            detail: format!("`{}` bound to {:?}, declared {:?}", name, t.shape(), node.shape),
                        });
                    }
                    t.clone()
                }
                Op::Parameter(name) => {
                    let t = params.get(name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: i,
                            op: "parameter",
                            detail: format!("`{}` stored as {:?}, declared {:?}", name, t.shape(), node.shape),
                        });
                    }
                    t.clone()
                }
                Op::Constant(t) => t.clone(),
                Op::Add(a, b) => v(a).zip(v(b), |x, y| x + y),
                Op::Sub(a, b) => v(a).zip(v(b), |x, y| x - y),
                Op::Mul(a, b) => v(a).zip(v(b), |x, y| x * y),
                Op::MatMul(a, b) => v(a).matmul(v(b)),
                Op::Transpose(a) => v(a).transpose(),
                Op::Tanh(a) => v(a).map(f64::tanh),
                Op::TanhDeriv(a) => v(a).map(|x| {
                    let t = x.tanh();
                    1.0 - t * t
                }),
                Op::Sin(a) => v(a).map(f64::sin),
                Op::Cos(a) => v(a).map(f64::cos),
                Op::Square(a) => v(a).map(|x| x * x),
                Op::Scale(a, c) => v(a).map(|x| c * x),
                Op::Offset(a, c) => v(a).map(|x| x + c),
                Op::Recip(a) => v(a).map(|x| 1.0 / x),
                Op::Softplus(a) => v(a).map(softplus),
                Op::Sigmoid(a) => v(a).map(sigmoid),
                Op::Sum(a) => Tensor::scalar(v(a).sum()),
                Op::SumRows(a) => {
                    let t = v(a);
                    let (m, n) = (t.rows(), t.cols());
                    let mut out = vec![0.0; n];
                    for r in 0..m {
                        for (o, x) in out.iter_mut().zip(&t.data()[r * n..(r + 1) * n]) {
                            *o += x;
                        }
                    }
                    Tensor::matrix(1, n, out)
                }
                Op::SumCols(a) => {
                    let t = v(a);
                    let n = t.cols();
                    Tensor::vector(t.data().chunks(n).map(|row| row.iter().sum()).collect())
                }
                Op::Broadcast(a, shape) => Tensor::filled(shape, v(a).item()),
                Op::BroadcastRows(a, m) => {
                    let row = v(a).data();
                    let mut data = Vec::with_capacity(m * row.len());
                    for _ in 0..*m {
                        data.extend_from_slice(row);
                    }
                    Tensor::matrix(*m, row.len(), data)
                }
                Op::BroadcastCols(a, n) => {
                    let col = v(a).data();
                    let data = col.iter().flat_map(|&x| std::iter::repeat_n(x, *n)).collect();
                    Tensor::matrix(col.len(), *n, data)
                }
                Op::Concat(parts) => {
                    let data = parts.iter().flat_map(|p| v(p).data().iter().copied()).collect();
                    Tensor::new(node.shape.clone(), data).expect("concat shape")
                }
                Op::SliceRows { src, start, len } => {
                    let t = v(src);
                    let c = t.cols();
                    let data = t.data()[start * c..(start + len) * c].to_vec();
                    Tensor::new(node.shape.clone(), data).expect("slice shape")
                }
                Op::PadRows { src, start, .. } => {
                    let t = v(src);
                    let mut out = Tensor::zeros(&node.shape);
                    let off = start * t.cols();
                    out.data_mut()[off..off + t.len()].copy_from_slice(t.data());
                    out
                }
            };
            if !out.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("node {} ({})", i, self.describe(NodeId(i))),
                });
            }
            values.push(out);
        }
        Ok(Evaluation { values })
    }

    /// Short human-readable label for error messages.
    pub fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Input(n) => format!("input `{n}`"),
            Op::Parameter(n) => format!("parameter `{n}`"),
            op => op.name().to_string(),
        }
    }

    /// Reverse pass from a scalar node; returns the gradient of every declared parameter.
    ///
    /// Parameters that do not influence `output` get a zero gradient.
    pub fn backward(&self, eval: &Evaluation, output: NodeId) -> Result<BTreeMap<String, Tensor>> {
        self.backward_seeded(eval, output, 1.0)
    }

    pub fn backward_seeded(&self, eval: &Evaluation, output: NodeId, seed: f64) -> Result<BTreeMap<String, Tensor>> {
        self.require_scalar(output)?;
        let n = output.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[output.0] = Some(Tensor::filled(&self.nodes[output.0].shape, seed));
        let val = |id: NodeId| eval.value(id);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let acc = |id: NodeId, t: Tensor, adj: &mut Vec<Option<Tensor>>| match &mut adj[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Input(_) | Op::Constant(_) => {}
                Op::Parameter(_) => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut adj);
                    acc(*b, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x), &mut adj);
                    acc(*a, g, &mut adj);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip(val(*b), |x, y| x * y), &mut adj);
                    acc(*b, g.zip(val(*a), |x, y| x * y), &mut adj);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let gm = g.clone().reshaped(&[va.rows(), vb.cols()]);
                    let ga = gm.matmul(&vb.transpose()).reshaped(va.shape());
                    let gb = va.transpose().matmul(&gm).reshaped(vb.shape());
                    acc(*a, ga, &mut adj);
                    acc(*b, gb, &mut adj);
                }
                Op::Transpose(a) => {
                    let t = g.transpose().reshaped(val(*a).shape());
                    acc(*a, t, &mut adj);
                }
                Op::Tanh(a) => {
                    let y = eval.value(NodeId(i));
                    acc(*a, g.zip(y, |x, t| x * (1.0 - t * t)), &mut adj);
                }
                Op::TanhDeriv(a) => {
                    let d = val(*a).map(|x| {
                        let t = x.tanh();
                        -2.0 * t * (1.0 - t * t)
                    });
                    acc(*a, g.zip(&d, |x, y| x * y), &mut adj);
                }
                Op::Sin(a) => acc(*a, g.zip(val(*a), |x, y| x * y.cos()), &mut adj),
                Op::Cos(a) => acc(*a, g.zip(val(*a), |x, y| -x * y.sin()), &mut adj),
                Op::Square(a) => acc(*a, g.zip(val(*a), |x, y| 2.0 * x * y), &mut adj),
                Op::Scale(a, c) => acc(*a, g.map(|x| c * x), &mut adj),
                Op::Offset(a, _) => acc(*a, g, &mut adj),
                Op::Recip(a) => acc(*a, g.zip(val(*a), |x, y| -x / (y * y)), &mut adj),
                Op::Softplus(a) => acc(*a, g.zip(val(*a), |x, y| x * sigmoid(y)), &mut adj),
                Op::Sigmoid(a) => {
                    let s = eval.value(NodeId(i));
                    acc(*a, g.zip(s, |x, y| x * y * (1.0 - y)), &mut adj);
                }
                Op::Sum(a) => {
                    let t = Tensor::filled(val(*a).shape(), g.item());
                    acc(*a, t, &mut adj);
                }
                Op::SumRows(a) => {
                    let src = val(*a);
                    let (m, ncol) = (src.rows(), src.cols());
                    let mut data = Vec::with_capacity(m * ncol);
                    for _ in 0..m {
                        data.extend_from_slice(g.data());
                    }
                    acc(*a, Tensor::new(src.shape().to_vec(), data).unwrap(), &mut adj);
                }
                Op::SumCols(a) => {
                    let src = val(*a);
                    let ncol = src.cols();
                    let data = g.data().iter().flat_map(|&x| std::iter::repeat_n(x, ncol)).collect();
                    acc(*a, Tensor::new(src.shape().to_vec(), data).unwrap(), &mut adj);
                }
                Op::Broadcast(a, _) => acc(*a, Tensor::filled(val(*a).shape(), g.sum()), &mut adj),
                Op::BroadcastRows(a, _) => {
                    let ncol = g.cols();
                    let mut out = vec![0.0; ncol];
                    for row in g.data().chunks(ncol) {
                        for (o, x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), out).unwrap(), &mut adj);
                }
                Op::BroadcastCols(a, _) => {
                    let ncol = g.cols();
                    let out = g.data().chunks(ncol).map(|r| r.iter().sum()).collect();
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), out).unwrap(), &mut adj);
                }
                Op::Concat(parts) => {
                    let ncol = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let src = val(*p);
                        let len = src.len();
                        let t = Tensor::new(src.shape().to_vec(), g.data()[off..off + len].to_vec()).unwrap();
                        off += src.rows() * ncol;
                        acc(*p, t, &mut adj);
                    }
                }
                Op::SliceRows { src, start, .. } => {
                    let s = val(*src);
                    let mut t = Tensor::zeros(s.shape());
                    let off = start * s.cols();
                    t.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                    acc(*src, t, &mut adj);
                }
                Op::PadRows { src, start, .. } => {
                    let s = val(*src);
                    let off = start * s.cols();
                    let t = Tensor::new(s.shape().to_vec(), g.data()[off..off + s.len()].to_vec()).unwrap();
                    acc(*src, t, &mut adj);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Parameter(name) = &node.op {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(&node.shape));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }

    fn require_scalar(&self, id: NodeId) -> Result<()> {
        let shape = &self.nodes[id.0].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar {
                node: id.0,
                shape: shape.clone(),
            });
        }
        Ok(())
    }

    /// Appends nodes computing the gradient of scalar `output` with respect to input `wrt`.
    ///
    /// The returned node has the shape of `wrt`. Parameter nodes are shared with
    /// the original computation, so the gradient remains differentiable in the
    /// parameters.
    pub fn input_gradient(&mut self, output: NodeId, wrt: NodeId) -> Result<NodeId> {
        self.require_scalar(output)?;
        if !matches!(self.nodes[wrt.0].op, Op::Input(_)) {
            return Err(Error::Unsupported {
                node: wrt.0,
                reason: "gradients are taken with respect to input nodes only".into(),
            });
        }
        let n = output.0 + 1;
        let mut depends = vec![false; n];
        for i in 0..n {
            depends[i] = i == wrt.0 || self.nodes[i].op.parents().iter().any(|p| p.0 < n && depends[p.0]);
        }
        let wrt_shape = self.nodes[wrt.0].shape.clone();
        if !depends[output.0] {
            return Ok(self.constant(Tensor::zeros(&wrt_shape)));
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        let out_shape = self.nodes[output.0].shape.clone();
        adj[output.0] = Some(self.constant(Tensor::filled(&out_shape, 1.0)));

        for i in (0..n).rev() {
            if i == wrt.0 || !depends[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let me = NodeId(i);
            let op = self.nodes[i].op.clone();
            let mut contrib: Vec<(NodeId, NodeId)> = Vec::new();
            let dep = |id: &NodeId| depends[id.0];
            match op {
                Op::Input(_) | Op::Parameter(_) | Op::Constant(_) => {}
                Op::Add(a, b) => {
                    if dep(&a) {
                        contrib.push((a, g));
                    }
                    if dep(&b) {
                        contrib.push((b, g));
                    }
                }
                Op::Sub(a, b) => {
                    if dep(&a) {
                        contrib.push((a, g));
                    }
                    if dep(&b) {
                        let neg = self.scale(g, -1.0);
                        contrib.push((b, neg));
                    }
                }
                Op::Mul(a, b) => {
                    if dep(&a) {
                        let t = self.mul(g, b);
                        contrib.push((a, t));
                    }
                    if dep(&b) {
                        let t = self.mul(g, a);
                        contrib.push((b, t));
                    }
                }
                Op::MatMul(a, b) => {
                    let (ra, cb) = (dims(self.shape(a)).0, dims(self.shape(b)).1);
                    let gm = if self.shape(g).len() == 2 {
                        g
                    } else {
                        // rank-1 adjoint of a matrix-vector product, viewed as a column
                        let t = self.transpose(g);
                        self.transpose(t)
                    };
                    debug_assert_eq!(dims(self.shape(gm)), (ra, cb));
                    if dep(&a) {
                        let bt = self.transpose(b);
                        let t = self.matmul(gm, bt);
                        contrib.push((a, t));
                    }
                    if dep(&b) {
                        let at = self.transpose(a);
                        let t = self.matmul(at, g);
                        contrib.push((b, t));
                    }
                }
                Op::Transpose(a) => {
                    let t = self.transpose(g);
                    contrib.push((a, t));
                }
                Op::Tanh(a) => {
                    let d = self.tanh_deriv(a);
                    let t = self.mul(g, d);
                    contrib.push((a, t));
                }
                Op::TanhDeriv(a) => {
                    let th = self.tanh(a);
                    let p = self.mul(th, me);
                    let d = self.scale(p, -2.0);
                    let t = self.mul(g, d);
                    contrib.push((a, t));
                }
                Op::Sin(a) => {
                    let c = self.cos(a);
                    let t = self.mul(g, c);
                    contrib.push((a, t));
                }
                Op::Cos(a) => {
                    let s = self.sin(a);
                    let ns = self.scale(s, -1.0);
                    let t = self.mul(g, ns);
                    contrib.push((a, t));
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0);
                    let t = self.mul(g, two_a);
                    contrib.push((a, t));
                }
                Op::Scale(a, c) => {
                    let t = self.scale(g, c);
                    contrib.push((a, t));
                }
                Op::Offset(a, _) => contrib.push((a, g)),
                Op::Recip(a) => {
                    let sq = self.square(me);
                    let d = self.scale(sq, -1.0);
                    let t = self.mul(g, d);
                    contrib.push((a, t));
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(a);
                    let t = self.mul(g, s);
                    contrib.push((a, t));
                }
                Op::Sigmoid(a) => {
                    let sq = self.square(me);
                    let d = self.sub(me, sq);
                    let t = self.mul(g, d);
                    contrib.push((a, t));
                }
                Op::Sum(a) => {
                    let shape = self.shape(a).to_vec();
                    let t = self.broadcast(g, &shape);
                    contrib.push((a, t));
                }
                Op::SumRows(a) => {
                    let rows = dims(self.shape(a)).0;
                    let t = self.broadcast_rows(g, rows);
                    contrib.push((a, t));
                }
                Op::SumCols(a) => {
                    let cols = dims(self.shape(a)).1;
                    let t = self.broadcast_cols(g, cols);
                    contrib.push((a, t));
                }
                Op::Broadcast(a, _) => {
                    let t = self.sum(g);
                    contrib.push((a, t));
                }
                Op::BroadcastRows(a, _) => {
                    let t = self.sum_rows(g);
                    contrib.push((a, t));
                }
                Op::BroadcastCols(a, _) => {
                    let t = self.sum_cols(g);
                    contrib.push((a, t));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = dims(self.shape(p)).0;
                        if dep(&p) {
                            let t = self.slice_rows(g, off, r);
                            contrib.push((p, t));
                        }
                        off += r;
                    }
                }
                Op::SliceRows { src, start, .. } => {
                    let rows = dims(self.shape(src)).0;
                    let t = self.pad_rows(g, start, rows);
                    contrib.push((src, t));
                }
                Op::PadRows { src, start, .. } => {
                    let len = dims(self.shape(src)).0;
                    let t = self.slice_rows(g, start, len);
                    contrib.push((src, t));
                }
            }
            for (target, t) in contrib {
                adj[target.0] = Some(match adj[target.0] {
                    Some(prev) => self.add(prev, t),
                    None => t,
                });
            }
        }
        if let Some((node, op, detail)) = &self.shape_error {
            return Err(Error::Shape {
                node: *node,
                op,
                detail: detail.clone(),
            });
        }
        let grad = adj[wrt.0].expect("output depends on wrt");
        // adjoints of rank-1 values may come back as columns; normalise to the input's shape
        if self.shape(grad) != wrt_shape.as_slice() {
            let zero = self.constant(Tensor::zeros(&wrt_shape));
            return Ok(self.add(zero, grad));
        }
        Ok(grad)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
