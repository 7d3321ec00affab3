//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable computation in the crate is recorded on a [`Tape`] as a
//! sequence of primitive ops. Nodes only ever reference earlier nodes, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! ```
//! use pumkit::autodiff::Tape;
//! use pumkit::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
//! let sq = tape.square(x).unwrap();
//! let y = tape.sum(sq).unwrap();
//! let grads = tape.backward(y, &[x]).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use smallvec::SmallVec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Variance epsilon used by the layer-norm core.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// `[m,k] x [k]` or `[m,k] x [k,n]`.
    MatMul,
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    /// Sum of all entries, producing a one-element tensor.
    Sum,
    Mean,
    /// Concatenation along the first axis.
    Concat,
    /// `scale(s, x) = s * x` for a one-element `s`.
    Scale,
    /// Softmax over the last axis.
    Softmax,
    /// `(x - mean) / sqrt(var + LAYER_NORM_EPS)` over the last axis.
    LayerNorm,
    /// `max(x, c)`; the gradient is zero wherever the clamp is active.
    ClampMin(f64),
}

/// Payload-free tag for an [`Op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    Concat,
    Scale,
    Softmax,
    LayerNorm,
    ClampMin,
}

impl Op {
    pub fn kind(self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::MatMul => OpKind::MatMul,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softplus => OpKind::Softplus,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Square => OpKind::Square,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Concat => OpKind::Concat,
            Op::Scale => OpKind::Scale,
            Op::Softmax => OpKind::Softmax,
            Op::LayerNorm => OpKind::LayerNorm,
            Op::ClampMin(_) => OpKind::ClampMin,
        }
    }

    fn name(self) -> &'static str {
        self.kind().name()
    }
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::ClampMin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::ClampMin => "clamp_min",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op kind '{s}'")))
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: SmallVec<[NodeId; 2]>,
    value: Tensor,
}

/// Append-only record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    sign_flip: Option<OpKind>,
}

/// Gradients keyed by the node they were requested for.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass negates the derivative rule of `kind`.
    ///
    /// Only meant for checking that gradient verification catches broken rules.
    #[doc(hidden)]
    pub fn with_sign_flip(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            sign_flip: Some(kind),
        }
    }

    #[doc(hidden)]
    pub fn sign_flip(&self) -> Option<OpKind> {
        self.sign_flip
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

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Records a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: SmallVec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::from_parts(vec![1], vec![v]))
    }

    /// Records `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op == Op::Leaf {
            return Err(Error::Contract("leaves are recorded with Tape::leaf".into()));
        }
        let id = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|n| n.0 >= id) {
            return Err(Error::Contract(format!("unknown input node {}", bad.0)));
        }
        let value = {
            let values: SmallVec<[&Tensor; 2]> = inputs.iter().map(|n| &self.nodes[n.0].value).collect();
            forward(op, &values)?
        };
        if !value.is_finite() {
            return Err(Error::Numeric {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().copied().collect(),
            value,
        });
        Ok(NodeId(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softplus, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat, parts)
    }

    /// `s * x` where `s` is a one-element node.
    pub fn scale(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Scale, &[s, x])
    }

    /// `c * x` for a constant `c`.
    pub fn scale_by(&mut self, c: f64, x: NodeId) -> Result<NodeId> {
        let s = self.constant(c);
        self.scale(s, x)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LayerNorm, &[a])
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::ClampMin(c), &[a])
    }

    /// Smallest distance of any relu / clamp input to its kink.
    ///
    /// Finite-difference checks are only meaningful when this is comfortably
    /// larger than the perturbation.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let c = match node.op {
                Op::Relu => 0.0,
                Op::ClampMin(c) => c,
                _ => continue,
            };
            let input = &self.nodes[node.inputs[0].0].value;
            for v in input.data() {
                margin = margin.min((v - c).abs());
            }
        }
        margin
    }

    /// Which side of its kink every ReLU / clamp input lies on.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            let c = match node.op {
                Op::Relu => 0.0,
                Op::ClampMin(c) => c,
                _ => continue,
            };
            pattern.extend(self.nodes[node.inputs[0].0].value.data().iter().map(|&v| v > c));
        }
        pattern
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = if node.op == Op::Leaf {
                node.value.clone()
            } else {
                let ins: SmallVec<[&Tensor; 2]> = node.inputs.iter().map(|n| &values[n.0]).collect();
                forward(node.op, &ins)?
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse accumulation of `d root / d param` for every requested node.
    ///
    /// `root` must hold a single element. Parameters that do not influence the
    /// root receive zero gradients.
    pub fn backward(&self, root: NodeId, params: &[NodeId]) -> Result<GradientMap> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown root node {}", root.0)));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for k in (0..=root.0).rev() {
            let (lower, upper) = adj.split_at_mut(k);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[k];
            if node.op == Op::Leaf {
                continue;
            }
            let sign = if self.sign_flip == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            self.propagate(node, g, sign, lower);
        }

        let mut grads = HashMap::with_capacity(params.len());
        for &p in params {
            if p.0 >= self.nodes.len() {
                return Err(Error::Contract(format!("unknown parameter node {}", p.0)));
            }
            let shape = self.nodes[p.0].value.shape().to_vec();
            let g = match adj.get(p.0).and_then(|a| a.clone()) {
                Some(data) => Tensor::from_parts(shape, data),
                None => Tensor::zeros(&shape),
            };
            grads.insert(p, g);
        }
        Ok(GradientMap { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], sign: f64, adj: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[node.inputs[i].0].value.data();
        let out = node.value.data();
        let ins = &node.inputs;
        match node.op {
            Op::Leaf => {}
            Op::Add => {
                accumulate(adj, ins[0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g)
                });
                accumulate(adj, ins[1], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g)
                });
            }
            Op::Sub => {
                accumulate(adj, ins[0], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g)
                });
                accumulate(adj, ins[1], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= sign * g)
                });
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                accumulate(adj, ins[0], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += sign * g[i] * b[i];
                    }
                });
                accumulate(adj, ins[1], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += sign * g[i] * a[i];
                    }
                });
            }
            Op::MatMul => {
                let a_t = &self.nodes[ins[0].0].value;
                let b_t = &self.nodes[ins[1].0].value;
                let (m, k) = (a_t.shape()[0], a_t.shape()[1]);
                let n = if b_t.shape().len() == 1 { 1 } else { b_t.shape()[1] };
                let (a, b) = (a_t.data(), b_t.data());
                accumulate(adj, ins[0], m * k, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b[p * n + j];
                            }
                            da[i * k + p] += sign * s;
                        }
                    }
                });
                accumulate(adj, ins[1], k * n, |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = sign * a[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Relu => {
                let a = val(0);
                accumulate(adj, ins[0], g.len(), |d| {
                    for i in 0..d.len() {
                        if a[i] > 0.0 {
                            d[i] += sign * g[i];
                        }
                    }
                });
            }
            Op::ClampMin(c) => {
                let a = val(0);
                accumulate(adj, ins[0], g.len(), |d| {
                    for i in 0..d.len() {
                        if a[i] > c {
                            d[i] += sign * g[i];
                        }
                    }
                });
            }
            Op::Sigmoid => {
                accumulate(adj, ins[0], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += sign * g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Softplus => {
                let a = val(0);
                accumulate(adj, ins[0], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += sign * g[i] * sigmoid(a[i]);
                    }
                });
            }
            Op::Exp => {
                accumulate(adj, ins[0], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += sign * g[i] * out[i];
                    }
                });
            }
            Op::Log => {
                let a = val(0);
                accumulate(adj, ins[0], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += sign * g[i] / a[i];
                    }
                });
            }
            Op::Square => {
                let a = val(0);
                accumulate(adj, ins[0], g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += sign * 2.0 * a[i] * g[i];
                    }
                });
            }
            Op::Sum => {
                let n = val(0).len();
                accumulate(adj, ins[0], n, |d| d.iter_mut().for_each(|d| *d += sign * g[0]));
            }
            Op::Mean => {
                let n = val(0).len();
                let s = sign * g[0] / n as f64;
                accumulate(adj, ins[0], n, |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::Concat => {
                let mut offset = 0;
                for &input in ins.iter() {
                    let n = self.nodes[input.0].value.len();
                    let part = &g[offset..offset + n];
                    accumulate(adj, input, n, |d| {
                        d.iter_mut().zip(part).for_each(|(d, g)| *d += sign * g)
                    });
                    offset += n;
                }
            }
            Op::Scale => {
                let (s, x) = (val(0)[0], val(1));
                let ds: f64 = g.iter().zip(x).map(|(g, x)| g * x).sum();
                accumulate(adj, ins[0], 1, |d| d[0] += sign * ds);
                accumulate(adj, ins[1], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * s * g)
                });
            }
            Op::Softmax => {
                let cols = node.value.last_dim();
                accumulate(adj, ins[0], g.len(), |d| {
                    for r in 0..g.len() / cols {
                        let (gs, ys) = (&g[r * cols..(r + 1) * cols], &out[r * cols..(r + 1) * cols]);
                        let dot: f64 = gs.iter().zip(ys).map(|(g, y)| g * y).sum();
                        for c in 0..cols {
                            d[r * cols + c] += sign * ys[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm => {
                let a = val(0);
                let cols = node.value.last_dim();
                accumulate(adj, ins[0], g.len(), |d| {
                    for r in 0..g.len() / cols {
                        let xs = &a[r * cols..(r + 1) * cols];
                        let (_, var) = mean_var(xs);
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let (gs, ys) = (&g[r * cols..(r + 1) * cols], &out[r * cols..(r + 1) * cols]);
                        let g_mean = gs.iter().sum::<f64>() / cols as f64;
                        let gy_mean = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            d[r * cols + c] += sign * inv_std * (gs[c] - g_mean - ys[c] * gy_mean);
                        }
                    }
                });
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

fn arity(op: Op, ins: &[&Tensor], n: usize) -> Result<()> {
    if ins.len() != n {
        return Err(shape_err(
            op.name(),
            format!("expected {n} inputs, got {}", ins.len()),
        ));
    }
    Ok(())
}

fn forward(op: Op, ins: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => Err(Error::Contract("leaf has no forward rule".into())),
        Op::Add => {
            arity(op, ins, 2)?;
            zip("add", ins[0], ins[1], |a, b| a + b)
        }
        Op::Sub => {
            arity(op, ins, 2)?;
            zip("sub", ins[0], ins[1], |a, b| a - b)
        }
        Op::Mul => {
            arity(op, ins, 2)?;
            zip("mul", ins[0], ins[1], |a, b| a * b)
        }
        Op::MatMul => {
            arity(op, ins, 2)?;
            matmul(ins[0], ins[1])
        }
        Op::Relu => {
            arity(op, ins, 1)?;
            Ok(map(ins[0], |x| if x > 0.0 { x } else { 0.0 }))
        }
        Op::ClampMin(c) => {
            arity(op, ins, 1)?;
            Ok(map(ins[0], |x| if x > c { x } else { c }))
        }
        Op::Sigmoid => {
            arity(op, ins, 1)?;
            Ok(map(ins[0], sigmoid))
        }
        Op::Softplus => {
            arity(op, ins, 1)?;
            Ok(map(ins[0], softplus))
        }
        Op::Exp => {
            arity(op, ins, 1)?;
            Ok(map(ins[0], f64::exp))
        }
        Op::Log => {
            arity(op, ins, 1)?;
            Ok(map(ins[0], f64::ln))
        }
        Op::Square => {
            arity(op, ins, 1)?;
            Ok(map(ins[0], |x| x * x))
        }
        Op::Sum => {
            arity(op, ins, 1)?;
            Ok(Tensor::from_parts(vec![1], vec![ins[0].data().iter().sum()]))
        }
        Op::Mean => {
            arity(op, ins, 1)?;
            let n = ins[0].len() as f64;
            Ok(Tensor::from_parts(
                vec![1],
                vec![ins[0].data().iter().sum::<f64>() / n],
            ))
        }
        Op::Concat => {
            if ins.is_empty() {
                return Err(shape_err("concat", "no inputs"));
            }
            let tail = &ins[0].shape()[1..];
            let mut rows = 0;
            let mut data = Vec::new();
            for t in ins {
                if &t.shape()[1..] != tail {
                    return Err(shape_err(
                        "concat",
                        format!("{:?} vs {:?}", ins[0].shape(), t.shape()),
                    ));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Ok(Tensor::from_parts(shape, data))
        }
        Op::Scale => {
            arity(op, ins, 2)?;
            let s = ins[0]
                .item()
                .ok_or_else(|| shape_err("scale", format!("scale factor has shape {:?}", ins[0].shape())))?;
            Ok(map(ins[1], |x| s * x))
        }
        Op::Softmax => {
            arity(op, ins, 1)?;
            let cols = ins[0].last_dim();
            let mut data = ins[0].data().to_vec();
            for row in data.chunks_mut(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Ok(Tensor::from_parts(ins[0].shape().to_vec(), data))
        }
        Op::LayerNorm => {
            arity(op, ins, 1)?;
            let cols = ins[0].last_dim();
            let mut data = ins[0].data().to_vec();
            for row in data.chunks_mut(cols) {
                let (mean, var) = mean_var(row);
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv_std;
                }
            }
            Ok(Tensor::from_parts(ins[0].shape().to_vec(), data))
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(shape_err("matmul", format!("left operand must be 2-D, got {:?}", a.shape())));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n, out_shape) = match b.shape() {
        [kb] => (*kb, 1, vec![m]),
        [kb, n] => (*kb, *n, vec![m, *n]),
        s => return Err(shape_err("matmul", format!("right operand must be 1-D or 2-D, got {s:?}"))),
    };
    if kb != k {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    if n == 1 {
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            out[i] = row.iter().zip(bd).map(|(x, y)| x * y).sum();
        }
    } else {
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bd[p * n + j];
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Central-difference gradient check of a scalar function of one tensor.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`, or `+inf` if
/// anything fails to evaluate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    FdCheck::new(eps).run(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x))
}

/// [`finite_difference_check`] over several input tensors at once.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    FdCheck::new(eps).run(f, xs)
}

/// Central-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    #[default]
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error `O(h^4)`.
    ///
    /// Permits a larger step, which keeps round-off small for coordinates
    /// whose gradient is tiny relative to the function value.
    FourPoint,
}

/// Configurable finite-difference gradient checker.
#[derive(Debug, Clone, Copy)]
pub struct FdCheck {
    pub eps: f64,
    pub stencil: Stencil,
    pub sign_flip: Option<OpKind>,
}

impl Default for FdCheck {
    fn default() -> Self {
        Self::new(1e-5)
    }
}

impl FdCheck {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            stencil: Stencil::TwoPoint,
            sign_flip: None,
        }
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> Self {
        self.stencil = stencil;
        self
    }

    #[doc(hidden)]
    pub fn with_sign_flip(mut self, kind: Option<OpKind>) -> Self {
        self.sign_flip = kind;
        self
    }

    pub fn run<F>(&self, f: F, xs: &[Tensor]) -> f64
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        match self.run_inner(&f, xs, false) {
            FdOutcome::Checked(err) => err,
            _ => f64::INFINITY,
        }
    }

    /// Like [`FdCheck::run`], but reports [`FdOutcome::KinkCrossed`] when any
    /// stencil point puts a ReLU or clamp input on the other side of its kink,
    /// where the difference quotient does not estimate the derivative.
    pub fn run_outcome<F>(&self, f: F, xs: &[Tensor]) -> FdOutcome
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        self.run_inner(&f, xs, true)
    }

    fn run_inner<F>(&self, f: &F, xs: &[Tensor], watch_kinks: bool) -> FdOutcome
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        if !(self.eps > 0.0) {
            return FdOutcome::Failed;
        }
        let mut tape = match self.sign_flip {
            Some(k) => Tape::with_sign_flip(k),
            None => Tape::new(),
        };
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let Ok(root) = f(&mut tape, &ids) else {
            return FdOutcome::Failed;
        };
        let Ok(grads) = tape.backward(root, &ids) else {
            return FdOutcome::Failed;
        };
        let base_pattern = tape.kink_pattern();
        let mut crossed = false;

        let mut eval = |xs: &[Tensor]| -> Option<f64> {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let root = f(&mut t, &ids).ok()?;
            if watch_kinks && t.kink_pattern() != base_pattern {
                crossed = true;
            }
            t.value(root).item()
        };

        let mut worst: f64 = 0.0;
        let mut probe: Vec<Tensor> = xs.to_vec();
        for (which, x) in xs.iter().enumerate() {
            let Some(analytic) = grads.get(ids[which]) else {
                return FdOutcome::Failed;
            };
            for d in 0..x.len() {
                let orig = x.data()[d];
                let mut at = |step: f64| {
                    probe[which].data_mut()[d] = orig + step * self.eps;
                    let v = eval(&probe);
                    probe[which].data_mut()[d] = orig;
                    v
                };
                let numeric = match self.stencil {
                    Stencil::TwoPoint => at(1.0).zip(at(-1.0)).map(|(p, m)| (p - m) / (2.0 * self.eps)),
                    Stencil::FourPoint => match (at(2.0), at(1.0), at(-1.0), at(-2.0)) {
                        (Some(p2), Some(p1), Some(m1), Some(m2)) => {
                            Some((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * self.eps))
                        }
                        _ => None,
                    },
                };
                let Some(numeric) = numeric else {
                    return FdOutcome::Failed;
                };
                let a = analytic.data()[d];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                if err.is_nan() {
                    return FdOutcome::Failed;
                }
                worst = worst.max(err);
            }
        }
        if crossed {
            FdOutcome::KinkCrossed
        } else {
            FdOutcome::Checked(worst)
        }
    }
}

/// Result of [`FdCheck::run_outcome`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdOutcome {
    /// Maximum relative error over all coordinates.
    Checked(f64),
    /// A stencil point crossed a ReLU or clamp kink.
    KinkCrossed,
    /// Evaluation failed or produced NaN.
    Failed,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn add_relu_softmax_examples() {
        let mut t = Tape::new();
        let a = t.leaf(v(&[1.0, 2.0]));
        let b = t.leaf(v(&[3.0, 4.0]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);

        let r = t.leaf(v(&[-1.0, 0.0, 2.0]));
        let r = t.relu(r).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = t.leaf(v(&[0.0; 4]));
        let z = t.softmax(z).unwrap();
        assert_eq!(t.value(z).data(), &[0.25; 4]);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = t.sum(x).unwrap();
        assert_eq!(t.backward(s, &[x]).unwrap().get(x).unwrap().data(), &[1.0; 6]);

        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0]));
        let sq = t.square(x).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.backward(s, &[x]).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);

        let mut t = Tape::new();
        let x = t.leaf(v(&[-1.0, 3.0]));
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        assert_eq!(t.backward(s, &[x]).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[0.0]));
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        assert_eq!(t.backward(s, &[x]).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0]));
        assert!(matches!(t.backward(x, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.leaf(v(&[1.0, 2.0]));
        let b = t.leaf(v(&[1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        let w = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.matmul(w, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_domain_violation_names_the_node() {
        let mut t = Tape::new();
        let a = t.leaf(v(&[1.0, -1.0]));
        match t.log(a) {
            Err(Error::Numeric { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
        let big = t.leaf(v(&[1000.0]));
        assert!(matches!(t.exp(big), Err(Error::Numeric { .. })));
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0]));
        let unused = t.leaf(v(&[5.0, 5.0, 5.0]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s, &[x, unused]).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn matmul_matrix_by_matrix() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.leaf(Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 2]);
        assert_eq!(t.value(c).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0, 3.0, 10.0]));
        let y = t.layer_norm(x).unwrap();
        let d = t.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn concat_and_scale() {
        let mut t = Tape::new();
        let a = t.leaf(v(&[1.0]));
        let b = t.leaf(v(&[2.0, 3.0]));
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = t.constant(2.0);
        let y = t.scale(s, c).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0, 6.0]);
        let bad = t.scale(c, c);
        assert!(bad.is_err());
    }

    #[test]
    fn fd_constant_function_is_exact() {
        let x = v(&[0.3, -0.7, 1.1]);
        let err = finite_difference_check(
            |t, x| {
                let z = t.scale_by(0.0, x)?;
                let s = t.sum(z)?;
                let c = t.constant(4.0);
                t.add(s, c)
            },
            &x,
            1e-5,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_reports_failure_as_infinity() {
        let x = v(&[-1.0]);
        let err = finite_difference_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l)
            },
            &x,
            1e-5,
        );
        assert_eq!(err, f64::INFINITY);
    }

    #[test]
    fn sign_flip_is_detected() {
        let x = v(&[0.3, -0.2, 0.9]);
        let f = |t: &mut Tape, ids: &[NodeId]| {
            let s = t.sigmoid(ids[0])?;
            t.sum(s)
        };
        assert!(FdCheck::new(1e-5).run(f, std::slice::from_ref(&x)) < 1e-6);
        let flipped = FdCheck::new(1e-5)
            .with_sign_flip(Some(OpKind::Sigmoid))
            .run(f, std::slice::from_ref(&x));
        assert!(flipped > 0.5);
    }

    #[test]
    fn op_kind_round_trips_through_its_name() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!("bogus".parse::<OpKind>().is_err());
    }
}
