//! Deterministic network blocks: linear maps, the fusion operator, cross
//! attention, the contextual coefficient, the residual graph update and the
//! relationship classifier.
//!
//! Each parameter block has a `bind` method that records its tensors as
//! leaves on a [`Tape`], returning a `*Vars` handle whose methods build the
//! traced computation. The free functions (`fuse`, `cross_attention`, ...)
//! are the value-level entry points and run the same traced code on a
//! scratch tape.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{shape_err, Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Flat access to the tensors of a parameter block, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Node ids of a bound parameter block, in the same order as
/// [`Parameters::tensors`].
pub trait BoundParameters {
    fn nodes(&self) -> Vec<NodeId>;
}

/// Where `bind_with` gets parameter nodes from.
pub(crate) enum ParamSource<'a> {
    /// Record every tensor as a new leaf.
    Fresh,
    /// Reuse nodes already on the tape, in [`Parameters::tensors`] order.
    Existing(std::slice::Iter<'a, NodeId>),
}

impl ParamSource<'_> {
    pub(crate) fn take(&mut self, tape: &mut Tape, t: &Tensor) -> NodeId {
        match self {
            ParamSource::Fresh => tape.leaf(t.clone()),
            ParamSource::Existing(ids) => *ids.next().expect("node count checked by attach_with"),
        }
    }
}

/// Binds `p` to existing `nodes` after checking their count and shapes.
pub(crate) fn attach_with<P, V>(
    p: &P,
    tape: &mut Tape,
    nodes: &[NodeId],
    bind: impl FnOnce(&P, &mut Tape, &mut ParamSource<'_>) -> V,
) -> Result<V>
where
    P: Parameters,
{
    let tensors = p.tensors();
    if tensors.len() != nodes.len() {
        return Err(shape_err(
            "attach",
            format!("{} parameter tensors, {} nodes", tensors.len(), nodes.len()),
        ));
    }
    for (t, &n) in tensors.iter().zip(nodes) {
        if n.index() >= tape.len() || tape.value(n).shape() != t.shape() {
            return Err(shape_err("attach", format!("node {} does not match shape {:?}", n.index(), t.shape())));
        }
    }
    Ok(bind(p, tape, &mut ParamSource::Existing(nodes.iter())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// `[out_dim, in_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    weight: NodeId,
    bias: Option<NodeId>,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let p = Self { weight, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(in_dim: usize, out_dim: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: with_bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    /// Identity weight and zero bias.
    pub fn identity(dim: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::identity(dim),
            bias: with_bias.then(|| Tensor::zeros(&[dim])),
        }
    }

    /// Glorot-uniform weights in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero bias.
    pub fn xavier(in_dim: usize, out_dim: usize, with_bias: bool, rng: &mut RngState) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim).map(|_| rng.uniform_range(-a, a)).collect();
        Self {
            weight: Tensor::from_parts(vec![out_dim, in_dim], data),
            bias: with_bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.shape().len() != 2 {
            return Err(shape_err("linear", format!("weight must be 2-D, got {:?}", self.weight.shape())));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.out_dim()] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} does not match {} outputs", b.shape(), self.out_dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearVars {
        self.bind_with(tape, &mut ParamSource::Fresh)
    }

    pub fn attach(&self, tape: &mut Tape, nodes: &[NodeId]) -> Result<LinearVars> {
        attach_with(self, tape, nodes, Self::bind_with)
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, src: &mut ParamSource<'_>) -> LinearVars {
        LinearVars {
            weight: src.take(tape, &self.weight),
            bias: self.bias.as_ref().map(|b| src.take(tape, b)),
        }
    }
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let y = tape.matmul(self.weight, x)?;
        match self.bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

impl Parameters for LinearParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

impl BoundParameters for LinearVars {
    fn nodes(&self) -> Vec<NodeId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

/// Projections of the fusion operator `x ⋄ y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub wx: LinearParams,
    pub wy: LinearParams,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    wx: LinearVars,
    wy: LinearVars,
}

impl FusionParams {
    pub fn new(wx: LinearParams, wy: LinearParams) -> Result<Self> {
        let p = Self { wx, wy };
        p.validate()?;
        Ok(p)
    }

    pub fn init(x_dim: usize, y_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        Self {
            wx: LinearParams::xavier(x_dim, out_dim, true, rng),
            wy: LinearParams::xavier(y_dim, out_dim, true, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.wx.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.wx.validate()?;
        self.wy.validate()?;
        if self.wx.out_dim() != self.wy.out_dim() {
            return Err(shape_err("fuse", "Wx and Wy output dimensions differ"));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> FusionVars {
        self.bind_with(tape, &mut ParamSource::Fresh)
    }

    pub fn attach(&self, tape: &mut Tape, nodes: &[NodeId]) -> Result<FusionVars> {
        attach_with(self, tape, nodes, Self::bind_with)
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, src: &mut ParamSource<'_>) -> FusionVars {
        FusionVars {
            wx: self.wx.bind_with(tape, src),
            wy: self.wy.bind_with(tape, src),
        }
    }
}

impl FusionVars {
    /// `ReLU(Wx x + Wy y) - (Wx x - Wy y)^2`
    pub fn forward(&self, tape: &mut Tape, x: NodeId, y: NodeId) -> Result<NodeId> {
        let px = self.wx.forward(tape, x)?;
        let py = self.wy.forward(tape, y)?;
        let s = tape.add(px, py)?;
        let gate = tape.relu(s)?;
        let d = tape.sub(px, py)?;
        let d2 = tape.square(d)?;
        tape.sub(gate, d2)
    }
}

impl Parameters for FusionParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.wx.tensors();
        v.extend(self.wy.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.wx.tensors_mut();
        v.extend(self.wy.tensors_mut());
        v
    }
}

impl BoundParameters for FusionVars {
    fn nodes(&self) -> Vec<NodeId> {
        let mut v = self.wx.nodes();
        v.extend(self.wy.nodes());
        v
    }
}

/// Cross-attention projections. `wi`/`wi_gate` read the first input,
/// `wj`/`wj_gate` the second; all four project to the same width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CAParams {
    pub wi: LinearParams,
    pub wj: LinearParams,
    pub wi_gate: LinearParams,
    pub wj_gate: LinearParams,
}

#[derive(Debug, Clone, Copy)]
pub struct CAVars {
    wi: LinearVars,
    wj: LinearVars,
    wi_gate: LinearVars,
    wj_gate: LinearVars,
}

impl CAParams {
    pub fn init(i_dim: usize, j_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        Self {
            wi: LinearParams::xavier(i_dim, out_dim, true, rng),
            wj: LinearParams::xavier(j_dim, out_dim, true, rng),
            wi_gate: LinearParams::xavier(i_dim, out_dim, true, rng),
            wj_gate: LinearParams::xavier(j_dim, out_dim, true, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.wi.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        for l in [&self.wi, &self.wj, &self.wi_gate, &self.wj_gate] {
            l.validate()?;
            if l.out_dim() != self.wi.out_dim() {
                return Err(shape_err("cross_attention", "projection widths differ"));
            }
        }
        if self.wi.in_dim() != self.wi_gate.in_dim() || self.wj.in_dim() != self.wj_gate.in_dim() {
            return Err(shape_err("cross_attention", "gate input widths differ from value projections"));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> CAVars {
        self.bind_with(tape, &mut ParamSource::Fresh)
    }

    pub fn attach(&self, tape: &mut Tape, nodes: &[NodeId]) -> Result<CAVars> {
        attach_with(self, tape, nodes, Self::bind_with)
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, src: &mut ParamSource<'_>) -> CAVars {
        CAVars {
            wi: self.wi.bind_with(tape, src),
            wj: self.wj.bind_with(tape, src),
            wi_gate: self.wi_gate.bind_with(tape, src),
            wj_gate: self.wj_gate.bind_with(tape, src),
        }
    }
}

impl CAVars {
    /// `(Wi xi ⊙ σ(Wj' xj) + Wi xi) ⊙ (Wj xj ⊙ σ(Wi' xi) + Wj xj)`
    pub fn forward(&self, tape: &mut Tape, xi: NodeId, xj: NodeId) -> Result<NodeId> {
        let a = self.wi.forward(tape, xi)?;
        let b = self.wj.forward(tape, xj)?;
        let ga = self.wj_gate.forward(tape, xj)?;
        let ga = tape.sigmoid(ga)?;
        let gb = self.wi_gate.forward(tape, xi)?;
        let gb = tape.sigmoid(gb)?;
        let left = tape.mul(a, ga)?;
        let left = tape.add(left, a)?;
        let right = tape.mul(b, gb)?;
        let right = tape.add(right, b)?;
        tape.mul(left, right)
    }
}

impl Parameters for CAParams {
    fn tensors(&self) -> Vec<&Tensor> {
        [&self.wi, &self.wj, &self.wi_gate, &self.wj_gate]
            .into_iter()
            .flat_map(|l| l.tensors())
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.wi.tensors_mut();
        v.extend(self.wj.tensors_mut());
        v.extend(self.wi_gate.tensors_mut());
        v.extend(self.wj_gate.tensors_mut());
        v
    }
}

impl BoundParameters for CAVars {
    fn nodes(&self) -> Vec<NodeId> {
        [self.wi, self.wj, self.wi_gate, self.wj_gate]
            .iter()
            .flat_map(|l| l.nodes())
            .collect()
    }
}

/// Which objects feed each object's aggregation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub enum Neighborhood {
    /// Every other object in the scene.
    #[default]
    Full,
    /// Explicit neighbor lists, one per object.
    Explicit(Vec<Vec<usize>>),
}

impl Neighborhood {
    pub fn neighbors(&self, i: usize, n: usize) -> Result<Vec<usize>> {
        match self {
            Neighborhood::Full => Ok((0..n).filter(|&j| j != i).collect()),
            Neighborhood::Explicit(lists) => {
                let list = lists
                    .get(i)
                    .ok_or_else(|| Error::Contract(format!("no neighbor list for object {i}")))?;
                if let Some(bad) = list.iter().find(|&&j| j >= n) {
                    return Err(Error::Contract(format!("neighbor {bad} out of range for {n} objects")));
                }
                Ok(list.clone())
            }
        }
    }
}

/// One residual cross-attention graph layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResCAGCNParams {
    /// `CA(x_i, x_j)`
    pub ca_inner: CAParams,
    /// `CA(CA(x_i, x_j), u_ij)`
    pub ca_outer: CAParams,
    /// `[1, d_ca]`, no bias.
    pub wc: LinearParams,
    /// `d_h -> d`
    pub w1: LinearParams,
    /// `d_m -> d_h`
    pub w2: LinearParams,
    /// `d -> d_m`
    pub w3: LinearParams,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// Widths of a [`ResCAGCNParams`] block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResCAGCNDims {
    pub feature: usize,
    pub union: usize,
    pub ca: usize,
    pub message: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct ResCAGCNVars {
    ca_inner: CAVars,
    ca_outer: CAVars,
    wc: LinearVars,
    w1: LinearVars,
    w2: LinearVars,
    w3: LinearVars,
    ln_gain: NodeId,
    ln_bias: NodeId,
}

impl ResCAGCNParams {
    pub fn init(dims: ResCAGCNDims, rng: &mut RngState) -> Self {
        Self {
            ca_inner: CAParams::init(dims.feature, dims.feature, dims.ca, rng),
            ca_outer: CAParams::init(dims.ca, dims.union, dims.ca, rng),
            wc: LinearParams::xavier(dims.ca, 1, false, rng),
            w1: LinearParams::xavier(dims.hidden, dims.feature, true, rng),
            w2: LinearParams::xavier(dims.message, dims.hidden, true, rng),
            w3: LinearParams::xavier(dims.feature, dims.message, true, rng),
            ln_gain: Tensor::filled(&[dims.hidden], 1.0),
            ln_bias: Tensor::zeros(&[dims.hidden]),
        }
    }

    pub fn dims(&self) -> ResCAGCNDims {
        ResCAGCNDims {
            feature: self.w3.in_dim(),
            union: self.ca_outer.wj.in_dim(),
            ca: self.ca_inner.out_dim(),
            message: self.w3.out_dim(),
            hidden: self.w2.out_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ca_inner.validate()?;
        self.ca_outer.validate()?;
        for l in [&self.wc, &self.w1, &self.w2, &self.w3] {
            l.validate()?;
        }
        let d = self.dims();
        let chain_ok = self.ca_inner.wi.in_dim() == d.feature
            && self.ca_inner.wj.in_dim() == d.feature
            && self.ca_outer.wi.in_dim() == d.ca
            && self.ca_outer.out_dim() == d.ca
            && self.wc.in_dim() == d.ca
            && self.wc.out_dim() == 1
            && self.w2.in_dim() == d.message
            && self.w1.in_dim() == d.hidden
            && self.w1.out_dim() == d.feature
            && self.ln_gain.shape() == [d.hidden]
            && self.ln_bias.shape() == [d.hidden];
        if !chain_ok {
            return Err(shape_err("rescagcn", format!("inconsistent layer widths {d:?}")));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> ResCAGCNVars {
        self.bind_with(tape, &mut ParamSource::Fresh)
    }

    pub fn attach(&self, tape: &mut Tape, nodes: &[NodeId]) -> Result<ResCAGCNVars> {
        attach_with(self, tape, nodes, Self::bind_with)
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, src: &mut ParamSource<'_>) -> ResCAGCNVars {
        ResCAGCNVars {
            ca_inner: self.ca_inner.bind_with(tape, src),
            ca_outer: self.ca_outer.bind_with(tape, src),
            wc: self.wc.bind_with(tape, src),
            w1: self.w1.bind_with(tape, src),
            w2: self.w2.bind_with(tape, src),
            w3: self.w3.bind_with(tape, src),
            ln_gain: src.take(tape, &self.ln_gain),
            ln_bias: src.take(tape, &self.ln_bias),
        }
    }
}

impl ResCAGCNVars {
    /// Scalar `σ(Wc · CA(CA(x_i, x_j), u_ij))`.
    pub fn contextual_coefficient(
        &self,
        tape: &mut Tape,
        xi: NodeId,
        xj: NodeId,
        uij: NodeId,
    ) -> Result<NodeId> {
        let inner = self.ca_inner.forward(tape, xi, xj)?;
        let outer = self.ca_outer.forward(tape, inner, uij)?;
        let logit = self.wc.forward(tape, outer)?;
        tape.sigmoid(logit)
    }

    /// `x̂_i = x_i + ReLU(W1 LN(W2 Σ_j c_ij W3 x_j))` for every object.
    ///
    /// An object with no neighbors is passed through unchanged.
    pub fn update(
        &self,
        tape: &mut Tape,
        features: &[NodeId],
        unions: &HashMap<(usize, usize), NodeId>,
        neighborhood: &Neighborhood,
    ) -> Result<Vec<NodeId>> {
        let n = features.len();
        let mut messages: Vec<Option<NodeId>> = vec![None; n];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let neighbors = neighborhood.neighbors(i, n)?;
            if neighbors.is_empty() {
                out.push(features[i]);
                continue;
            }
            let mut agg: Option<NodeId> = None;
            for j in neighbors {
                let uij = *unions.get(&(i, j)).ok_or_else(|| {
                    Error::Contract(format!("missing union feature for pair ({i}, {j})"))
                })?;
                let c = self.contextual_coefficient(tape, features[i], features[j], uij)?;
                let msg = match messages[j] {
                    Some(m) => m,
                    None => {
                        let m = self.w3.forward(tape, features[j])?;
                        messages[j] = Some(m);
                        m
                    }
                };
                let term = tape.scale(c, msg)?;
                agg = Some(match agg {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            let h = self.w2.forward(tape, agg.expect("non-empty neighborhood"))?;
            let h = tape.layer_norm(h)?;
            let h = tape.mul(h, self.ln_gain)?;
            let h = tape.add(h, self.ln_bias)?;
            let h = self.w1.forward(tape, h)?;
            let h = tape.relu(h)?;
            out.push(tape.add(features[i], h)?);
        }
        Ok(out)
    }
}

impl Parameters for ResCAGCNParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.ca_inner.tensors();
        v.extend(self.ca_outer.tensors());
        for l in [&self.wc, &self.w1, &self.w2, &self.w3] {
            v.extend(l.tensors());
        }
        v.push(&self.ln_gain);
        v.push(&self.ln_bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.ca_inner.tensors_mut();
        v.extend(self.ca_outer.tensors_mut());
        v.extend(self.wc.tensors_mut());
        v.extend(self.w1.tensors_mut());
        v.extend(self.w2.tensors_mut());
        v.extend(self.w3.tensors_mut());
        v.push(&mut self.ln_gain);
        v.push(&mut self.ln_bias);
        v
    }
}

impl BoundParameters for ResCAGCNVars {
    fn nodes(&self) -> Vec<NodeId> {
        let mut v = self.ca_inner.nodes();
        v.extend(self.ca_outer.nodes());
        for l in [self.wc, self.w1, self.w2, self.w3] {
            v.extend(l.nodes());
        }
        v.push(self.ln_gain);
        v.push(self.ln_bias);
        v
    }
}

/// Linear layer plus softmax over predicate classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// `[C, d_z]`
    pub wr: LinearParams,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    wr: LinearVars,
}

impl ClassifierParams {
    pub fn new(wr: LinearParams) -> Result<Self> {
        let p = Self { wr };
        p.validate()?;
        Ok(p)
    }

    pub fn init(in_dim: usize, num_classes: usize, rng: &mut RngState) -> Self {
        Self {
            wr: LinearParams::xavier(in_dim, num_classes, true, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.wr.out_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.wr.in_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.wr.validate()?;
        if self.num_classes() < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> ClassifierVars {
        self.bind_with(tape, &mut ParamSource::Fresh)
    }

    pub fn attach(&self, tape: &mut Tape, nodes: &[NodeId]) -> Result<ClassifierVars> {
        attach_with(self, tape, nodes, Self::bind_with)
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, src: &mut ParamSource<'_>) -> ClassifierVars {
        ClassifierVars {
            wr: self.wr.bind_with(tape, src),
        }
    }
}

impl ClassifierVars {
    pub fn forward(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let logits = self.wr.forward(tape, z)?;
        tape.softmax(logits)
    }
}

impl Parameters for ClassifierParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.wr.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.wr.tensors_mut()
    }
}

impl BoundParameters for ClassifierVars {
    fn nodes(&self) -> Vec<NodeId> {
        self.wr.nodes()
    }
}

/// `x ⋄ y = ReLU(Wx x + Wy y) - (Wx x - Wy y)^2`
pub fn fuse(x: &Tensor, y: &Tensor, p: &FusionParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xi, yi) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
    let vars = p.bind(&mut tape);
    let out = vars.forward(&mut tape, xi, yi)?;
    Ok(tape.value(out).clone())
}

pub fn cross_attention(xi: &Tensor, xj: &Tensor, p: &CAParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(xi.clone()), tape.leaf(xj.clone()));
    let vars = p.bind(&mut tape);
    let out = vars.forward(&mut tape, a, b)?;
    Ok(tape.value(out).clone())
}

/// The scalar coefficient `c_ij` in `(0, 1)`.
pub fn contextual_coefficient(xi: &Tensor, xj: &Tensor, uij: &Tensor, p: &ResCAGCNParams) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b, u) = (tape.leaf(xi.clone()), tape.leaf(xj.clone()), tape.leaf(uij.clone()));
    let vars = p.bind(&mut tape);
    let c = vars.contextual_coefficient(&mut tape, a, b, u)?;
    Ok(tape.value(c).data()[0])
}

/// Residual graph update of every object feature. Inputs are not modified.
pub fn rescagcn_update(
    features: &[Tensor],
    union_feats: &HashMap<(usize, usize), Tensor>,
    p: &ResCAGCNParams,
    neighborhood: &Neighborhood,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let xs: Vec<NodeId> = features.iter().map(|x| tape.leaf(x.clone())).collect();
    let mut keys: Vec<_> = union_feats.keys().copied().collect();
    keys.sort_unstable();
    let unions: HashMap<_, _> = keys
        .into_iter()
        .map(|k| (k, tape.leaf(union_feats[&k].clone())))
        .collect();
    let vars = p.bind(&mut tape);
    let out = vars.update(&mut tape, &xs, &unions, neighborhood)?;
    Ok(out.into_iter().map(|id| tape.value(id).clone()).collect())
}

/// `softmax(Wr z)`
pub fn classify(z: &Tensor, p: &ClassifierParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zi = tape.leaf(z.clone());
    let vars = p.bind(&mut tape);
    let out = vars.forward(&mut tape, zi)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> Tensor {
        Tensor::vector(d.to_vec()).unwrap()
    }

    fn identity_ca(d: usize) -> CAParams {
        CAParams {
            wi: LinearParams::identity(d, true),
            wj: LinearParams::identity(d, true),
            wi_gate: LinearParams::identity(d, true),
            wj_gate: LinearParams::identity(d, true),
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn identity_rescagcn() -> ResCAGCNParams {
        ResCAGCNParams {
            ca_inner: identity_ca(1),
            ca_outer: identity_ca(1),
            wc: LinearParams::identity(1, false),
            w1: LinearParams::identity(1, true),
            w2: LinearParams::identity(1, true),
            w3: LinearParams::identity(1, true),
            ln_gain: v(&[1.0]),
            ln_bias: v(&[0.0]),
        }
    }

    #[test]
    fn fuse_examples() {
        let mut rng = RngState::seed(1);
        let p = FusionParams::init(3, 3, 4, &mut rng);
        let z = fuse(&Tensor::zeros(&[3]), &Tensor::zeros(&[3]), &p).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);

        let id = FusionParams::new(LinearParams::identity(3, true), LinearParams::identity(3, true)).unwrap();
        let x = v(&[0.5, -1.0, 2.0]);
        let out = fuse(&x, &x, &id).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 4.0]);

        let id1 = FusionParams::new(LinearParams::identity(1, true), LinearParams::identity(1, true)).unwrap();
        assert_eq!(fuse(&v(&[1.0]), &v(&[-1.0]), &id1).unwrap().data(), &[-4.0]);

        assert!(fuse(&v(&[1.0, 2.0]), &x, &id).is_err());
    }

    #[test]
    fn cross_attention_examples() {
        let mut rng = RngState::seed(2);
        let mut p = CAParams::init(3, 3, 2, &mut rng);
        let zero = cross_attention(&Tensor::zeros(&[3]), &Tensor::zeros(&[3]), &p).unwrap();
        assert_eq!(zero.data(), &[0.0; 2]);

        let out = cross_attention(&v(&[1.0]), &v(&[1.0]), &identity_ca(1)).unwrap();
        let expected = (1.0 + sig(1.0)).powi(2);
        assert!((out.data()[0] - expected).abs() < 1e-15);
        assert!((out.data()[0] - 2.996_564).abs() < 1e-6);

        let (xi, xj) = (v(&[0.3, -0.2, 0.8]), v(&[-0.5, 0.1, 0.4]));
        let a = cross_attention(&xi, &xj, &p).unwrap();
        std::mem::swap(&mut p.wi, &mut p.wj);
        std::mem::swap(&mut p.wi_gate, &mut p.wj_gate);
        let b = cross_attention(&xj, &xi, &p).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn contextual_coefficient_examples() {
        let mut rng = RngState::seed(3);
        let dims = ResCAGCNDims {
            feature: 3,
            union: 3,
            ca: 4,
            message: 3,
            hidden: 3,
        };
        let p = ResCAGCNParams::init(dims, &mut rng);
        let zero = Tensor::zeros(&[3]);
        assert_eq!(contextual_coefficient(&zero, &zero, &zero, &p).unwrap(), 0.5);

        let mid = v(&[3.0, -2.0, 5.0]);
        let c = contextual_coefficient(&mid, &mid, &mid, &p).unwrap();
        assert!(c > 0.0 && c < 1.0);
        // Saturates in f64 but stays within the closed interval.
        let big = v(&[300.0, -200.0, 500.0]);
        let c = contextual_coefficient(&big, &big, &big, &p).unwrap();
        assert!((0.0..=1.0).contains(&c));

        // Composing the scalar CA oracle twice: inner = (1 + σ(1))², outer =
        // (inner σ(1) + inner)(1·σ(inner) + 1).
        let inner = (1.0 + sig(1.0)).powi(2);
        let outer = (inner * sig(1.0) + inner) * (sig(inner) + 1.0);
        let one = v(&[1.0]);
        let got = contextual_coefficient(&one, &one, &one, &identity_rescagcn()).unwrap();
        assert!((got - sig(outer)).abs() < 1e-15);
    }

    #[test]
    fn rescagcn_single_object_is_identity() {
        let mut rng = RngState::seed(4);
        let dims = ResCAGCNDims {
            feature: 3,
            union: 3,
            ca: 3,
            message: 2,
            hidden: 2,
        };
        let p = ResCAGCNParams::init(dims, &mut rng);
        let x = vec![v(&[0.1, 0.2, 0.3])];
        let out = rescagcn_update(&x, &HashMap::new(), &p, &Neighborhood::Full).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn rescagcn_zero_w1_is_identity() {
        let mut rng = RngState::seed(5);
        let dims = ResCAGCNDims {
            feature: 3,
            union: 2,
            ca: 3,
            message: 2,
            hidden: 4,
        };
        let mut p = ResCAGCNParams::init(dims, &mut rng);
        p.w1 = LinearParams::zeros(4, 3, true);
        let x = vec![v(&[0.1, 0.2, 0.3]), v(&[-0.4, 0.5, 0.6]), v(&[1.0, -1.0, 0.0])];
        let mut unions = HashMap::new();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    unions.insert((i, j), v(&[i as f64, j as f64]));
                }
            }
        }
        let out = rescagcn_update(&x, &unions, &p, &Neighborhood::Full).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn rescagcn_hand_evaluation_with_layer_norm() {
        // Straight-line evaluation of the coefficient and residual update with
        // scalar features and a two-wide hidden layer.
        let one = |d: usize| LinearParams::identity(d, true);
        let p = ResCAGCNParams {
            ca_inner: identity_ca(1),
            ca_outer: identity_ca(1),
            wc: LinearParams::identity(1, false),
            w1: LinearParams::new(Tensor::matrix(1, 2, vec![1.0, 0.5]).unwrap(), Some(v(&[0.1]))).unwrap(),
            w2: LinearParams::new(Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap(), Some(v(&[0.0, 0.3]))).unwrap(),
            w3: one(1),
            ln_gain: v(&[1.5, 0.5]),
            ln_bias: v(&[0.0, 0.2]),
        };
        let x = vec![v(&[0.5]), v(&[-0.25])];
        let mut unions = HashMap::new();
        unions.insert((0, 1), v(&[0.2]));
        unions.insert((1, 0), v(&[0.9]));
        let out = rescagcn_update(&x, &unions, &p, &Neighborhood::Full).unwrap();

        let ca = |a: f64, b: f64| (a * sig(b) + a) * (b * sig(a) + b);
        for (i, j) in [(0usize, 1usize), (1, 0)] {
            let (xi, xj) = (x[i].data()[0], x[j].data()[0]);
            let c = sig(ca(ca(xi, xj), unions[&(i, j)].data()[0]));
            let m = c * xj;
            let h = [m, -2.0 * m + 0.3];
            let mean = (h[0] + h[1]) / 2.0;
            let var = ((h[0] - mean).powi(2) + (h[1] - mean).powi(2)) / 2.0;
            let s = (var + 1e-5).sqrt();
            let n = [(h[0] - mean) / s * 1.5, (h[1] - mean) / s * 0.5 + 0.2];
            let pre = n[0] + 0.5 * n[1] + 0.1;
            let expected = xi + pre.max(0.0);
            assert!((out[i].data()[0] - expected).abs() < 1e-12, "{} vs {}", out[i].data()[0], expected);
        }
    }

    #[test]
    fn missing_union_feature_is_an_error() {
        let p = identity_rescagcn();
        let x = vec![v(&[0.5]), v(&[-0.25])];
        assert!(rescagcn_update(&x, &HashMap::new(), &p, &Neighborhood::Full).is_err());
        let explicit = Neighborhood::Explicit(vec![vec![], vec![]]);
        assert_eq!(rescagcn_update(&x, &HashMap::new(), &p, &explicit).unwrap(), x);
    }

    #[test]
    fn classify_examples() {
        let zero = ClassifierParams::new(LinearParams::zeros(4, 5, true)).unwrap();
        let p = classify(&v(&[1.0, 2.0, 3.0, 4.0]), &zero).unwrap();
        assert!(p.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));

        let logits = ClassifierParams::new(
            LinearParams::new(Tensor::identity(3), Some(Tensor::zeros(&[3]))).unwrap(),
        )
        .unwrap();
        let p = classify(&v(&[1.0, 2.0, 3.0]), &logits).unwrap();
        for (got, want) in p.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
        let shifted = classify(&v(&[11.0, 12.0, 13.0]), &logits).unwrap();
        for (a, b) in p.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(ClassifierParams::new(LinearParams::zeros(3, 1, true)).is_err());
    }

    #[test]
    fn parameter_and_node_orders_agree() {
        let mut rng = RngState::seed(6);
        let dims = ResCAGCNDims {
            feature: 3,
            union: 2,
            ca: 4,
            message: 5,
            hidden: 6,
        };
        let p = ResCAGCNParams::init(dims, &mut rng);
        p.validate().unwrap();
        assert_eq!(p.dims(), dims);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let nodes = vars.nodes();
        let tensors = p.tensors();
        assert_eq!(nodes.len(), tensors.len());
        for (n, t) in nodes.iter().zip(tensors) {
            assert_eq!(tape.value(*n), t);
        }
    }
}
