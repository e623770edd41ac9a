//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients, summing on fan-out.

use std::collections::HashMap;
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{DesError, Result};
use crate::nn::{self, ConvSpec, LinearSpec};
use crate::tensor::{broadcast_kind, Broadcast, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Backward rule for an operation implemented outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input, given the input values and the upstream
    /// gradient of the output.
    fn backward(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;

    /// Feeds whatever discrete choices the op made (selections, piece
    /// indices) into `state`. Ops that are smooth everywhere keep the default.
    fn hash_branches(&self, _inputs: &[&Tensor], _state: &mut DefaultHasher) {}
}

enum Op {
    Input,
    Param,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId, Vec<usize>),
    Reshape(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
        cols: Option<Vec<f64>>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: LinearSpec,
    },
    SoftmaxChannels(NodeId),
    SmoothL1 {
        pred: NodeId,
        target: NodeId,
    },
    HeadFlatten {
        x: NodeId,
        per_anchor: usize,
    },
    ConcatRows(Vec<NodeId>),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Linear { .. } => "linear",
            Op::SoftmaxChannels(_) => "softmax_channels",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::HeadFlatten { .. } => "head_flatten",
            Op::ConcatRows(_) => "concat_rows",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.first_non_finite().is_some())
            .map(|(i, n)| (NodeId(i), n.op.name()))
    }

    /// Hash of every discrete choice on the tape: ReLU input signs, max-pool
    /// winners, smooth-L1 pieces and custom-op selections. Two evaluations
    /// with equal fingerprints lie on the same smooth piece of the objective.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for v in self.value(*a).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::SmoothL1 { pred, target } => {
                    i.hash(&mut h);
                    for (p, t) in self.value(*pred).data().iter().zip(self.value(*target).data()) {
                        ((p - t).abs() < 1.0).hash(&mut h);
                    }
                }
                Op::Custom { op, inputs } => {
                    i.hash(&mut h);
                    let values: Vec<&Tensor> = inputs.iter().map(|&n| self.value(n)).collect();
                    op.hash_branches(&values, &mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise product with optional per-channel broadcast of `b`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).elementwise_mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reduce_mean(axes)?;
        Ok(self.push(v, Op::Mean(a, axes.to_vec())))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = nn::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = nn::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let (v, cols) = nn::conv2d_forward(self.value(x), self.value(w), self.value(b), &spec)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, spec, cols }))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = nn::maxpool2_with_argmax(self.value(x))?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: LinearSpec) -> Result<NodeId> {
        let v = nn::linear(self.value(x), self.value(w), self.value(b), &spec)?;
        Ok(self.push(v, Op::Linear { x, w, b, spec }))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let v = nn::softmax_channels(self.value(x))?;
        Ok(self.push(v, Op::SoftmaxChannels(x)))
    }

    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(nn::smooth_l1(self.value(pred), self.value(target))?);
        Ok(self.push(v, Op::SmoothL1 { pred, target }))
    }

    /// Rearranges a prediction head output of shape `(A·P)×H×W` into an
    /// `(H·W·A)×P` matrix: row `(y·W + x)·A + a` holds the `P` values of
    /// anchor `a` at cell `(y, x)`.
    pub fn head_flatten(&mut self, x: NodeId, per_anchor: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        if per_anchor == 0 || c % per_anchor != 0 {
            return Err(DesError::shape(
                "head_flatten",
                format!("{c} channels are not a multiple of {per_anchor}"),
            ));
        }
        let anchors = c / per_anchor;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let (a, p) = (ch / per_anchor, ch % per_anchor);
            for cell in 0..h * w {
                out[(cell * anchors + a) * per_anchor + p] = src[ch * h * w + cell];
            }
        }
        let v = Tensor::new([h * w * anchors, per_anchor], out)?;
        Ok(self.push(v, Op::HeadFlatten { x, per_anchor }))
    }

    /// Stacks `R_i×P` matrices into one `(ΣR_i)×P` matrix.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| DesError::shape("concat_rows", "nothing to concatenate"))?;
        let cols = match self.value(*first).shape() {
            [_, p] => *p,
            s => return Err(DesError::shape("concat_rows", format!("expected matrices, got {s:?}"))),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            match self.value(p).shape() {
                [r, c] if *c == cols => {
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                s => {
                    return Err(DesError::shape(
                        "concat_rows",
                        format!("expected R×{cols}, got {s:?}"),
                    ))
                }
            }
        }
        let v = Tensor::new([rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DesError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |id: NodeId| &self.nodes[id.0].value;
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = g.elementwise_mul(bv)?;
                    let gb = match broadcast_kind(av.shape(), bv.shape())? {
                        Broadcast::Same => g.elementwise_mul(av)?,
                        Broadcast::PerChannel { .. } => g.zip_map(av, "mul", |u, x| u * x)?.reduce_sum(&[1, 2])?,
                    };
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f))?,
                Op::Sum(a) => {
                    let u = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(val(*a).shape().to_vec(), u))?;
                }
                Op::Mean(a, axes) => {
                    let av = val(*a);
                    let count: usize = axes.iter().map(|&d| av.shape()[d]).product();
                    let inv = 1.0 / count as f64;
                    accumulate(&mut grads, *a, expand(&g, av.shape(), inv))?;
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, *a, g.reshape(val(*a).shape().to_vec())?)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), "relu", |u, x| if x > 0.0 { u } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, "sigmoid", |u, s| u * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Conv2d { x, w, b, spec, cols } => {
                    let cg = nn::conv2d_backward(val(*x), val(*w), spec, cols.as_deref(), &g)?;
                    accumulate(&mut grads, *x, cg.input)?;
                    accumulate(&mut grads, *w, cg.weight)?;
                    accumulate(&mut grads, *b, cg.bias)?;
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                    for (&src, &u) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[src] += u;
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Linear { x, w, b, spec } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let mut gx = vec![0.0; spec.in_dim];
                    nn::gemm(1, spec.out_dim, spec.in_dim, g.data(), false, wv.data(), false, 0.0, &mut gx);
                    let mut gw = vec![0.0; spec.out_dim * spec.in_dim];
                    nn::gemm(spec.out_dim, 1, spec.in_dim, g.data(), false, xv.data(), false, 0.0, &mut gw);
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), gw)?)?;
                    accumulate(&mut grads, *b, g.reshape(vec![spec.out_dim])?)?;
                }
                Op::SoftmaxChannels(a) => {
                    accumulate(&mut grads, *a, softmax_channels_backward(&node.value, &g)?)?;
                }
                Op::SmoothL1 { pred, target } => {
                    let u = g.data()[0];
                    let gp = val(*pred).zip_map(val(*target), "smooth_l1", |p, t| u * nn::smooth_l1_grad(p - t))?;
                    accumulate(&mut grads, *target, gp.scale(-1.0))?;
                    accumulate(&mut grads, *pred, gp)?;
                }
                Op::HeadFlatten { x, per_anchor } => {
                    let (c, h, w) = val(*x).chw()?;
                    let anchors = c / per_anchor;
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let (a, p) = (ch / per_anchor, ch % per_anchor);
                        for cell in 0..h * w {
                            gx[ch * h * w + cell] = g.data()[(cell * anchors + a) * per_anchor + p];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new([c, h, w], gx)?)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        let gp = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        accumulate(&mut grads, p, gp)?;
                    }
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&id| val(id)).collect();
                    let gs = op.backward(&values, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(DesError::InvalidInput(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for (&id, gi) in inputs.iter().zip(gs) {
                        accumulate(&mut grads, id, gi)?;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` for every parameter in `store`, aligned with the
    /// store's order. Parameters the loss does not reach get zeros.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.params.get(&id) {
                Some(&n) => grads.wrt(self, n),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Broadcasts a keep-dims reduced gradient back over `shape`, times `factor`.
fn expand(g: &Tensor, shape: &[usize], factor: f64) -> Tensor {
    let rank = shape.len();
    let mut gstrides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        gstrides[d] = gstrides[d + 1] * g.shape()[d + 1];
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let mut index = vec![0usize; rank];
    for v in out.data_mut() {
        let mut o = 0;
        for d in 0..rank {
            if g.shape()[d] != 1 {
                o += index[d] * gstrides[d];
            }
        }
        *v = g.data()[o] * factor;
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    out
}

fn softmax_channels_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (k, h, w) = y.chw()?;
    let plane = h * w;
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; yd.len()];
    for p in 0..plane {
        let dot: f64 = (0..k).map(|c| yd[c * plane + p] * gd[c * plane + p]).sum();
        for c in 0..k {
            let i = c * plane + p;
            out[i] = yd[i] * (gd[i] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, zeros if the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn([2, 3], |i| i as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x), Tensor::ones([2, 3]));
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn product_rule_with_broadcast() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn([2, 2, 3], |i| i as f64 * 0.5 - 1.0));
        let b = g.input(Tensor::new([2, 1, 1], vec![2.0, -3.0]).unwrap());
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        // upstream is all ones: grad_a = b broadcast, grad_b = per-channel sum of a
        let ga = grads.wrt(&g, a);
        assert!(ga.data()[..6].iter().all(|&v| v == 2.0));
        assert!(ga.data()[6..].iter().all(|&v| v == -3.0));
        let av = g.value(a);
        let expected: Vec<f64> = av.data().chunks(6).map(|c| c.iter().sum()).collect();
        assert_eq!(grads.wrt(&g, b).data(), &expected[..]);
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(2.0));
        store.add("unused", Tensor::zeros([3]));
        let mut g = Graph::new();
        let p = g.param(&store, used);
        assert_eq!(g.param(&store, used), p);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        let pg = g.param_grads(&grads, &store);
        assert_eq!(pg[0].data(), &[1.0]);
        assert_eq!(pg[1], Tensor::zeros([3]));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.5));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 3.0);
        let c = g.add(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[5.0]);
    }

    #[test]
    fn head_flatten_layout() {
        let mut g = Graph::new();
        // 2 anchors × 3 values per anchor, on a 1×2 map
        let x = g.input(Tensor::from_fn([6, 1, 2], |i| i as f64));
        let f = g.head_flatten(x, 3).unwrap();
        let v = g.value(f);
        assert_eq!(v.shape(), &[4, 3]);
        // cell 0 anchor 0 = channels 0,1,2 at cell 0
        assert_eq!(&v.data()[0..3], &[0.0, 2.0, 4.0]);
        // cell 0 anchor 1 = channels 3,4,5
        assert_eq!(&v.data()[3..6], &[6.0, 8.0, 10.0]);
        // cell 1 anchor 0
        assert_eq!(&v.data()[6..9], &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn first_non_finite_names_node() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0));
        let y = g.scale(x, f64::INFINITY);
        let _ = g.scale(y, 0.0);
        let (id, name) = g.first_non_finite().unwrap();
        assert_eq!(id, y);
        assert_eq!(name, "scale");
    }
}
