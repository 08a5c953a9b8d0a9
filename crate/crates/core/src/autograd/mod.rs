//! Define-by-run reverse-mode differentiation.
//!
//! Every op appended to a [`Graph`] is evaluated immediately when its inputs
//! are known and recorded on the tape together with what its adjoint needs.
//! [`Graph::forward`] replays the tape with new leaf values and
//! [`Graph::backward`] walks it in reverse.

mod gradcheck;
pub mod suite;

pub use gradcheck::{gradcheck, gradcheck_with, relative_error, GradcheckConfig, GradcheckReport, ParamCheck, EPS_RANGE};

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// Multiply by a single-element node.
    ScaleBy(NodeId, NodeId),
    Relu(NodeId),
    Concat(NodeId, NodeId),
    SpatialSoftmax(NodeId),
    Gate(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    AvgPool2x2(NodeId),
    GlobalAvgPool(NodeId),
    Upsample2x(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(..) => "relu",
            Op::Concat(..) => "concat",
            Op::SpatialSoftmax(..) => "spatial_softmax",
            Op::Gate(..) => "gate",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2x2(..) => "avgpool2x2",
            Op::GlobalAvgPool(..) => "global_avgpool",
            Op::Upsample2x(..) => "upsample2x",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) | Op::Concat(a, b) | Op::Gate(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SpatialSoftmax(a)
            | Op::AvgPool2x2(a)
            | Op::GlobalAvgPool(a)
            | Op::Upsample2x(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    name: Option<String>,
}

/// The tape. Nodes are appended in evaluation order, so parents always
/// precede children.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every parameter node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    map: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes.get(id.0).and_then(|n| n.name.as_deref())
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Value of a node that must already be computed.
    pub fn expect_value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.value(id).ok_or(Error::UnboundLeaf(id.0))
    }

    /// Constant leaf with a known value.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(Op::Input, Some(value), None)
    }

    /// Input leaf whose value is supplied later through [`Graph::forward`].
    pub fn placeholder(&mut self) -> NodeId {
        self.leaf(Op::Input, None, None)
    }

    /// Trainable leaf; receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        let id = self.leaf(Op::Param, Some(value), Some(name.into()));
        self.params.push(id);
        id
    }

    fn leaf(&mut self, op: Op<T>, value: Option<Tensor<T>>, name: Option<String>) -> NodeId {
        self.nodes.push(Node { op, value, name });
        NodeId(self.nodes.len() - 1)
    }

    /// Replaces the value of a leaf node. Downstream values go stale until
    /// the next [`Graph::forward`].
    pub fn set_value(&mut self, id: NodeId, value: Tensor<T>) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or_else(|| Error::Graph(format!("unknown node {id:?}")))?;
        if !matches!(node.op, Op::Input | Op::Param) {
            return Err(Error::Graph(format!("node {id:?} is not a leaf")));
        }
        node.value = Some(value);
        Ok(())
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let parents = op.parents();
        if let Some(bad) = parents.iter().find(|p| p.0 >= self.nodes.len()) {
            return Err(Error::Graph(format!("parent {bad:?} does not exist")));
        }
        let ready = parents.iter().all(|p| self.nodes[p.0].value.is_some());
        let value = if ready { Some(self.eval(&op)?) } else { None };
        self.nodes.push(Node {
            op,
            value,
            name: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    /// `s * a` where `s` holds a single element.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::ScaleBy(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn concat(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.push(Op::Concat(x, y))
    }

    pub fn spatial_softmax(&mut self, m: NodeId) -> Result<NodeId> {
        self.push(Op::SpatialSoftmax(m))
    }

    pub fn gate(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::Gate(x, s))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.push(Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        })
    }

    pub fn avgpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::AvgPool2x2(x))
    }

    pub fn global_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Upsample2x(x))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.push(Op::Linear { x, w, b })
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            eps,
        })
    }

    /// Batch normalization with fixed statistics (an affine map of `x`).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    ) -> Result<NodeId> {
        self.push(Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    /// Mean softmax cross-entropy of (N,K) logits against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Binds leaf values and recomputes every non-leaf node in tape order.
    /// Returns the value of `root`.
    pub fn forward(&mut self, bindings: &[(NodeId, Tensor<T>)], root: NodeId) -> Result<&Tensor<T>> {
        for (id, value) in bindings {
            self.set_value(*id, value.clone())?;
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                if self.nodes[i].value.is_none() {
                    return Err(Error::UnboundLeaf(i));
                }
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = Some(value);
        }
        self.expect_value(root)
    }

    fn val(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.expect_value(id)
    }

    fn eval(&self, op: &Op<T>) -> Result<Tensor<T>> {
        Ok(match op {
            Op::Input | Op::Param => unreachable!("leaves are never evaluated"),
            Op::Add(a, b) => tensor::add(self.val(*a)?, self.val(*b)?)?,
            Op::Mul(a, b) => tensor::mul(self.val(*a)?, self.val(*b)?)?,
            Op::Scale(a, f) => tensor::scale(self.val(*a)?, *f),
            Op::ScaleBy(a, s) => {
                let s = single(self.val(*s)?, "scale_by")?;
                tensor::scale(self.val(*a)?, s)
            }
            Op::Relu(a) => tensor::relu(self.val(*a)?),
            Op::Concat(a, b) => tensor::concat_channels(self.val(*a)?, self.val(*b)?)?,
            Op::SpatialSoftmax(a) => tensor::spatial_softmax(self.val(*a)?)?,
            Op::Gate(x, s) => tensor::broadcast_gate(self.val(*x)?, self.val(*s)?)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let b = b.map(|b| self.val(b)).transpose()?;
                tensor::conv2d(self.val(*x)?, self.val(*w)?, b, *stride, *pad)?
            }
            Op::AvgPool2x2(a) => tensor::avgpool2x2(self.val(*a)?)?,
            Op::GlobalAvgPool(a) => tensor::global_avgpool(self.val(*a)?)?,
            Op::Upsample2x(a) => tensor::upsample_nearest_2x(self.val(*a)?)?,
            Op::Linear { x, w, b } => {
                let b = b.map(|b| self.val(b)).transpose()?;
                tensor::matvec(self.val(*x)?, self.val(*w)?, b)?
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let x = self.val(*x)?;
                let (mean, var) = channel_moments(x)?;
                affine_norm(x, self.val(*gamma)?, self.val(*beta)?, &mean, &var, *eps)?
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => affine_norm(self.val(*x)?, self.val(*gamma)?, self.val(*beta)?, mean, var, *eps)?,
            Op::Sum(a) => Tensor::scalar(self.val(*a)?.sum()),
            Op::Mean(a) => {
                let a = self.val(*a)?;
                Tensor::scalar(a.sum() / T::lit(a.numel() as f64))
            }
            Op::CrossEntropy { logits, labels } => Tensor::scalar(cross_entropy_value(self.val(*logits)?, labels)?),
        })
    }

    /// Reverse sweep from a scalar `loss`. Every parameter gets a gradient;
    /// parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.expect_value(loss)?;
        if !loss_value.shape().is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {}",
                loss_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::ones(loss_value.dims()));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param) {
                adj[i] = Some(g);
                continue;
            }
            for (parent, grad) in self.adjoint(&node.op, node.value.as_ref(), &g)? {
                accumulate(&mut adj[parent.0], grad)?;
            }
        }

        let map = self
            .params
            .iter()
            .map(|&p| {
                let grad = adj
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros_like(self.nodes[p.0].value.as_ref().expect("param value")));
                (p, grad)
            })
            .collect();
        Ok(Gradients { map })
    }

    fn adjoint(
        &self,
        op: &Op<T>,
        out: Option<&Tensor<T>>,
        g: &Tensor<T>,
    ) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let out = || out.ok_or_else(|| Error::Graph("backward before forward".into()));
        Ok(match op {
            Op::Input | Op::Param => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, tensor::mul(g, self.val(*b)?)?),
                (*b, tensor::mul(g, self.val(*a)?)?),
            ],
            Op::Scale(a, f) => vec![(*a, tensor::scale(g, *f))],
            Op::ScaleBy(a, s) => {
                let sv = self.val(*s)?;
                let factor = single(sv, "scale_by")?;
                let ds: T = g.data().iter().zip(self.val(*a)?.data()).map(|(&u, &v)| u * v).sum();
                vec![
                    (*a, tensor::scale(g, factor)),
                    (*s, Tensor::full(sv.dims(), ds)),
                ]
            }
            Op::Relu(a) => {
                let x = self.val(*a)?;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::from_parts(x.shape().clone(), data))]
            }
            Op::Concat(a, b) => {
                let ca = self.val(*a)?.dims()[1];
                let cb = self.val(*b)?.dims()[1];
                vec![
                    (*a, tensor::slice_channels(g, 0, ca)?),
                    (*b, tensor::slice_channels(g, ca, cb)?),
                ]
            }
            Op::SpatialSoftmax(a) => vec![(*a, tensor::spatial_softmax_backward(out()?, g)?)],
            Op::Gate(x, s) => {
                let xv = self.val(*x)?;
                let sv = self.val(*s)?;
                let [n, c, h, w] = xv.nchw("gate")?;
                let plane = h * w;
                let mut ds = vec![T::zero(); n * plane];
                for b in 0..n {
                    let acc = &mut ds[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for (k, a) in acc.iter_mut().enumerate() {
                            *a += g.data()[base + k] * xv.data()[base + k];
                        }
                    }
                }
                vec![
                    (*x, tensor::broadcast_gate(g, sv)?),
                    (*s, Tensor::from_parts(sv.shape().clone(), ds)),
                ]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let grads = tensor::conv2d_backward(self.val(*x)?, self.val(*w)?, g, *stride, *pad)?;
                let mut v = vec![(*x, grads.input), (*w, grads.weight)];
                if let Some(b) = b {
                    let dims = self.val(*b)?.dims().to_vec();
                    v.push((*b, grads.bias.reshape(&dims)?));
                }
                v
            }
            Op::AvgPool2x2(a) => {
                vec![(*a, tensor::avgpool2x2_backward(g, self.val(*a)?.dims())?)]
            }
            Op::GlobalAvgPool(a) => {
                vec![(*a, tensor::global_avgpool_backward(g, self.val(*a)?.dims())?)]
            }
            Op::Upsample2x(a) => vec![(*a, tensor::upsample_nearest_2x_backward(g)?)],
            Op::Linear { x, w, b } => {
                let xv = self.val(*x)?;
                let wv = self.val(*w)?;
                let (n, inp) = tensor::ops_as_matrix("linear", xv)?;
                let (outf, _) = tensor::ops_as_matrix("linear", wv)?;
                // dx = g (N,Out) * w (Out,In)
                let mut dx = vec![T::zero(); n * inp];
                T::gemm(n, outf, inp, T::one(), g.data(), outf as isize, 1, wv.data(), inp as isize, 1, T::zero(), &mut dx, inp as isize, 1);
                // dw = g^T (Out,N) * x (N,In)
                let mut dw = vec![T::zero(); outf * inp];
                T::gemm(outf, n, inp, T::one(), g.data(), 1, outf as isize, xv.data(), inp as isize, 1, T::zero(), &mut dw, inp as isize, 1);
                let mut v = vec![
                    (*x, Tensor::from_parts(xv.shape().clone(), dx)),
                    (*w, Tensor::from_parts(wv.shape().clone(), dw)),
                ];
                if let Some(b) = b {
                    let mut db = vec![T::zero(); outf];
                    for row in g.data().chunks_exact(outf) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    let dims = self.val(*b)?.dims().to_vec();
                    v.push((*b, Tensor::from_vec(&dims, db)?));
                }
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.val(*x)?;
                let gv = self.val(*gamma)?;
                let [n, c, h, w] = xv.nchw("batch_norm")?;
                let plane = h * w;
                let count = T::lit((n * plane) as f64);
                let (mean, var) = channel_moments(xv)?;
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let inv_std = T::one() / (var[ch] + *eps).sqrt();
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for k in base..base + plane {
                            let xhat = (xv.data()[k] - mean[ch]) * inv_std;
                            sum_g += g.data()[k];
                            sum_gx += g.data()[k] * xhat;
                        }
                    }
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let gam = gv.data()[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for k in base..base + plane {
                            let xhat = (xv.data()[k] - mean[ch]) * inv_std;
                            dx[k] = gam * inv_std * (g.data()[k] - (sum_g + xhat * sum_gx) / count);
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().clone(), dx)),
                    (*gamma, Tensor::from_vec(gv.dims(), dgamma)?),
                    (*beta, Tensor::from_vec(self.val(*beta)?.dims(), dbeta)?),
                ]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = self.val(*x)?;
                let gv = self.val(*gamma)?;
                let [n, c, h, w] = xv.nchw("batch_norm_eval")?;
                let plane = h * w;
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let inv_std = T::one() / (var[ch] + *eps).sqrt();
                        let base = (b * c + ch) * plane;
                        for k in base..base + plane {
                            let xhat = (xv.data()[k] - mean[ch]) * inv_std;
                            dx[k] = g.data()[k] * gv.data()[ch] * inv_std;
                            dgamma[ch] += g.data()[k] * xhat;
                            dbeta[ch] += g.data()[k];
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().clone(), dx)),
                    (*gamma, Tensor::from_vec(gv.dims(), dgamma)?),
                    (*beta, Tensor::from_vec(self.val(*beta)?.dims(), dbeta)?),
                ]
            }
            Op::Sum(a) => {
                let gs = single(g, "sum")?;
                vec![(*a, Tensor::full(self.val(*a)?.dims(), gs))]
            }
            Op::Mean(a) => {
                let av = self.val(*a)?;
                let gs = single(g, "mean")? / T::lit(av.numel() as f64);
                vec![(*a, Tensor::full(av.dims(), gs))]
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.val(*logits)?;
                let (n, k) = tensor::ops_as_matrix("cross_entropy", lv)?;
                let gs = single(g, "cross_entropy")? / T::lit(n as f64);
                let mut d = Vec::with_capacity(n * k);
                for (row, &label) in lv.data().chunks_exact(k).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let onehot = if j == label { T::one() } else { T::zero() };
                        d.push(gs * (p - onehot));
                    }
                }
                vec![(*logits, Tensor::from_parts(lv.shape().clone(), d))]
            }
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => {
            if existing.shape() != grad.shape() {
                return Err(Error::Graph(format!(
                    "adjoint shape {} does not match {}",
                    grad.shape(),
                    existing.shape()
                )));
            }
            for (e, g) in existing.as_mut_slice().iter_mut().zip(grad.data()) {
                *e += *g;
            }
        }
        None => *slot = Some(grad),
    }
    Ok(())
}

fn single<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<T> {
    t.item().ok_or_else(|| Error::InvalidShape {
        op,
        msg: format!("expected a single-element tensor, got shape {}", t.shape()),
    })
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            axis: "batch",
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean of `logsumexp(row) - row[label]` over the rows of (N,K) logits.
pub(crate) fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, k) = tensor::ops_as_matrix("cross_entropy", logits)?;
    check_labels(labels, n, k)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        total += log_sum_exp(row) - row[label];
    }
    Ok(total / T::lit(n as f64))
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Per-channel mean and biased variance over N, H and W.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let [n, c, h, w] = x.nchw("channel_moments")?;
    let plane = h * w;
    let count = T::lit((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.data()[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            for &e in &x.data()[(b * c + ch) * plane..][..plane] {
                v += (e - m) * (e - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    Ok((mean, var))
}

fn affine_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.nchw("batch_norm")?;
    tensor::check_axis("batch_norm", "gamma", c, gamma.numel())?;
    tensor::check_axis("batch_norm", "beta", c, beta.numel())?;
    tensor::check_axis("batch_norm", "statistics", c, mean.len().min(var.len()))?;
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        for ch in 0..c {
            let inv_std = T::one() / (var[ch] + eps).sqrt();
            let (g, bt, m) = (gamma.data()[ch], beta.data()[ch], mean[ch]);
            out.extend(
                x.data()[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&v| g * ((v - m) * inv_std) + bt),
            );
        }
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}
