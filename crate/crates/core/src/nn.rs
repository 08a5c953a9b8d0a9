//! Parameter storage, initialization and the conventional layers used by the
//! dense-block backbones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{channel_moments, Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics and other buffers are stored alongside weights but
    /// never receive gradients.
    pub trainable: bool,
}

/// Ordered, named collection of parameters and buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Overwrites values by name from `other`; every entry must be present
    /// with the same shape.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        for p in &mut self.entries {
            let (_, v) = other
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {:?}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {:?}: checkpoint shape {} differs from model shape {}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-gain * sqrt(6 / fan_in), +gain * sqrt(6 / fan_in)]`.
    FanInUniform { fan_in: usize, gain: f64 },
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, dims: &[usize], fan_in: usize) -> Self {
        ParamSpec {
            name: name.into(),
            dims: dims.to_vec(),
            init: Init::FanInUniform { fan_in, gain: 1.0 },
            trainable: true,
        }
    }

    pub fn constant(name: impl Into<String>, dims: &[usize], value: f64) -> Self {
        ParamSpec {
            name: name.into(),
            dims: dims.to_vec(),
            init: Init::Constant(value),
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, dims: &[usize], value: f64) -> Self {
        ParamSpec {
            trainable: false,
            ..Self::constant(name, dims, value)
        }
    }
}

/// Bound of the fan-in uniform scheme at unit gain.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

// FNV-1a; selects an independent RNG stream per parameter name so adding or
// removing parameters never shifts the values of the others.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Materializes `specs` deterministically from `seed`.
pub fn init_parameters<T: Scalar>(specs: &[ParamSpec], seed: u64) -> Result<ParamSet<T>> {
    let mut set = ParamSet::new();
    for spec in specs {
        if set.find(&spec.name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {:?}", spec.name)));
        }
        let value = match spec.init {
            Init::Constant(v) => {
                crate::tensor::Shape::new(&spec.dims)?;
                Tensor::full(&spec.dims, T::lit(v))
            }
            Init::FanInUniform { fan_in, gain } => {
                if fan_in == 0 {
                    return Err(Error::InvalidArgument(format!("{}: fan-in of zero", spec.name)));
                }
                crate::tensor::Shape::new(&spec.dims)?;
                let bound = gain * fan_in_bound(fan_in);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(name_stream(&spec.name));
                Tensor::from_fn(&spec.dims, |_| T::lit(rng.gen_range(-bound..bound)))
            }
        };
        set.push(spec.name.clone(), value, spec.trainable);
    }
    Ok(set)
}

/// BN-lite: per-channel normalization over N, H and W.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLite {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLite {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::constant(format!("{prefix}.gamma"), &[channels], 1.0),
            ParamSpec::constant(format!("{prefix}.beta"), &[channels], 0.0),
            ParamSpec::buffer(format!("{prefix}.running_mean"), &[channels], 0.0),
            ParamSpec::buffer(format!("{prefix}.running_var"), &[channels], 1.0),
        ]
    }

    /// Looks up the four entries created by [`BatchNormLite::specs`].
    pub fn bind<T: Scalar>(params: &ParamSet<T>, prefix: &str) -> Result<Self> {
        Ok(BatchNormLite {
            gamma: lookup(params, &format!("{prefix}.gamma"))?,
            beta: lookup(params, &format!("{prefix}.beta"))?,
            running_mean: lookup(params, &format!("{prefix}.running_mean"))?,
            running_var: lookup(params, &format!("{prefix}.running_var"))?,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }
}

pub(crate) fn lookup<T: Scalar>(params: &ParamSet<T>, name: &str) -> Result<ParamId> {
    params
        .find(name)
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    Relu,
    AvgPool2x2,
    GlobalAvgPool,
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNormLite(BatchNormLite),
}

struct StatUpdate<T> {
    mean: ParamId,
    var: ParamId,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    momentum: f64,
}

/// A forward pass in progress: the graph, the trainable parameters bound as
/// leaves, and running-statistic updates to apply once the pass succeeds.
pub struct ForwardCtx<'a, T> {
    pub graph: Graph<T>,
    params: &'a ParamSet<T>,
    nodes: Vec<Option<NodeId>>,
    training: bool,
    stats: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(params: &'a ParamSet<T>, training: bool) -> Self {
        let mut graph = Graph::new();
        let nodes = params
            .entries
            .iter()
            .map(|p| p.trainable.then(|| graph.param(p.name.clone(), p.value.clone())))
            .collect();
        ForwardCtx {
            graph,
            params,
            nodes,
            training,
            stats: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    /// Graph node of a trainable parameter.
    pub fn node(&self, id: ParamId) -> Result<NodeId> {
        self.nodes[id.0].ok_or_else(|| {
            Error::Graph(format!("parameter {:?} is not trainable", self.params.get(id).name))
        })
    }

    /// Gradients keyed by parameter; buffers are skipped.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (ParamId(i), grads.get(n).expect("param grad").clone())))
            .collect()
    }

    /// Applies queued running-statistic updates to `params`.
    pub fn commit_stats(&mut self, params: &mut ParamSet<T>) {
        for u in self.stats.drain(..) {
            let m = T::lit(u.momentum);
            let keep = T::one() - m;
            for (r, &b) in params.value_mut(u.mean).as_mut_slice().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in params.value_mut(u.var).as_mut_slice().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b;
            }
        }
    }

    pub fn layer(&mut self, layer: &Layer, x: NodeId) -> Result<NodeId> {
        match layer {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                let w = self.node(*weight)?;
                let b = bias.map(|b| self.node(b)).transpose()?;
                self.graph.conv2d(x, w, b, *stride, *pad)
            }
            Layer::Relu => self.graph.relu(x),
            Layer::AvgPool2x2 => self.graph.avgpool2x2(x),
            Layer::GlobalAvgPool => self.graph.global_avgpool(x),
            Layer::Linear { weight, bias } => {
                let w = self.node(*weight)?;
                let b = bias.map(|b| self.node(b)).transpose()?;
                self.graph.linear(x, w, b)
            }
            Layer::BatchNormLite(bn) => {
                let gamma = self.node(bn.gamma)?;
                let beta = self.node(bn.beta)?;
                let eps = T::lit(bn.eps);
                if self.training {
                    let xv = self.graph.expect_value(x)?;
                    let [n, c, h, w] = xv.nchw("batch_norm")?;
                    check_axis("batch_norm", "channels", self.params.value(bn.gamma).numel(), c)?;
                    let count = n * h * w;
                    if count < 2 {
                        return Err(Error::InvalidArgument(
                            "batch_norm: training needs at least two values per channel".into(),
                        ));
                    }
                    let (mean, var) = channel_moments(xv)?;
                    let unbias = T::lit(count as f64 / (count - 1) as f64);
                    self.stats.push(StatUpdate {
                        mean: bn.running_mean,
                        var: bn.running_var,
                        batch_mean: mean,
                        batch_var: var.into_iter().map(|v| v * unbias).collect(),
                        momentum: bn.momentum,
                    });
                    self.graph.batch_norm(x, gamma, beta, eps)
                } else {
                    let mean = self.params.value(bn.running_mean).data().to_vec();
                    let var = self.params.value(bn.running_var).data().to_vec();
                    self.graph.batch_norm_eval(x, gamma, beta, mean, var, eps)
                }
            }
        }
    }
}

/// Runs one layer on a concrete tensor. In training mode a batch-norm layer
/// updates its running statistics in `params`.
pub fn layer_forward<T: Scalar>(
    layer: &Layer,
    params: &mut ParamSet<T>,
    x: &Tensor<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let snapshot = params.clone();
    let mut ctx = ForwardCtx::new(&snapshot, training);
    let input = ctx.graph.input(x.clone());
    let out = ctx.layer(layer, input)?;
    let value = ctx.graph.expect_value(out)?.clone();
    ctx.commit_stats(params);
    Ok(value)
}
