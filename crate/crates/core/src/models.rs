//! Dense-block classifiers with optional selective feature connections.
//!
//! Layout: `stem conv3x3 -> [dense block -> avgpool]* -> dense block ->
//! BN -> ReLU -> global pool -> linear`. Each dense layer is
//! BN-ReLU-Conv3x3 producing `growth_rate` channels. Inside an SFCM-enabled
//! block the accumulated features play the low-layer role and the new
//! layer's output the high-layer role at every concatenation.

use serde::{Deserialize, Serialize};

use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::nn::{init_parameters, lookup, BatchNormLite, ForwardCtx, Init, Layer, ParamId, ParamSet, ParamSpec};
use crate::scalar::Scalar;
use crate::sfcm::{connect_graph, ConnectionMode, SfcmNodes};
use crate::tensor::{check_axis, Tensor};

fn default_selector_gain() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub input_channels: usize,
    /// Height and width of the (square) input.
    pub input_size: usize,
    pub classes: usize,
    /// Channels produced by the stem convolution.
    pub stem_channels: usize,
    pub mode: ConnectionMode,
    /// 1-based indices of blocks whose concatenations use the selector.
    #[serde(default)]
    pub sfcm_blocks: Vec<usize>,
    /// Multiplier on the fan-in uniform bound for selector weights.
    #[serde(default = "default_selector_gain")]
    pub selector_init_gain: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2 blocks of 3 layers, growth 8, 16x16 RGB input.
    pub fn desk(classes: usize, mode: ConnectionMode) -> Self {
        ModelConfig {
            blocks: 2,
            layers_per_block: 3,
            growth_rate: 8,
            input_channels: 3,
            input_size: 16,
            classes,
            stem_channels: 8,
            sfcm_blocks: if mode.uses_selector() { vec![1, 2] } else { vec![] },
            mode,
            selector_init_gain: default_selector_gain(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.blocks == 0 || self.layers_per_block == 0 || self.growth_rate == 0 {
            return bad("blocks, layers_per_block and growth_rate must be positive".into());
        }
        if self.input_channels == 0 || self.stem_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least two classes, got {}", self.classes));
        }
        let shrink = 1usize << (self.blocks - 1);
        if self.input_size < shrink || !self.input_size.is_multiple_of(shrink) {
            return bad(format!(
                "input size {} cannot be halved {} times",
                self.input_size,
                self.blocks - 1
            ));
        }
        if !self.sfcm_blocks.is_empty() && !self.mode.uses_selector() {
            return bad("sfcm_blocks must be empty in baseline mode".into());
        }
        let mut seen = vec![false; self.blocks + 1];
        for &b in &self.sfcm_blocks {
            if b == 0 || b > self.blocks {
                return bad(format!("sfcm block {b} outside 1..={}", self.blocks));
            }
            if std::mem::replace(&mut seen[b], true) {
                return bad(format!("sfcm block {b} listed twice"));
            }
        }
        if !(self.selector_init_gain.is_finite() && self.selector_init_gain >= 0.0) {
            return bad("selector_init_gain must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Channels entering block `b` (0-based).
    pub fn block_input_channels(&self, b: usize) -> usize {
        self.stem_channels + b * self.layers_per_block * self.growth_rate
    }

    pub fn block_output_channels(&self, b: usize) -> usize {
        self.block_input_channels(b) + self.layers_per_block * self.growth_rate
    }

    /// Total number of BN-ReLU-Conv feature layers across all blocks.
    pub fn dense_layer_count(&self) -> usize {
        self.blocks * self.layers_per_block
    }

    pub fn uses_sfcm(&self, block: usize) -> bool {
        self.mode.uses_selector() && self.sfcm_blocks.contains(&(block + 1))
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let k = self.growth_rate;
        let mut specs = vec![ParamSpec::weight(
            "stem.conv.w",
            &[self.stem_channels, self.input_channels, 3, 3],
            self.input_channels * 9,
        )];
        for b in 0..self.blocks {
            let cin = self.block_input_channels(b);
            for l in 0..self.layers_per_block {
                let c = cin + l * k;
                let prefix = format!("block{}.layer{}", b + 1, l + 1);
                specs.extend(BatchNormLite::specs(&format!("{prefix}.bn"), c));
                specs.push(ParamSpec::weight(format!("{prefix}.conv.w"), &[k, c, 3, 3], c * 9));
                if self.uses_sfcm(b) {
                    specs.push(ParamSpec {
                        init: Init::FanInUniform {
                            fan_in: k,
                            gain: self.selector_init_gain,
                        },
                        ..ParamSpec::weight(format!("{prefix}.sfcm.w_g"), &[1, k, 1, 1], k)
                    });
                    specs.push(ParamSpec::constant(format!("{prefix}.sfcm.b_g"), &[1], 0.0));
                    if self.mode == ConnectionMode::Residual {
                        specs.push(ParamSpec::constant(format!("{prefix}.sfcm.w_x"), &[1], 0.0));
                    }
                }
            }
        }
        let cf = self.block_output_channels(self.blocks - 1);
        specs.extend(BatchNormLite::specs("head.bn", cf));
        specs.push(ParamSpec::weight("head.fc.w", &[self.classes, cf], cf));
        specs.push(ParamSpec::constant("head.fc.b", &[self.classes], 0.0));
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SiteParams {
    w_g: ParamId,
    b_g: ParamId,
    w_x: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
struct DenseLayer {
    bn: Layer,
    conv: Layer,
    site: Option<SiteParams>,
}

/// One dense block; layer `l` sees the concatenation of the block input and
/// the outputs of layers `0..l`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlockLite {
    layers: Vec<DenseLayer>,
}

impl DenseBlockLite {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn has_selector(&self) -> bool {
        self.layers.iter().any(|l| l.site.is_some())
    }
}

/// Where a selector map was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteIndex {
    /// Position among all selector sites in forward order.
    pub site: usize,
    /// 1-based block and layer.
    pub block: usize,
    pub layer: usize,
}

#[derive(Clone, Debug)]
pub struct SelectorMap<T> {
    pub index: SiteIndex,
    /// (N, 1, H, W)
    pub map: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    /// (N, classes)
    pub logits: Tensor<T>,
    pub selector_maps: Vec<SelectorMap<T>>,
}

/// Graph handles produced by [`Model::record`].
#[derive(Clone, Debug)]
pub struct Recorded {
    pub logits: NodeId,
    pub selectors: Vec<(SiteIndex, NodeId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub params: ParamSet<T>,
    stem: Layer,
    blocks: Vec<DenseBlockLite>,
    head_bn: Layer,
    head_fc: Layer,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_parameters(&config.param_specs(), seed)?;
        Self::from_params(config, params)
    }

    /// Wires layers to an existing parameter set (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_specs();
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "model expects {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for spec in &expected {
            let id = lookup(&params, &spec.name)?;
            if params.value(id).dims() != spec.dims.as_slice() {
                return Err(Error::Format(format!("parameter {:?} has the wrong shape", spec.name)));
            }
        }
        let stem = Layer::Conv2d {
            weight: lookup(&params, "stem.conv.w")?,
            bias: None,
            stride: 1,
            pad: 1,
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut layers = Vec::with_capacity(config.layers_per_block);
            for l in 0..config.layers_per_block {
                let prefix = format!("block{}.layer{}", b + 1, l + 1);
                let site = if config.uses_sfcm(b) {
                    Some(SiteParams {
                        w_g: lookup(&params, &format!("{prefix}.sfcm.w_g"))?,
                        b_g: lookup(&params, &format!("{prefix}.sfcm.b_g"))?,
                        w_x: match config.mode {
                            ConnectionMode::Residual => Some(lookup(&params, &format!("{prefix}.sfcm.w_x"))?),
                            _ => None,
                        },
                    })
                } else {
                    None
                };
                layers.push(DenseLayer {
                    bn: Layer::BatchNormLite(BatchNormLite::bind(&params, &format!("{prefix}.bn"))?),
                    conv: Layer::Conv2d {
                        weight: lookup(&params, &format!("{prefix}.conv.w"))?,
                        bias: None,
                        stride: 1,
                        pad: 1,
                    },
                    site,
                });
            }
            blocks.push(DenseBlockLite { layers });
        }
        Ok(Model {
            head_bn: Layer::BatchNormLite(BatchNormLite::bind(&params, "head.bn")?),
            head_fc: Layer::Linear {
                weight: lookup(&params, "head.fc.w")?,
                bias: Some(lookup(&params, "head.fc.b")?),
            },
            config,
            params,
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[DenseBlockLite] {
        &self.blocks
    }

    pub fn selector_site_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.layers)
            .filter(|l| l.site.is_some())
            .count()
    }

    /// Records the forward pass of `images` (N,C,H,W) on `ctx`.
    pub fn record(&self, ctx: &mut ForwardCtx<'_, T>, images: NodeId) -> Result<Recorded> {
        let dims = ctx.graph.expect_value(images)?.nchw("model_forward")?;
        check_axis("model_forward", "channels", self.config.input_channels, dims[1])?;
        check_axis("model_forward", "height", self.config.input_size, dims[2])?;
        check_axis("model_forward", "width", self.config.input_size, dims[3])?;

        let mut selectors = Vec::new();
        let mut features = ctx.layer(&self.stem, images)?;
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                features = ctx.layer(&Layer::AvgPool2x2, features)?;
            }
            for (l, layer) in block.layers.iter().enumerate() {
                let h = ctx.layer(&layer.bn, features)?;
                let h = ctx.layer(&Layer::Relu, h)?;
                let fresh = ctx.layer(&layer.conv, h)?;
                let (nodes, mode) = match &layer.site {
                    Some(site) => (
                        Some(SfcmNodes {
                            w_g: ctx.node(site.w_g)?,
                            b_g: Some(ctx.node(site.b_g)?),
                            w_x: site.w_x.map(|w| ctx.node(w)).transpose()?,
                        }),
                        self.config.mode,
                    ),
                    None => (None, ConnectionMode::Baseline),
                };
                let joined = connect_graph(&mut ctx.graph, features, fresh, nodes.as_ref(), mode)?;
                if let Some(s) = joined.selector {
                    let index = SiteIndex {
                        site: selectors.len(),
                        block: b + 1,
                        layer: l + 1,
                    };
                    selectors.push((index, s));
                }
                features = joined.output;
            }
        }
        let h = ctx.layer(&self.head_bn, features)?;
        let h = ctx.layer(&Layer::Relu, h)?;
        let pooled = ctx.layer(&Layer::GlobalAvgPool, h)?;
        let logits = ctx.layer(&self.head_fc, pooled)?;
        Ok(Recorded { logits, selectors })
    }

    /// Forward pass on concrete images. Training mode normalizes with batch
    /// statistics and updates running statistics.
    pub fn forward(&mut self, images: &Tensor<T>, training: bool) -> Result<ModelOutput<T>> {
        let snapshot = self.params.clone();
        let mut ctx = ForwardCtx::new(&snapshot, training);
        let out = self.run(&mut ctx, images)?;
        ctx.commit_stats(&mut self.params);
        Ok(out)
    }

    /// Eval-mode forward pass; never mutates the model.
    pub fn predict(&self, images: &Tensor<T>) -> Result<ModelOutput<T>> {
        let mut ctx = ForwardCtx::new(&self.params, false);
        self.run(&mut ctx, images)
    }

    fn run(&self, ctx: &mut ForwardCtx<'_, T>, images: &Tensor<T>) -> Result<ModelOutput<T>> {
        let input = ctx.graph.input(images.clone());
        let rec = self.record(ctx, input)?;
        let logits = ctx.graph.expect_value(rec.logits)?.clone();
        let selector_maps = rec
            .selectors
            .iter()
            .map(|&(index, node)| {
                Ok(SelectorMap {
                    index,
                    map: ctx.graph.expect_value(node)?.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelOutput { logits, selector_maps })
    }
}
