//! Selective feature connection block.
//!
//! Given low-layer features `x` (N,C1,H,W) and high-layer features `y`
//! (N,C2,H,W):
//!
//! ```text
//! M  = w_g * y + b_g                      1x1 convolution, one output channel
//! S  = softmax over all H*W positions of M, per image
//! Xs = S (broadcast over channels) . x
//! baseline: O = [x, y]
//! direct:   O = [Xs, y]
//! residual: O = [w_x * Xs + x, y]
//! ```
//!
//! With `w_x = 0` the residual output is exactly the baseline output, so the
//! block can be dropped into a trained network without changing it.
//!
//! Functions here come in two flavours: plain tensor functions for inference
//! and testing, and [`connect_graph`] which records the same computation on an
//! autodiff [`Graph`].

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, check_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionMode {
    /// Plain concatenation `[x, y]`.
    Baseline,
    /// `[Xs, y]`.
    Direct,
    /// `[w_x * Xs + x, y]`.
    Residual,
}

impl ConnectionMode {
    pub fn uses_selector(self) -> bool {
        !matches!(self, ConnectionMode::Baseline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConnectionMode::Baseline => "baseline",
            ConnectionMode::Direct => "direct",
            ConnectionMode::Residual => "residual",
        }
    }
}

impl std::str::FromStr for ConnectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ConnectionMode::Baseline),
            "direct" => Ok(ConnectionMode::Direct),
            "residual" => Ok(ConnectionMode::Residual),
            other => Err(Error::InvalidArgument(format!("unknown connection mode {other:?}"))),
        }
    }
}

/// Learnable selector weights for one connection site.
#[derive(Clone, Debug, PartialEq)]
pub struct SfcmParams<T> {
    /// (1, C2, 1, 1)
    pub w_g: Tensor<T>,
    pub b_g: Option<T>,
    /// Residual scale; required for [`ConnectionMode::Residual`].
    pub w_x: Option<T>,
}

impl<T: Scalar> SfcmParams<T> {
    pub fn new(w_g: Tensor<T>, b_g: Option<T>, w_x: Option<T>) -> Result<Self> {
        let [o, _, kh, kw] = w_g.nchw("sfcm_params")?;
        if o != 1 || kh != 1 || kw != 1 {
            return Err(Error::InvalidShape {
                op: "sfcm_params",
                msg: format!("w_g must be (1, C2, 1, 1), got {}", w_g.shape()),
            });
        }
        w_g.ensure_finite("sfcm_params")?;
        if b_g.iter().chain(w_x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "sfcm_params",
                index: 0,
            });
        }
        Ok(SfcmParams { w_g, b_g, w_x })
    }

    /// Selector with zero weights and bias (uniform `S`) and `w_x = 0`.
    pub fn zeros(high_channels: usize) -> Self {
        SfcmParams {
            w_g: Tensor::zeros(&[1, high_channels, 1, 1]),
            b_g: Some(T::zero()),
            w_x: Some(T::zero()),
        }
    }

    pub fn high_channels(&self) -> usize {
        self.w_g.dims()[1]
    }

    /// Adds the parameters to `graph` as trainable leaves named
    /// `{prefix}.w_g`, `{prefix}.b_g`, `{prefix}.w_x`.
    pub fn register(&self, graph: &mut Graph<T>, prefix: &str) -> SfcmNodes {
        SfcmNodes {
            w_g: graph.param(format!("{prefix}.w_g"), self.w_g.clone()),
            b_g: self
                .b_g
                .map(|b| graph.param(format!("{prefix}.b_g"), Tensor::scalar(b))),
            w_x: self
                .w_x
                .map(|w| graph.param(format!("{prefix}.w_x"), Tensor::scalar(w))),
        }
    }
}

/// M = w_g * y (+ b_g): (N,C2,H,W) -> (N,1,H,W).
pub fn selector_logits<T: Scalar>(y: &Tensor<T>, params: &SfcmParams<T>) -> Result<Tensor<T>> {
    let [_, c2, _, _] = y.nchw("selector_logits")?;
    check_axis("selector_logits", "high-layer channels", params.high_channels(), c2)?;
    let bias = params.b_g.map(Tensor::scalar);
    tensor::conv2d(y, &params.w_g, bias.as_ref(), 1, 0)
}

/// S = spatial softmax of the logits, per image.
pub fn feature_selector<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    tensor::spatial_softmax(m)
}

/// Xs = S . x, the selector broadcast across every channel of `x`.
pub fn select_features<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    tensor::broadcast_gate(x, s)
}

fn check_spatial(x_dims: &[usize], y_dims: &[usize]) -> Result<()> {
    const OP: &str = "connect";
    if x_dims.len() != 4 || y_dims.len() != 4 {
        return Err(Error::InvalidShape {
            op: OP,
            msg: "x and y must be NCHW".into(),
        });
    }
    check_axis(OP, "batch", x_dims[0], y_dims[0])?;
    check_axis(OP, "height", x_dims[2], y_dims[2])?;
    check_axis(OP, "width", x_dims[3], y_dims[3])
}

fn require<P>(params: Option<&P>, mode: ConnectionMode) -> Result<&P> {
    params.ok_or_else(|| {
        Error::InvalidArgument(format!("connect: {} mode needs selector parameters", mode.as_str()))
    })
}

fn missing_scale() -> Error {
    Error::InvalidArgument("connect: residual mode needs a w_x scale".into())
}

/// Concatenates `x` and `y` according to `mode`. Spatial sizes must already
/// agree; resampling is the caller's job.
pub fn connect<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    params: Option<&SfcmParams<T>>,
    mode: ConnectionMode,
) -> Result<Tensor<T>> {
    check_spatial(x.dims(), y.dims())?;
    match mode {
        ConnectionMode::Baseline => tensor::concat_channels(x, y),
        ConnectionMode::Direct => {
            let p = require(params, mode)?;
            let s = feature_selector(&selector_logits(y, p)?)?;
            tensor::concat_channels(&select_features(x, &s)?, y)
        }
        ConnectionMode::Residual => {
            let p = require(params, mode)?;
            let w_x = p.w_x.ok_or_else(missing_scale)?;
            let s = feature_selector(&selector_logits(y, p)?)?;
            let xs = select_features(x, &s)?;
            let low = tensor::add(x, &tensor::scale(&xs, w_x))?;
            tensor::concat_channels(&low, y)
        }
    }
}

/// Graph handles for one site's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SfcmNodes {
    pub w_g: NodeId,
    pub b_g: Option<NodeId>,
    pub w_x: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Connection {
    pub output: NodeId,
    /// The selector map `S`, absent in baseline mode.
    pub selector: Option<NodeId>,
}

/// Records [`connect`] on `graph`.
pub fn connect_graph<T: Scalar>(
    graph: &mut Graph<T>,
    x: NodeId,
    y: NodeId,
    params: Option<&SfcmNodes>,
    mode: ConnectionMode,
) -> Result<Connection> {
    if let (Some(xv), Some(yv)) = (graph.value(x), graph.value(y)) {
        check_spatial(xv.dims(), yv.dims())?;
    }
    if mode == ConnectionMode::Baseline {
        return Ok(Connection {
            output: graph.concat(x, y)?,
            selector: None,
        });
    }
    let p = require(params, mode)?;
    let m = graph.conv2d(y, p.w_g, p.b_g, 1, 0)?;
    let s = graph.spatial_softmax(m)?;
    let xs = graph.gate(x, s)?;
    let low = match mode {
        ConnectionMode::Direct => xs,
        _ => {
            let w_x = p.w_x.ok_or_else(missing_scale)?;
            let scaled = graph.scale_by(xs, w_x)?;
            graph.add(x, scaled)?
        }
    };
    Ok(Connection {
        output: graph.concat(low, y)?,
        selector: Some(s),
    })
}
