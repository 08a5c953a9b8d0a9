//! Finite-difference checks for every differentiable op and for the selector
//! block, each on many random small instances.
//!
//! Every instance wraps the op under test as `sum(op(params) * c)` with a
//! random constant `c`, so every output element contributes to the loss with
//! a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{gradcheck_with, GradcheckConfig};
use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::sfcm::{connect_graph, ConnectionMode, SfcmNodes};
use crate::tensor::Tensor;

/// Names accepted by [`check_op`], in suite order.
pub const OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "scale_by",
    "relu",
    "concat_channels",
    "spatial_softmax",
    "broadcast_gate",
    "conv2d",
    "avgpool2x2",
    "global_avgpool",
    "upsample2x",
    "linear",
    "batch_norm",
    "batch_norm_eval",
    "sum",
    "mean",
    "cross_entropy",
    "sfcm_direct",
    "sfcm_residual",
];

/// Minimum distance of ReLU inputs from the kink.
pub const RELU_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub instances: usize,
    pub check: GradcheckConfig,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 50,
            check: GradcheckConfig::new(1e-5, 1e-5),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    /// Worst relative error over all instances and parameters.
    pub max_rel_err: f64,
    pub failed_instances: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.failed_instances == 0
    }
}

/// CSV with one row per op: `op,instances,max_rel_err,pass`.
pub fn reports_csv(reports: &[OpReport]) -> String {
    let mut out = String::from("op,instances,max_rel_err,pass\n");
    for r in reports {
        out.push_str(&format!("{},{},{:e},{}\n", r.op, r.instances, r.max_rel_err, r.passed()));
    }
    out
}

struct Builder {
    rng: ChaCha8Rng,
    graph: Graph<f64>,
}

impl Builder {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    fn values(&mut self, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| self.rng.gen_range(-1.0..1.0))
    }

    fn param(&mut self, name: &str, dims: &[usize]) -> NodeId {
        let v = self.values(dims);
        self.graph.param(name, v)
    }

    fn param_away_from_zero(&mut self, name: &str, dims: &[usize]) -> NodeId {
        let v = Tensor::from_fn(dims, |_| {
            let mag = self.rng.gen_range(RELU_MARGIN..1.0);
            if self.rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        });
        self.graph.param(name, v)
    }

    fn nchw(&mut self, c_hi: usize) -> [usize; 4] {
        [self.dim(1, 3), self.dim(1, c_hi), self.dim(1, 5), self.dim(1, 5)]
    }

    /// `sum(out * c)` for a random constant `c` shaped like `out`.
    fn weighted_sum(&mut self, out: NodeId) -> Result<NodeId> {
        let dims = self.graph.expect_value(out)?.dims().to_vec();
        let c = self.values(&dims);
        let c = self.graph.input(c);
        let prod = self.graph.mul(out, c)?;
        self.graph.sum(prod)
    }
}

fn build(op: &str, b: &mut Builder) -> Result<NodeId> {
    let out = match op {
        "add" | "mul" => {
            let d = b.nchw(4);
            let x = b.param("a", &d);
            let y = b.param("b", &d);
            if op == "add" {
                b.graph.add(x, y)?
            } else {
                b.graph.mul(x, y)?
            }
        }
        "scale" => {
            let d = b.nchw(4);
            let x = b.param("x", &d);
            let f = b.rng.gen_range(-2.0..2.0);
            b.graph.scale(x, f)?
        }
        "scale_by" => {
            let d = b.nchw(4);
            let x = b.param("x", &d);
            let s = b.param("s", &[1]);
            b.graph.scale_by(x, s)?
        }
        "relu" => {
            let d = b.nchw(4);
            let x = b.param_away_from_zero("x", &d);
            b.graph.relu(x)?
        }
        "concat_channels" => {
            let [n, c1, h, w] = b.nchw(4);
            let c2 = b.dim(1, 4);
            let x = b.param("x", &[n, c1, h, w]);
            let y = b.param("y", &[n, c2, h, w]);
            b.graph.concat(x, y)?
        }
        "spatial_softmax" => {
            let [n, _, h, w] = b.nchw(1);
            let m = b.param("m", &[n, 1, h, w]);
            b.graph.spatial_softmax(m)?
        }
        "broadcast_gate" => {
            let [n, c, h, w] = b.nchw(4);
            let x = b.param("x", &[n, c, h, w]);
            let s = b.param("s", &[n, 1, h, w]);
            b.graph.gate(x, s)?
        }
        "conv2d" => {
            let k = if b.rng.gen_bool(0.5) { 1 } else { 3 };
            let stride = b.dim(1, 2);
            let pad = b.dim(0, k / 2);
            let lo = (k - 2 * pad).max(1);
            let dims = [b.dim(1, 2), b.dim(1, 3), b.dim(lo, 5), b.dim(lo, 5)];
            let cout = b.dim(1, 3);
            let x = b.param("x", &dims);
            let w = b.param("w", &[cout, dims[1], k, k]);
            let bias = if b.rng.gen_bool(0.5) {
                Some(b.param("b", &[cout]))
            } else {
                None
            };
            b.graph.conv2d(x, w, bias, stride, pad)?
        }
        "avgpool2x2" => {
            let dims = [b.dim(1, 3), b.dim(1, 3), b.dim(2, 5), b.dim(2, 5)];
            let x = b.param("x", &dims);
            b.graph.avgpool2x2(x)?
        }
        "global_avgpool" => {
            let d = b.nchw(4);
            let x = b.param("x", &d);
            b.graph.global_avgpool(x)?
        }
        "upsample2x" => {
            let d = b.nchw(3);
            let x = b.param("x", &d);
            b.graph.upsample2x(x)?
        }
        "linear" => {
            let (n, i, o) = (b.dim(1, 5), b.dim(1, 5), b.dim(1, 5));
            let x = b.param("x", &[n, i]);
            let w = b.param("w", &[o, i]);
            let bias = b.param("b", &[o]);
            b.graph.linear(x, w, Some(bias))?
        }
        "batch_norm" | "batch_norm_eval" => {
            let mut d = b.nchw(3);
            if d[0] * d[2] * d[3] < 2 {
                d[2] = 2;
            }
            let c = d[1];
            let x = b.param("x", &d);
            let gamma = b.param("gamma", &[c]);
            let beta = b.param("beta", &[c]);
            if op == "batch_norm" {
                b.graph.batch_norm(x, gamma, beta, 1e-5)?
            } else {
                let mean = (0..c).map(|_| b.rng.gen_range(-0.5..0.5)).collect();
                let var = (0..c).map(|_| b.rng.gen_range(0.1..2.0)).collect();
                b.graph.batch_norm_eval(x, gamma, beta, mean, var, 1e-5)?
            }
        }
        "sum" | "mean" => {
            let d = b.nchw(4);
            let x = b.param("x", &d);
            let r = if op == "sum" { b.graph.sum(x)? } else { b.graph.mean(x)? };
            let f = b.rng.gen_range(0.5..2.0);
            return b.graph.scale(r, f);
        }
        "cross_entropy" => {
            let (n, k) = (b.dim(1, 5), b.dim(2, 5));
            let logits = b.param("logits", &[n, k]);
            let labels: Vec<usize> = (0..n).map(|_| b.rng.gen_range(0..k)).collect();
            return b.graph.cross_entropy(logits, &labels);
        }
        "sfcm_direct" | "sfcm_residual" => {
            let [n, c1, h, w] = b.nchw(4);
            let c2 = b.dim(1, 4);
            let x = b.param("x", &[n, c1, h, w]);
            let y = b.param("y", &[n, c2, h, w]);
            let w_g = b.param("w_g", &[1, c2, 1, 1]);
            let (mode, w_x) = if op == "sfcm_direct" {
                (ConnectionMode::Direct, None)
            } else {
                (ConnectionMode::Residual, Some(b.param("w_x", &[1])))
            };
            // No selector bias: the spatial softmax cancels any constant
            // shift, so its gradient is exactly zero and a relative error
            // against it only measures rounding in the loss.
            let nodes = SfcmNodes { w_g, b_g: None, w_x };
            connect_graph(&mut b.graph, x, y, Some(&nodes), mode)?.output
        }
        other => return Err(Error::InvalidArgument(format!("unknown op {other:?}"))),
    };
    b.weighted_sum(out)
}

/// Runs `config.instances` random checks of one op.
pub fn check_op(op: &str, config: &SuiteConfig) -> Result<OpReport> {
    let Some(index) = OPS.iter().position(|&o| o == op) else {
        return Err(Error::InvalidArgument(format!("unknown op {op:?}")));
    };
    let mut report = OpReport {
        op: op.to_string(),
        instances: config.instances,
        max_rel_err: 0.0,
        failed_instances: 0,
    };
    for i in 0..config.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(((index as u64) << 32) | i as u64);
        let mut b = Builder {
            rng,
            graph: Graph::new(),
        };
        let loss = build(op, &mut b)?;
        let r = gradcheck_with(&mut b.graph, loss, config.check)?;
        report.max_rel_err = report.max_rel_err.max(r.max_rel_err());
        if !r.passed() {
            report.failed_instances += 1;
        }
    }
    Ok(report)
}

/// Runs every op in [`OPS`].
pub fn check_all(config: &SuiteConfig) -> Result<Vec<OpReport>> {
    OPS.iter().map(|op| check_op(op, config)).collect()
}
