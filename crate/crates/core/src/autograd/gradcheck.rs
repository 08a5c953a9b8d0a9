//! Central-difference verification of analytic gradients.

use std::fmt::Write as _;

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Recommended step-size range for double precision.
pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Reject `eps` outside [`EPS_RANGE`]. Turned off only to demonstrate
    /// step-size sensitivity.
    pub enforce_eps_range: bool,
}

impl GradcheckConfig {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradcheckConfig {
            eps,
            tol,
            enforce_eps_range: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// `param,max_rel_err,pass` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,max_rel_err,pass\n");
        for p in &self.params {
            writeln!(out, "{},{:e},{}", p.name, p.max_rel_err, p.passed).unwrap();
        }
        out
    }
}

/// Relative error between two gradient tensors:
/// `max|a - n| / max(1e-8, max(|a| + |n|))`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs() + n.abs());
    }
    diff / scale.max(1e-8)
}

pub fn gradcheck(graph: &mut Graph<f64>, loss: NodeId, eps: f64, tol: f64) -> Result<GradcheckReport> {
    gradcheck_with(graph, loss, GradcheckConfig::new(eps, tol))
}

/// Compares the analytic gradient of every parameter of `graph` against
/// central differences `(f(p + eps) - f(p - eps)) / (2 eps)`, one coordinate
/// at a time. Parameter values are restored before returning.
pub fn gradcheck_with(
    graph: &mut Graph<f64>,
    loss: NodeId,
    config: GradcheckConfig,
) -> Result<GradcheckReport> {
    let GradcheckConfig {
        eps,
        tol,
        enforce_eps_range,
    } = config;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("gradcheck: eps must be positive, got {eps}")));
    }
    if enforce_eps_range && !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "gradcheck: eps {eps} outside [{}, {}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }

    let base = graph.forward(&[], loss)?.clone();
    if !base.shape().is_scalar() {
        return Err(Error::Graph(format!("gradcheck needs a scalar loss, got shape {}", base.shape())));
    }
    let again = graph.forward(&[], loss)?;
    if !again.bit_eq(&base) {
        return Err(Error::NonDeterministic(
            "two evaluations at the same point disagree".into(),
        ));
    }
    let analytic = graph.backward(loss)?;

    let params = graph.params().to_vec();
    let mut report = GradcheckReport::default();
    for (pi, &p) in params.iter().enumerate() {
        let original = graph.expect_value(p)?.clone();
        let mut numeric = Vec::with_capacity(original.numel());
        let mut probe = original.clone();
        for i in 0..original.numel() {
            let x0 = original.data()[i];
            probe.as_mut_slice()[i] = x0 + eps;
            let up = eval_at(graph, p, &probe, loss)?;
            probe.as_mut_slice()[i] = x0 - eps;
            let down = eval_at(graph, p, &probe, loss)?;
            probe.as_mut_slice()[i] = x0;
            numeric.push((up - down) / (2.0 * eps));
        }
        graph.set_value(p, original)?;

        let a = analytic.get(p).expect("every param has a gradient");
        let err = relative_error(a.data(), &numeric);
        let name = graph
            .name(p)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("param{pi}"));
        report.params.push(ParamCheck {
            name,
            max_rel_err: err,
            passed: err < tol,
        });
    }
    graph.forward(&[], loss)?;
    Ok(report)
}

fn eval_at(graph: &mut Graph<f64>, p: NodeId, value: &Tensor<f64>, loss: NodeId) -> Result<f64> {
    graph.set_value(p, value.clone())?;
    let v = graph.forward(&[], loss)?;
    Ok(v.data()[0])
}
