//! Capsule layers and dynamic routing.
//!
//! Routing coefficients are computed outside the tape and enter the final
//! routing iteration as constants, so gradients reach the prediction
//! vectors (and through them the transform matrices) but not the routing
//! logits.

use ndtensor::{sigmoid, softmax_along, CustomOp, Tape, Tensor, Var, NORM_EPS};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Independent per-edge logistic coefficients.
    Sigmoid,
    /// Coefficients normalized across parents for every child.
    Softmax,
}

impl RoutingMode {
    pub fn default_prior(self) -> f64 {
        match self {
            RoutingMode::Sigmoid => 1.0,
            RoutingMode::Softmax => 0.0,
        }
    }
}

pub const DEFAULT_ROUTING_ITERATIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub mode: RoutingMode,
    pub iterations: usize,
    pub prior_init: f64,
}

impl RoutingConfig {
    pub fn new(mode: RoutingMode, iterations: usize) -> Self {
        Self {
            mode,
            iterations,
            prior_init: mode.default_prior(),
        }
    }

    pub fn sigmoid() -> Self {
        Self::new(RoutingMode::Sigmoid, DEFAULT_ROUTING_ITERATIONS)
    }

    pub fn softmax() -> Self {
        Self::new(RoutingMode::Softmax, DEFAULT_ROUTING_ITERATIONS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        if self.prior_init != self.mode.default_prior() {
            return Err(Error::Config(format!(
                "{:?} routing starts from prior {}, got {}",
                self.mode,
                self.mode.default_prior(),
                self.prior_init
            )));
        }
        Ok(())
    }
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self::sigmoid()
    }
}

/// A set of capsule types laid out over a grid; `data` is `[types * rows * cols, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleTensor {
    pub types: usize,
    pub grid: (usize, usize),
    pub dim: usize,
    pub data: Var,
}

impl CapsuleTensor {
    pub fn count(&self) -> usize {
        self.types * self.grid.0 * self.grid.1
    }
}

// ----- squash ------------------------------------------------------------

/// `(|s|^2 / (1 + |s|^2)) * s / |s|`, with the zero vector mapped to zero.
pub fn squash_vector(s: &[f64]) -> Vec<f64> {
    let q: f64 = s.iter().map(|v| v * v).sum();
    let n = q.sqrt();
    if n <= NORM_EPS {
        return vec![0.0; s.len()];
    }
    let factor = n / (1.0 + q);
    s.iter().map(|v| v * factor).collect()
}

struct SquashOp {
    dim: usize,
}

impl CustomOp for SquashOp {
    fn name(&self) -> &'static str {
        "squash"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let s = inputs[0].data();
        let g = grad_output.data();
        let mut ds = vec![0.0; s.len()];
        for (row, (sv, gv)) in s.chunks(self.dim).zip(g.chunks(self.dim)).enumerate() {
            let q: f64 = sv.iter().map(|v| v * v).sum();
            let n = q.sqrt();
            if n <= NORM_EPS {
                continue;
            }
            let factor = n / (1.0 + q);
            // d factor / dq = (1 - q) / (2 n (1 + q)^2); chain rule through q = |s|^2
            let radial = (1.0 - q) / (n * (1.0 + q).powi(2));
            let dot: f64 = sv.iter().zip(gv).map(|(a, b)| a * b).sum();
            for k in 0..self.dim {
                ds[row * self.dim + k] = factor * gv[k] + radial * dot * sv[k];
            }
        }
        vec![Tensor::new(inputs[0].shape(), ds).expect("same shape as input")]
    }
}

/// Squashes every vector along the last axis.
pub fn squash(tape: &mut Tape, s: Var) -> Result<Var> {
    let value = tape.value(s);
    let dim = *value
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("squash", "scalar input has no vector axis"))?;
    let out: Vec<f64> = value.data().chunks(dim).flat_map(squash_vector).collect();
    let out = Tensor::new(value.shape(), out)?;
    Ok(tape.custom(&[s], out, Box::new(SquashOp { dim }))?)
}

// ----- routing coefficients ------------------------------------------------

/// `r = exp(b) / (exp(b) + 1)` applied independently to every entry.
pub fn routing_sigmoid(logits: &Tensor) -> Tensor {
    logits.map(sigmoid)
}

/// Softmax of each child's row of logits across parents.
pub fn routing_softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(softmax_along(logits, 1)?)
}

pub fn route(mode: RoutingMode, logits: &Tensor) -> Result<Tensor> {
    match mode {
        RoutingMode::Sigmoid => Ok(routing_sigmoid(logits)),
        RoutingMode::Softmax => routing_softmax(logits),
    }
}

/// Routing state at the final iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    /// Coefficients before the first iteration, `[children, parents]`.
    pub initial_coefficients: Tensor,
    /// Logits used for the final iteration.
    pub logits: Tensor,
    /// Coefficients used for the final iteration.
    pub coefficients: Tensor,
}

fn predictions_shape(u_hat: &Tensor) -> Result<(usize, usize, usize)> {
    match *u_hat.shape() {
        [children, parents, dim] => Ok((children, parents, dim)),
        _ => Err(Error::invalid(
            "dynamic_routing",
            format!("predictions must be [children, parents, dim], got {:?}", u_hat.shape()),
        )),
    }
}

/// `s_j = sum_i r_ij u_hat_j|i`, summing children in index order.
fn combine(u_hat: &[f64], coeffs: &[f64], children: usize, parents: usize, dim: usize) -> Vec<f64> {
    let mut s = vec![0.0; parents * dim];
    for i in 0..children {
        for j in 0..parents {
            let r = coeffs[i * parents + j];
            let base = (i * parents + j) * dim;
            for d in 0..dim {
                s[j * dim + d] += r * u_hat[base + d];
            }
        }
    }
    s
}

/// Runs every routing iteration but the final combine, returning the
/// coefficients the final iteration uses.
pub fn routing_coefficients(u_hat: &Tensor, cfg: &RoutingConfig) -> Result<RoutingTrace> {
    cfg.validate()?;
    let (children, parents, dim) = predictions_shape(u_hat)?;
    let mut logits = Tensor::full(&[children, parents], cfg.prior_init)?;
    let initial = route(cfg.mode, &logits)?;
    let mut coeffs = initial.clone();
    let u = u_hat.data();
    for _ in 1..cfg.iterations {
        let s = combine(u, coeffs.data(), children, parents, dim);
        let v: Vec<f64> = s.chunks(dim).flat_map(squash_vector).collect();
        for (idx, b) in logits.data_mut().iter_mut().enumerate() {
            let (i, j) = (idx / parents, idx % parents);
            let base = (i * parents + j) * dim;
            *b += (0..dim).map(|d| u[base + d] * v[j * dim + d]).sum::<f64>();
        }
        coeffs = route(cfg.mode, &logits)?;
    }
    Ok(RoutingTrace {
        initial_coefficients: initial,
        logits,
        coefficients: coeffs,
    })
}

/// Parent capsules `squash(sum_i r_ij u_hat_j|i)` for fixed coefficients.
pub fn combine_predictions(tape: &mut Tape, u_hat: Var, coefficients: &Tensor) -> Result<Var> {
    let (children, parents, dim) = predictions_shape(tape.value(u_hat))?;
    if coefficients.shape() != [children, parents] {
        return Err(Error::invalid(
            "combine_predictions",
            format!("coefficients {:?} do not match {children}x{parents}", coefficients.shape()),
        ));
    }
    let expanded: Vec<f64> = coefficients
        .data()
        .iter()
        .flat_map(|&r| std::iter::repeat(r).take(dim))
        .collect();
    let r = tape.constant(Tensor::new(&[children, parents, dim], expanded)?)?;
    let weighted = tape.mul(u_hat, r)?;
    let s = tape.reduce(ndtensor::ReduceOp::Sum, weighted, 0)?;
    squash(tape, s)
}

/// Dynamic routing of `[children, parents, dim]` predictions to `[parents, dim]` capsules.
pub fn dynamic_routing(tape: &mut Tape, u_hat: Var, cfg: &RoutingConfig) -> Result<(CapsuleTensor, RoutingTrace)> {
    let trace = routing_coefficients(tape.value(u_hat), cfg)?;
    let (_, parents, dim) = predictions_shape(tape.value(u_hat))?;
    let v = combine_predictions(tape, u_hat, &trace.coefficients)?;
    Ok((
        CapsuleTensor {
            types: parents,
            grid: (1, 1),
            dim,
            data: v,
        },
        trace,
    ))
}

/// Plain-value routing, for inspection and tests.
pub fn route_predictions(u_hat: &Tensor, cfg: &RoutingConfig) -> Result<(Tensor, RoutingTrace)> {
    let mut tape = Tape::new();
    let u = tape.constant(u_hat.clone())?;
    let (caps, trace) = dynamic_routing(&mut tape, u, cfg)?;
    Ok((tape.value(caps.data).clone(), trace))
}

// ----- layers ------------------------------------------------------------

/// Convolutional capsules: a strided convolution producing `types * dim`
/// channels, regrouped into `types x grid` capsules of `dim` values each.
pub fn primary_caps_layer(
    tape: &mut Tape,
    features: Var,
    kernels: Var,
    bias: Var,
    types: usize,
    dim: usize,
    stride: usize,
) -> Result<CapsuleTensor> {
    let channels = tape.shape(kernels).first().copied().unwrap_or(0);
    if channels != types * dim {
        return Err(Error::invalid(
            "primary_caps_layer",
            format!("kernel has {channels} output channels, expected {types} x {dim}"),
        ));
    }
    let conv = tape.conv2d(features, kernels, stride)?;
    let conv = tape.add_channel_bias(conv, bias)?;
    let (rows, cols) = match *tape.shape(conv) {
        [_, r, c] => (r, c),
        _ => unreachable!("conv2d output is 3-d"),
    };
    let grouped = tape.reshape(conv, &[types, dim, rows * cols])?;
    let vectors = tape.permute(grouped, &[0, 2, 1])?;
    let flat = tape.reshape(vectors, &[types * rows * cols, dim])?;
    let data = squash(tape, flat)?;
    Ok(CapsuleTensor {
        types,
        grid: (rows, cols),
        dim,
        data,
    })
}

/// Fully-connected capsule layer: `u_hat_j|i = W_ij u_i` for every child and
/// parent, then dynamic routing. `weights` is `[children, parents, out_dim, in_dim]`.
pub fn fc_caps_layer(
    tape: &mut Tape,
    children: &CapsuleTensor,
    weights: Var,
    cfg: &RoutingConfig,
) -> Result<(CapsuleTensor, RoutingTrace)> {
    let n = children.count();
    let (parents, out_dim) = match *tape.shape(weights) {
        [c, p, o, i] if c == n && i == children.dim => (p, o),
        ref other => {
            return Err(Error::invalid(
                "fc_caps_layer",
                format!("weights {other:?} do not match {n} children of dim {}", children.dim),
            ))
        }
    };
    let w = tape.reshape(weights, &[n, parents * out_dim, children.dim])?;
    let u = tape.reshape(children.data, &[n, children.dim, 1])?;
    let u_hat = tape.batched_matmul(w, u)?;
    let u_hat = tape.reshape(u_hat, &[n, parents, out_dim])?;
    dynamic_routing(tape, u_hat, cfg)
}
