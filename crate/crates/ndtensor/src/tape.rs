//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node to the [`Tape`]. Nodes are only ever
//! appended, so the node order is a topological order of the computation
//! and [`Tape::backward`] simply walks it from the end.

use crate::error::{Result, TensorError};
use crate::linalg::{gemm, MatRef};
use crate::tensor::{axis_split, without_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Abs,
    Scale(f64),
}

impl ElemOp {
    fn is_binary(self) -> bool {
        matches!(self, ElemOp::Add | ElemOp::Sub | ElemOp::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            ElemOp::Add => "add",
            ElemOp::Sub => "sub",
            ElemOp::Mul => "mul",
            ElemOp::Neg => "neg",
            ElemOp::Exp => "exp",
            ElemOp::Log => "log",
            ElemOp::Sigmoid => "sigmoid",
            ElemOp::Relu => "relu",
            ElemOp::Abs => "abs",
            ElemOp::Scale(_) => "scale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// A differentiable primitive defined outside this crate.
///
/// The caller computes the forward value itself and hands it to
/// [`Tape::custom`]; the op only has to provide input gradients.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

/// Norms at or below this are treated as zero by `l2_norm`.
pub const NORM_EPS: f64 = 1e-12;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    height: usize,
    width: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Unary {
        kind: ElemOp,
        a: usize,
    },
    Binary {
        kind: ElemOp,
        a: usize,
        b: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchedMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ChannelBias {
        a: usize,
        bias: usize,
    },
    Reduce {
        kind: ReduceOp,
        a: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSoftmax {
        a: usize,
        axis: usize,
    },
    L2Norm {
        a: usize,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Ordered record of the primitives applied during one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if `v` was on a path to the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Moves the gradient out, leaving `None`.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ----- elementwise -----------------------------------------------------

    pub fn elementwise(&mut self, kind: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            (true, None) => Err(TensorError::InvalidArgument(format!(
                "{} needs two operands",
                kind.name()
            ))),
            (false, Some(_)) => Err(TensorError::InvalidArgument(format!(
                "{} takes one operand",
                kind.name()
            ))),
        }
    }

    fn unary(&mut self, kind: ElemOp, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let out = match kind {
            ElemOp::Neg => x.map(|v| -v),
            ElemOp::Exp => x.map(f64::exp),
            ElemOp::Log => {
                if let Some(&bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(TensorError::NonPositiveLog { value: bad });
                }
                x.map(f64::ln)
            }
            ElemOp::Sigmoid => x.map(sigmoid),
            ElemOp::Relu => x.map(|v| v.max(0.0)),
            ElemOp::Abs => x.map(f64::abs),
            ElemOp::Scale(c) => x.map(|v| v * c),
            _ => unreachable!("binary op routed to unary"),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Unary { kind, a: a.0 }, kind.name())
    }

    fn binary(&mut self, kind: ElemOp, a: Var, b: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let shape = if x.shape() == y.shape() || y.numel() == 1 {
            x.shape().to_vec()
        } else if x.numel() == 1 {
            y.shape().to_vec()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: kind.name(),
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        };
        let n = shape.iter().product::<usize>();
        let (xd, yd) = (x.data(), y.data());
        let xs = xd.len() == 1 && n != 1;
        let ys = yd.len() == 1 && n != 1;
        let f = |l: f64, r: f64| match kind {
            ElemOp::Add => l + r,
            ElemOp::Sub => l - r,
            ElemOp::Mul => l * r,
            _ => unreachable!(),
        };
        let data = (0..n)
            .map(|i| f(xd[if xs { 0 } else { i }], yd[if ys { 0 } else { i }]))
            .collect();
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(
            Tensor::from_parts(shape, data),
            rg,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
            },
            kind.name(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Mul, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Abs, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(ElemOp::Scale(factor), a)
    }

    // ----- linear algebra --------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let (m, k, n) = match (x.shape(), y.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::rows(x.data(), k), MatRef::rows(y.data(), n), &mut out, false);
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            "matmul",
        )
    }

    /// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let (batch, m, k, n) = match (x.shape(), y.shape()) {
            (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => (ba, m, k, n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "batched_matmul",
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm(
                m,
                k,
                n,
                MatRef::rows(&x.data()[t * m * k..(t + 1) * m * k], k),
                MatRef::rows(&y.data()[t * k * n..(t + 1) * k * n], n),
                &mut out[t * m * n..(t + 1) * m * n],
                false,
            );
        }
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            rg,
            Op::BatchedMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
            },
            "batched_matmul",
        )
    }

    /// Valid (unpadded) cross-correlation of `[c_in, h, w]` with `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[kernel.0].value;
        let geom = match (x.shape(), w.shape()) {
            (&[c_in, height, width], &[c_out, c2, kh, kw]) if c_in == c2 && kh == kw => {
                if kh > height || kh > width {
                    return Err(TensorError::KernelTooLarge {
                        op: "conv2d",
                        kernel: kh,
                        height,
                        width,
                    });
                }
                ConvGeom {
                    c_in,
                    height,
                    width,
                    c_out,
                    kernel: kh,
                    stride,
                    out_h: (height - kh) / stride + 1,
                    out_w: (width - kh) / stride + 1,
                }
            }
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    left: x.shape().to_vec(),
                    right: w.shape().to_vec(),
                })
            }
        };
        let cols = im2col(x.data(), &geom);
        let (patch, positions) = (geom.patch(), geom.positions());
        let mut out = vec![0.0; geom.c_out * positions];
        gemm(
            geom.c_out,
            patch,
            positions,
            MatRef::rows(w.data(), patch),
            MatRef::rows(&cols, positions),
            &mut out,
            false,
        );
        let rg = self.any_grad(&[input.0, kernel.0]);
        self.push(
            Tensor::from_parts(vec![geom.c_out, geom.out_h, geom.out_w], out),
            rg,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
                // only needed for the kernel gradient
                cols: if self.nodes[kernel.0].requires_grad { cols } else { Vec::new() },
            },
            "conv2d",
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[c, ...]` tensor.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let b = &self.nodes[bias.0].value;
        if x.ndim() < 1 || b.shape() != [x.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let per = x.numel() / x.shape()[0];
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i / per])
            .collect();
        let rg = self.any_grad(&[a.0, bias.0]);
        self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            rg,
            Op::ChannelBias { a: a.0, bias: bias.0 },
            "add_channel_bias",
        )
    }

    // ----- reductions and axis ops -----------------------------------------

    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axis: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(x.shape(), axis)?;
        let d = x.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| d[(o * len + l) * inner + j];
                let slot = o * inner + j;
                match kind {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let s: f64 = (0..len).map(at).sum();
                        out[slot] = if kind == ReduceOp::Mean { s / len as f64 } else { s };
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            if at(l) > at(best) {
                                best = l;
                            }
                        }
                        argmax[slot] = best;
                        out[slot] = at(best);
                    }
                }
            }
        }
        let shape = without_axis(x.shape(), axis);
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::Reduce {
                kind,
                a: a.0,
                axis,
                argmax,
            },
            "reduce",
        )
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let flat = self.reshape(a, &[n])?;
        self.reduce(ReduceOp::Sum, flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let flat = self.reshape(a, &[n])?;
        self.reduce(ReduceOp::Mean, flat, 0)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let out = softmax_along(x, axis)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Softmax { a: a.0, axis }, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(x.shape(), axis)?;
        let d = x.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + j;
                let max = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (d[idx(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[idx(l)] = d[idx(l)] - lse;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            rg,
            Op::LogSoftmax { a: a.0, axis },
            "log_softmax",
        )
    }

    /// Euclidean norm along `axis`, removing it from the shape.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(x.shape(), axis)?;
        let d = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                out[o * inner + j] = (0..len)
                    .map(|l| d[(o * len + l) * inner + j].powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let shape = without_axis(x.shape(), axis);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::from_parts(shape, out), rg, Op::L2Norm { a: a.0, axis }, "l2_norm")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Reshape { a: a.0 }, "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let mut seen = vec![false; x.ndim()];
        if axes.len() != x.ndim() || axes.iter().any(|&ax| ax >= x.ndim() || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::InvalidArgument(format!(
                "permute: {axes:?} is not a permutation of {} axes",
                x.ndim()
            )));
        }
        let out = permute_tensor(x, axes);
        let rg = self.nodes[a.0].requires_grad;
        self.push(
            out,
            rg,
            Op::Permute {
                a: a.0,
                axes: axes.to_vec(),
            },
            "permute",
        )
    }

    /// Records a value computed outside the tape together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&ids);
        self.push(output, rg, Op::Custom { inputs: ids, op }, name)
    }

    // ----- backward --------------------------------------------------------

    /// Populates `grad` for every node on a path from a `requires_grad` leaf to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.input_grads(i, &g)?;
            for (input, contribution) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        let wants = |j: usize| self.nodes[j].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary { kind, a } => {
                let x = val(*a);
                let d: Vec<f64> = match kind {
                    ElemOp::Neg => g.iter().map(|v| -v).collect(),
                    ElemOp::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    ElemOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    ElemOp::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    ElemOp::Relu => g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    ElemOp::Abs => g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                        .collect(),
                    ElemOp::Scale(c) => g.iter().map(|v| v * c).collect(),
                    _ => unreachable!(),
                };
                vec![(*a, d)]
            }
            Op::Binary { kind, a, b } => {
                let (x, y) = (val(*a), val(*b));
                let n = g.len();
                let xa = |k: usize| x[if x.len() == 1 { 0 } else { k }];
                let yb = |k: usize| y[if y.len() == 1 { 0 } else { k }];
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    ElemOp::Add => (g.to_vec(), g.to_vec()),
                    ElemOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    ElemOp::Mul => ((0..n).map(|k| g[k] * yb(k)).collect(), (0..n).map(|k| g[k] * xa(k)).collect()),
                    _ => unreachable!(),
                };
                let fold = |v: Vec<f64>, len: usize| if len == 1 && n != 1 { vec![v.iter().sum()] } else { v };
                vec![(*a, fold(ga, x.len())), (*b, fold(gb, y.len()))]
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut res = Vec::new();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, MatRef::rows(g, n), MatRef::transposed(val(*b), n), &mut da, false);
                    res.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, MatRef::transposed(val(*a), k), MatRef::rows(g, n), &mut db, false);
                    res.push((*b, db));
                }
                res
            }
            Op::BatchedMatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (x, y) = (val(*a), val(*b));
                let mut res = Vec::new();
                if wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::rows(&g[t * m * n..(t + 1) * m * n], n),
                            MatRef::transposed(&y[t * k * n..(t + 1) * k * n], n),
                            &mut da[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    res.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::transposed(&x[t * m * k..(t + 1) * m * k], k),
                            MatRef::rows(&g[t * m * n..(t + 1) * m * n], n),
                            &mut db[t * k * n..(t + 1) * k * n],
                            false,
                        );
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (patch, positions) = (geom.patch(), geom.positions());
                let mut res = Vec::new();
                if wants(*kernel) {
                    let mut dk = vec![0.0; geom.c_out * patch];
                    gemm(
                        geom.c_out,
                        positions,
                        patch,
                        MatRef::rows(g, positions),
                        MatRef::transposed(cols, positions),
                        &mut dk,
                        false,
                    );
                    res.push((*kernel, dk));
                }
                if wants(*input) {
                    let mut dcols = vec![0.0; patch * positions];
                    gemm(
                        patch,
                        geom.c_out,
                        positions,
                        MatRef::transposed(val(*kernel), patch),
                        MatRef::rows(g, positions),
                        &mut dcols,
                        false,
                    );
                    res.push((*input, col2im(&dcols, geom)));
                }
                res
            }
            Op::ChannelBias { a, bias } => {
                let channels = self.nodes[*bias].value.numel();
                let per = g.len() / channels;
                let db = (0..channels).map(|c| g[c * per..(c + 1) * per].iter().sum()).collect();
                vec![(*a, g.to_vec()), (*bias, db)]
            }
            Op::Reduce { kind, a, axis, argmax } => {
                let shape = self.nodes[*a].value.shape();
                let (outer, len, inner) = axis_split(shape, *axis)?;
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let gv = g[o * inner + j];
                        match kind {
                            ReduceOp::Sum => (0..len).for_each(|l| d[(o * len + l) * inner + j] = gv),
                            ReduceOp::Mean => (0..len).for_each(|l| d[(o * len + l) * inner + j] = gv / len as f64),
                            ReduceOp::Max => d[(o * len + argmax[o * inner + j]) * inner + j] = gv,
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + j;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                        for l in 0..len {
                            d[idx(l)] = out[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + j;
                        let gsum: f64 = (0..len).map(|l| g[idx(l)]).sum();
                        for l in 0..len {
                            d[idx(l)] = g[idx(l)] - out[idx(l)].exp() * gsum;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::L2Norm { a, axis } => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(self.nodes[*a].value.shape(), *axis)?;
                let mut d = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let norm = out[o * inner + j];
                        if norm <= NORM_EPS {
                            continue;
                        }
                        let gv = g[o * inner + j];
                        for l in 0..len {
                            let k = (o * len + l) * inner + j;
                            d[k] = gv * x[k] / norm;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                vec![(*a, permute_tensor(&gt, &inverse).into_data())]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let grads = op.backward(&ins, &node.value, &gt);
                if grads.len() != inputs.len() {
                    return Err(TensorError::InvalidArgument(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                let mut res = Vec::with_capacity(inputs.len());
                for ((&j, input), grad) in inputs.iter().zip(&ins).zip(grads) {
                    if grad.shape() != input.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: op.name(),
                            left: input.shape().to_vec(),
                            right: grad.shape().to_vec(),
                        });
                    }
                    res.push((j, grad.into_data()));
                }
                res
            }
        })
    }
}

/// Max-shifted softmax along `axis` of a plain tensor.
pub fn softmax_along(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + j;
            let max = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (d[idx(l)] - max).exp();
                out[idx(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[idx(l)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut counter = vec![0usize; nd];
    let d = x.data();
    for _ in 0..x.numel() {
        let offset: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        out.push(d[offset]);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.positions();
    let mut cols = vec![0.0; g.patch() * positions];
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let src = (c * g.height + oy * g.stride + ky) * g.width + kx;
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = x[src + ox * g.stride];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.positions();
    let mut x = vec![0.0; g.c_in * g.height * g.width];
    for c in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let dst = (c * g.height + oy * g.stride + ky) * g.width + kx;
                    for ox in 0..g.out_w {
                        x[dst + ox * g.stride] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
    x
}
