//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse insertion
//! order, summing each node's incoming gradients before its own backward
//! rule fires. The graph is rebuilt for every forward pass, which is what
//! the sampling-based training loop needs anyway: each step draws fresh
//! noise and therefore a fresh graph.
//!
//! ```
//! use bnn_core::autodiff::Tape;
//! use bnn_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
//! let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
//! let y = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(y);
//! assert_eq!(tape.value(loss).item(), 11.0);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(a).data(), &[3.0, 4.0]);
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BnnError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise (or, for softmax, row-wise) nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
    /// Row-wise softmax over a rank-2 tensor.
    #[serde(rename = "softmax", alias = "softmax-rows")]
    SoftmaxRows,
}

impl FromStr for ActivationKind {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(ActivationKind::Identity),
            "relu" => Ok(ActivationKind::Relu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "softplus" => Ok(ActivationKind::Softplus),
            "softmax" | "softmax-rows" => Ok(ActivationKind::SoftmaxRows),
            other => Err(BnnError::Config(format!("unknown activation kind {other:?}"))),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Softplus => "softplus",
            ActivationKind::SoftmaxRows => "softmax",
        };
        f.write_str(s)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies an activation to a tensor outside of any tape.
pub fn activate(kind: ActivationKind, x: &Tensor) -> Result<Tensor> {
    Ok(match kind {
        ActivationKind::Identity => x.clone(),
        ActivationKind::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        ActivationKind::Sigmoid => x.map(sigmoid),
        ActivationKind::Softplus => x.map(softplus),
        ActivationKind::SoftmaxRows => {
            if x.rank() != 2 {
                return Err(BnnError::shape("softmax-rows", x.shape(), &[0, 0]));
            }
            let mut out = x.clone();
            let c = x.cols();
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            out
        }
    })
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Activation(Var, ActivationKind),
    Log { x: Var, floor: f64 },
    Square(Var),
    Sum(Var),
    Mean(Var),
    Column(Var, usize),
    Pick(Var, Vec<usize>),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    is_param: bool,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: gradient of the loss for every parameter leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a parameter leaf.
    ///
    /// Panics if `v` is not a parameter registered with [`Tape::param`].
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient recorded for a non-parameter node")
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.nodes[v.0].is_param = true;
        v
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(BnnError::shape("transpose", t.shape(), &[0, 0]));
        }
        let value = t.transpose();
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    /// `x[m×n] + b[n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(b));
        if xt.rank() != 2 || bt.len() != xt.cols() {
            return Err(BnnError::shape("add_bias", xt.shape(), bt.shape()));
        }
        let c = xt.cols();
        let mut value = xt.clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bias) in row.iter_mut().zip(bt.data()) {
                *v += bias;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddBias(x, b), value, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.same_shape(bt) {
            return Err(BnnError::shape(name, at.shape(), bt.shape()));
        }
        let value = at.zip_map(bt, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v * k);
        let rg = self.rg(a);
        self.push(Op::Scale(a, k), value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), value, rg)
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        let value = activate(kind, self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(Op::Activation(x, kind), value, rg))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.log_floored(x, 0.0)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floored(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(Op::Log { x, floor }, value, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(Op::Square(x), value, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), value, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(Op::Mean(x), value, rg)
    }

    /// Column `j` of a rank-2 tensor, as a rank-1 tensor.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || j >= t.cols() {
            return Err(BnnError::Index(format!(
                "column {j} out of range for shape {:?}",
                t.shape()
            )));
        }
        let value = Tensor::vector((0..t.rows()).map(|i| t.at(i, j)).collect());
        let rg = self.rg(x);
        Ok(self.push(Op::Column(x, j), value, rg))
    }

    /// Row-wise gather: `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || idx.len() != t.rows() {
            return Err(BnnError::shape("pick", t.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= t.cols()) {
            return Err(BnnError::Index(format!(
                "label {bad} out of range for {} classes",
                t.cols()
            )));
        }
        let value = Tensor::vector(idx.iter().enumerate().map(|(i, &j)| t.at(i, j)).collect());
        let rg = self.rg(x);
        Ok(self.push(Op::Pick(x, idx.to_vec()), value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Back-propagates from a scalar node and clears the tape.
    ///
    /// Every parameter leaf gets an entry in the result, zero if the loss does
    /// not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(BnnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, contrib: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.accumulate(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        send(*a, g.matmul(&bt.transpose())?);
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, at.transpose().matmul(&g)?);
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::AddBias(x, b) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let gb = Tensor::new(nodes[b.0].value.shape().to_vec(), gb)?;
                    send(*b, gb);
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                    send(*a, g.zip_map(bt, |gv, bv| gv * bv));
                    send(*b, g.zip_map(at, |gv, av| gv * av));
                }
                Op::Div(a, b) => {
                    let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                    send(*a, g.zip_map(bt, |gv, bv| gv / bv));
                    let ga = g.zip_map(at, |gv, av| gv * av);
                    send(*b, ga.zip_map(bt, |v, bv| -v / (bv * bv)));
                }
                Op::Scale(a, k) => send(*a, g.map(|v| v * k)),
                Op::AddScalar(a) => send(*a, g),
                Op::Activation(x, kind) => {
                    let xt = &nodes[x.0].value;
                    let yt = &node.value;
                    let gx = match kind {
                        ActivationKind::Identity => g,
                        ActivationKind::Relu => {
                            g.zip_map(xt, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                        }
                        ActivationKind::Sigmoid => g.zip_map(yt, |gv, y| gv * y * (1.0 - y)),
                        ActivationKind::Softplus => g.zip_map(xt, |gv, xv| gv * sigmoid(xv)),
                        ActivationKind::SoftmaxRows => {
                            // J^T g = y ⊙ (g − <g, y>) per row
                            let c = yt.cols();
                            let mut out = g.clone();
                            for (orow, yrow) in out.data_mut().chunks_mut(c).zip(yt.data().chunks(c)) {
                                let dot: f64 = orow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                                for (o, y) in orow.iter_mut().zip(yrow) {
                                    *o = y * (*o - dot);
                                }
                            }
                            out
                        }
                    };
                    send(*x, gx);
                }
                Op::Log { x, floor } => {
                    let xt = &nodes[x.0].value;
                    let floor = *floor;
                    send(*x, g.zip_map(xt, |gv, xv| if xv > floor { gv / xv } else { 0.0 }));
                }
                Op::Square(x) => {
                    let xt = &nodes[x.0].value;
                    send(*x, g.zip_map(xt, |gv, xv| 2.0 * gv * xv));
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    send(*x, Tensor::full(nodes[x.0].value.shape(), gv));
                }
                Op::Mean(x) => {
                    let xt = &nodes[x.0].value;
                    let gv = g.item() / xt.len() as f64;
                    send(*x, Tensor::full(xt.shape(), gv));
                }
                Op::Column(x, j) => {
                    let xt = &nodes[x.0].value;
                    let mut gx = Tensor::zeros(xt.shape());
                    let c = xt.cols();
                    for (i, gv) in g.data().iter().enumerate() {
                        gx.data_mut()[i * c + j] = *gv;
                    }
                    send(*x, gx);
                }
                Op::Pick(x, idx) => {
                    let xt = &nodes[x.0].value;
                    let mut gx = Tensor::zeros(xt.shape());
                    let c = xt.cols();
                    for (i, (&j, gv)) in idx.iter().zip(g.data()).enumerate() {
                        gx.data_mut()[i * c + j] += gv;
                    }
                    send(*x, gx);
                }
                Op::Reshape(x) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    send(*x, g.reshape(shape)?);
                }
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if node.is_param && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            } else if !node.is_param {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}
