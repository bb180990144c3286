//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! parents already exist, so node order is a topological order and backward
//! is a single reverse sweep. A fresh graph is built per forward pass.
//!
//! The spike nonlinearity is a custom-gradient node: forward is the strict
//! Heaviside step `x > v_th`, backward multiplies by the arctangent-family
//! surrogate `a / (2 (1 + (π/2 · a · (x − v_th))²))`.

use std::collections::BTreeMap;
use std::f32::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sharpness and centre of the surrogate spike derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub a: f32,
    pub v_th: f32,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { a: 3.0, v_th: 1.0 }
    }
}

impl SurrogateParams {
    pub fn new(a: f32, v_th: f32) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Config(format!("surrogate sharpness must be > 0, got {a}")));
        }
        if !v_th.is_finite() {
            return Err(Error::Config(format!("surrogate threshold must be finite, got {v_th}")));
        }
        Ok(Self { a, v_th })
    }

    /// Surrogate derivative of the spike function at membrane value `x`.
    #[inline]
    pub fn derivative(&self, x: f32) -> f32 {
        let u = FRAC_PI_2 * self.a * (x - self.v_th);
        self.a / (2.0 * (1.0 + u * u))
    }

    /// Strict threshold: a value equal to `v_th` does not fire.
    #[inline]
    pub fn fires(&self, x: f32) -> bool {
        x > self.v_th
    }
}

/// Strict Heaviside step on a whole tensor.
pub fn heaviside(x: &Tensor, v_th: f32) -> Tensor {
    x.map(|v| if v > v_th { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Fc {
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
    },
    Conv3 {
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
    },
    AvgPool2 {
        input: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    /// Adds a constant tensor; gradient passes straight through.
    AddConst {
        input: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Heaviside {
        input: NodeId,
        params: SurrogateParams,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
        /// Loss before rounding to `f32`.
        exact: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Accumulated gradients of parameter leaves.
pub type Gradients = BTreeMap<NodeId, Tensor>;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Gradients,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a node, at full precision for loss nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        match self.nodes[id.0].op {
            Op::Mse { exact, .. } => exact,
            _ => self.nodes[id.0].value.data()[0] as f64,
        }
    }

    pub fn fc(&mut self, input: NodeId, weights: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let value = kernels::fc_forward(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.needs(&[input, weights]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(value, Op::Fc { input, weights, bias }, rg))
    }

    pub fn conv3(&mut self, input: NodeId, kernels: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let value = kernels::conv3_forward(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.needs(&[input, kernels]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(value, Op::Conv3 { input, kernels, bias }, rg))
    }

    pub fn avgpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let value = kernels::avgpool2_forward(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::AvgPool2 { input }, rg))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    pub fn add_const(&mut self, input: NodeId, constant: &Tensor) -> Result<NodeId> {
        let value = self.value(input).zip_map(constant, "add_const", |a, b| a + b)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::AddConst { input }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn heaviside(&mut self, input: NodeId, params: SurrogateParams) -> NodeId {
        let value = heaviside(self.value(input), params.v_th);
        let rg = self.needs(&[input]);
        self.push(value, Op::Heaviside { input, params }, rg)
    }

    /// Mean squared error over every element.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape(t, "mse_loss")?;
        let exact = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.needs(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(exact as f32),
            Op::Mse { pred, target, exact },
            rg,
        ))
    }

    /// Accumulated gradient of a parameter leaf, if any has been computed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn gradients(&self) -> &Gradients {
        &self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Backpropagates from a scalar loss. Parameter gradients add onto
    /// whatever earlier calls accumulated.
    pub fn backward(&mut self, loss: NodeId) -> Result<&Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, Tensor::full(self.value(loss).shape(), 1.0))
    }

    /// Backpropagates an arbitrary upstream gradient (vector-Jacobian product).
    pub fn backward_with(&mut self, output: NodeId, upstream: Tensor) -> Result<&Gradients> {
        upstream.expect_same_shape(self.value(output), "backward")?;
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            adj[output.0] = Some(upstream);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        match self.grads.get_mut(&NodeId(i)) {
                            Some(acc) => acc.add_assign(&g)?,
                            None => {
                                self.grads.insert(NodeId(i), g);
                            }
                        }
                    }
                }
                &Op::Fc { input, weights, bias } => {
                    let need_x = self.nodes[input.0].requires_grad;
                    let gr = kernels::fc_backward(self.value(input), self.value(weights), &g, need_x);
                    if let Some(dx) = gr.input {
                        accumulate(&mut adj, input, dx)?;
                    }
                    if self.nodes[weights.0].requires_grad {
                        accumulate(&mut adj, weights, gr.weights)?;
                    }
                    if let Some(b) = bias.filter(|b| self.nodes[b.0].requires_grad) {
                        accumulate(&mut adj, b, gr.bias)?;
                    }
                }
                &Op::Conv3 { input, kernels: k, bias } => {
                    let need_x = self.nodes[input.0].requires_grad;
                    let gr = kernels::conv3_backward(self.value(input), self.value(k), &g, need_x)?;
                    if let Some(dx) = gr.input {
                        accumulate(&mut adj, input, dx)?;
                    }
                    if self.nodes[k.0].requires_grad {
                        accumulate(&mut adj, k, gr.kernels)?;
                    }
                    if let Some(b) = bias.filter(|b| self.nodes[b.0].requires_grad) {
                        accumulate(&mut adj, b, gr.bias)?;
                    }
                }
                &Op::AvgPool2 { input } => {
                    let dx = kernels::avgpool2_backward(self.value(input).shape(), &g);
                    accumulate(&mut adj, input, dx)?;
                }
                &Op::Reshape { input } => {
                    let shape = self.value(input).shape().to_vec();
                    accumulate(&mut adj, input, g.reshape(&shape)?)?;
                }
                &Op::AddConst { input } => accumulate(&mut adj, input, g)?,
                &Op::Add(a, b) => {
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut adj, b, g.clone())?;
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                &Op::Sub(a, b) => {
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut adj, b, g.map(|v| -v))?;
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                &Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = g.zip_map(self.value(b), "mul", |u, y| u * y)?;
                        accumulate(&mut adj, a, da)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = g.zip_map(self.value(a), "mul", |u, x| u * x)?;
                        accumulate(&mut adj, b, db)?;
                    }
                }
                &Op::Scale(a, f) => accumulate(&mut adj, a, g.map(|v| v * f))?,
                &Op::Heaviside { input, params } => {
                    let dx = g.zip_map(self.value(input), "heaviside", |u, x| u * params.derivative(x))?;
                    accumulate(&mut adj, input, dx)?;
                }
                &Op::Mse { pred, target, .. } => {
                    let u = g.data()[0];
                    let scale = 2.0 / self.value(pred).len() as f32;
                    let diff = self
                        .value(pred)
                        .zip_map(self.value(target), "mse_loss", |p, t| (p - t) * scale * u)?;
                    if self.nodes[target.0].requires_grad {
                        accumulate(&mut adj, target, diff.map(|v| -v))?;
                    }
                    if self.nodes[pred.0].requires_grad {
                        accumulate(&mut adj, pred, diff)?;
                    }
                }
            }
        }
        Ok(&self.grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut adj[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Outcome of comparing autodiff against central finite differences.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_abs_err: f64,
    /// `|fd − ad| / max(|fd|, |ad|, 1)`: relative for gradients of magnitude
    /// at least one, absolute below that.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central-difference check of `f` at `x` over every coordinate.
///
/// `f` receives a graph and the node holding `x` and must return a scalar
/// node. `eps` must be positive (1e-3 suits `f32`).
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<FdReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, eps, &coords)
}

/// Like [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, eps: f32, coords: &[usize]) -> Result<FdReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let xid = g.parameter(x.clone());
    let out = f(&mut g, xid)?;
    g.backward(out)?;
    let analytic = g.grad(xid).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |xp: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.constant(xp);
        let out = f(&mut g, id)?;
        Ok(g.scalar(out))
    };
    let mut report = FdReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: 0,
    };
    for &i in coords {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += eps;
        minus.data_mut()[i] -= eps;
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let fd = (eval(plus)? - eval(minus)?) / step;
        let ad = analytic.data()[i] as f64;
        let abs = (fd - ad).abs();
        let rel = abs / fd.abs().max(ad.abs()).max(1.0);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
