//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as a node whose parents precede it,
//! so the node list is already in topological order. [`Tape::backward`]
//! walks it once in reverse and accumulates adjoints.
//!
//! ```
//! use gkde_core::autodiff::Tape;
//! use gkde_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Matmul(Var, Var),
    Sum(Var),
    SumAxis(Var),
    ClampMin(Var, f64),
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_broadcast(self.value(b), name, f)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.grad_of(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + offset)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `max(a, floor)` elementwise. Clipped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.grad_of(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Row sums of a matrix, shape `[rows, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape().len() != 2 {
            return Err(Error::shape("sum_rows", "expected a matrix"));
        }
        let value = self.value(a).sum_axis(1)?;
        let rg = self.grad_of(&[a]);
        Ok(self.push(value, Op::SumAxis(a), rg))
    }

    /// Pairwise squared distances between rows of `a[m×d]` and `b[n×d]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sq_dist(self.value(b))?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::SqDist(a, b), rg))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::contract(format!("root {} is not on this tape", root.0)))?;
        if !root_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::ones(root_node.value.shape()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g.clone())?;
                    self.accumulate(&mut adj, b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g.clone())?;
                    self.accumulate(&mut adj, b, g.map(|v| -v))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_broadcast(self.value(b), "mul", |x, y| x * y)?;
                    let gb = g.zip_broadcast(self.value(a), "mul", |x, y| x * y)?;
                    self.accumulate(&mut adj, a, ga)?;
                    self.accumulate(&mut adj, b, gb)?;
                }
                Op::Scale(a, f) => self.accumulate(&mut adj, a, g.map(|v| v * f))?,
                Op::AddScalar(a) => self.accumulate(&mut adj, a, g.clone())?,
                Op::Exp(a) => {
                    let ga = g.zip_broadcast(&node.value, "exp", |x, y| x * y)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Log(a) => {
                    let ga = g.zip_broadcast(self.value(a), "log", |x, y| x / y)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Tanh(a) => {
                    let ga = g.zip_broadcast(&node.value, "tanh", |x, t| x * (1.0 - t * t))?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_broadcast(self.value(a), "relu", |x, v| if v > 0.0 { x } else { 0.0 })?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::ClampMin(a, floor) => {
                    let ga = g.zip_broadcast(self.value(a), "clamp_min", |x, v| if v >= floor { x } else { 0.0 })?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Matmul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = g.matmul(&self.value(b).transpose()?)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.value(a).transpose()?.matmul(&g)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.value(a).shape(), g.data()[0]);
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SumAxis(a) => {
                    let ga = Tensor::zeros(self.value(a).shape()).zip_broadcast(&g, "sum_rows", |_, y| y)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SqDist(a, b) => {
                    let (ga, gb) = sq_dist_grads(self.value(a), self.value(b), &g)?;
                    if self.nodes[a.0].requires_grad {
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
            }
            adj[i] = Some(g);
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| match self.nodes[i].op {
                Op::Leaf => Some(g.unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()))),
                _ => g,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], target: Var, grad: Tensor) -> Result<()> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        let grad = grad.reduce_to(self.value(target).shape())?;
        match &mut adj[target.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += g;
                }
            }
            slot => *slot = Some(grad),
        }
        Ok(())
    }
}

fn sq_dist_grads(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n, d) = (a.rows(), b.rows(), a.cols());
    let mut ga = vec![0.0; m * d];
    let mut gb = vec![0.0; n * d];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let w = 2.0 * g.data()[i * n + j];
            if w == 0.0 {
                continue;
            }
            let br = b.row(j);
            for k in 0..d {
                let diff = w * (ar[k] - br[k]);
                ga[i * d + k] += diff;
                gb[j * d + k] -= diff;
            }
        }
    }
    Ok((Tensor::new(a.shape().to_vec(), ga)?, Tensor::new(b.shape().to_vec(), gb)?))
}

/// Central-difference gradient of `f` with respect to every entry of
/// `params`. Independent of the tape; used as the gradient oracle.
pub fn finite_difference_gradient<F>(mut f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for k in 0..params[p].numel() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + step;
            let up = f(&work)?;
            work[p].data_mut()[k] = orig - step;
            let down = f(&work)?;
            work[p].data_mut()[k] = orig;
            grad.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Symmetric relative error used by the gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
