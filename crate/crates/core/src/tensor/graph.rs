use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operations the graph knows how to record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    ScalarMul,
    ElementwiseMul,
    MatMul,
    ConcatLastAxis,
    Silu,
    AbsSumMean,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::ScalarMul,
        OpKind::ElementwiseMul,
        OpKind::MatMul,
        OpKind::ConcatLastAxis,
        OpKind::Silu,
        OpKind::AbsSumMean,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::MatMul => "matmul",
            OpKind::ConcatLastAxis => "concat_last_axis",
            OpKind::Silu => "silu",
            OpKind::AbsSumMean => "abs_sum_mean",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    ScalarMul(Var, f64),
    Mul(Var, Var),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    Silu(Var),
    AbsSumMean(Var),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::Mul(..) => OpKind::ElementwiseMul,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Concat(..) => OpKind::ConcatLastAxis,
            Op::Silu(..) => OpKind::Silu,
            Op::AbsSumMean(..) => OpKind::AbsSumMean,
            Op::Reshape(..) => OpKind::Reshape,
        })
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of operations. Nodes are stored in insertion order, which
/// is also a topological order; backward walks it in reverse exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `var` (if any) into `target.grad`.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) {
        if let Some(g) = self.get(var) {
            target.accumulate_grad(g);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: scales the backward rule of `op` by 1.5 so gradient checks
    /// can demonstrate that they detect a wrong rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: OpKind) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `tensor` as a leaf. Gradients flow to it iff the
    /// tensor has `requires_grad` set.
    pub fn input(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(Op::Leaf, tensor.detach(), requires_grad)
    }

    /// Records a constant leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, tensor.detach(), false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn scalar_mul(&mut self, a: Var, scale: f64) -> Var {
        let value = self.value(a).map(|x| x * scale);
        let rg = self.any_grad(&[a]);
        self.push(Op::ScalarMul(a, scale), value, rg)
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), "elementwise_mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Graph("concat_last_axis of zero tensors".into()))?;
        let lead = self.value(*first).shape().split_last().expect("rank >= 1").1.to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let (w, l) = s.split_last().expect("rank >= 1");
            if l != lead.as_slice() {
                return Err(Error::Shape {
                    op: "concat_last_axis",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), value, rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.any_grad(&[a]);
        self.push(Op::Silu(a), value, rg)
    }

    /// Mean of absolute values, as a one-element tensor.
    pub fn abs_sum_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mean = t.data().iter().map(|x| x.abs()).sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Op::AbsSumMean(a), Tensor::scalar(mean), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::from_vec(shape, src.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: src.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Reverse pass from a one-element `loss`. Consumes the graph: a second
    /// call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must have one element, got shape {:?}",
                lt.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let scale = match (node.op.kind(), self.fault) {
                (Some(k), Some(f)) if k == f => 1.5,
                _ => 1.0,
            };
            let up: Vec<f64> = if scale == 1.0 {
                upstream
            } else {
                upstream.iter().map(|g| g * scale).collect()
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, &up);
                    self.send(&mut grads, *b, &up);
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, *a, &up);
                    let neg: Vec<f64> = up.iter().map(|g| -g).collect();
                    self.send(&mut grads, *b, &neg);
                }
                Op::ScalarMul(a, s) => {
                    let g: Vec<f64> = up.iter().map(|g| g * s).collect();
                    self.send(&mut grads, *a, &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.requires_grad(*a) {
                        let g: Vec<f64> = up.iter().zip(vb).map(|(g, y)| g * y).collect();
                        self.send(&mut grads, *a, &g);
                    }
                    if self.requires_grad(*b) {
                        let g: Vec<f64> = up.iter().zip(va).map(|(g, x)| g * x).collect();
                        self.send(&mut grads, *b, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.requires_grad(*a) {
                        // dA = dC · Bᵀ
                        let db = tb.data();
                        let mut g = vec![0.0; m * k];
                        for i in 0..m {
                            let dc = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &db[p * n..(p + 1) * n];
                                g[i * k + p] = dc.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        self.send(&mut grads, *a, &g);
                    }
                    if self.requires_grad(*b) {
                        // dB = Aᵀ · dC
                        let da = ta.data();
                        let mut g = vec![0.0; k * n];
                        for i in 0..m {
                            let dc = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = da[i * k + p];
                                for (o, &d) in g[p * n..(p + 1) * n].iter_mut().zip(dc) {
                                    *o += aip * d;
                                }
                            }
                        }
                        self.send(&mut grads, *b, &g);
                    }
                }
                Op::Concat(parts) => {
                    let total = *node.value.shape().last().expect("rank >= 1");
                    let rows = node.value.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let w = *self.value(p).shape().last().expect("rank >= 1");
                        if self.requires_grad(p) {
                            let mut g = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                g.extend_from_slice(&up[r * total + offset..r * total + offset + w]);
                            }
                            self.send(&mut grads, p, &g);
                        }
                        offset += w;
                    }
                }
                Op::Silu(a) => {
                    let x = self.value(*a).data();
                    let g: Vec<f64> = up
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    self.send(&mut grads, *a, &g);
                }
                Op::AbsSumMean(a) => {
                    let x = self.value(*a).data();
                    let n = x.len() as f64;
                    let g: Vec<f64> = x.iter().map(|&x| up[0] * l1_subgradient(x) / n).collect();
                    self.send(&mut grads, *a, &g);
                }
                Op::Reshape(a) => self.send(&mut grads, *a, &up),
            }
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(up);
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: &[f64]) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d|x|/dx with the kink at zero mapped to 0.
fn l1_subgradient(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
