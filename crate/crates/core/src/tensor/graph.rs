use std::collections::HashMap;
use std::fmt;

use super::conv::{self, Conv2dGeometry, ConvDims};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the engine (losses, mostly).
///
/// `backward` returns one gradient buffer per input, each the length of the
/// corresponding input. Inputs that do not need a gradient may get an empty
/// vector.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
        dims: ConvDims,
        batch: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Softmax {
        input: Var,
        axis_len: usize,
        inner: usize,
    },
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::FullyConnected {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Relu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::Sum(x) => vec![*x],
            Op::MaxPool2d { input, .. }
            | Op::GlobalAvgPool { input, .. }
            | Op::Softmax { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations for a single forward/backward pass.
///
/// Nodes are appended in execution order, which is a valid topological order,
/// so backward is a reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: value.detached(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked and readable after `backward`.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: value.detached(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Repeated calls with the same id return the
    /// same node, so all branches read and write one storage location.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).detached(),
            op: Op::Param(id),
            requires_grad: !store.is_frozen(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: Conv2dGeometry) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = bias.map(|b| &self.nodes[b.0].value);
        let (batch, dims) = ConvDims::resolve(x.shape(), w.shape(), b.map(|b| b.shape()), geom)?;
        let in_len = dims.in_channels * dims.in_h * dims.in_w;
        let out_len = dims.out_channels * dims.out_h * dims.out_w;
        let mut out = vec![0.0; batch * out_len];
        let mut cols = Vec::new();
        for n in 0..batch {
            let c = conv::im2col(&dims, geom, &x.data()[n * in_len..(n + 1) * in_len]);
            conv::forward(&dims, w.data(), b.map(|b| b.data()), &c, &mut out[n * out_len..(n + 1) * out_len]);
            cols.extend_from_slice(&c);
        }
        let value = Tensor::new(&[batch, dims.out_channels, dims.out_h, dims.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                dims,
                batch,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    /// Non-overlapping max pooling with window = stride = `size`.
    /// Ties go to the first element in scan order.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::shape(
                "max_pool2d",
                format!("cannot pool {s:?} with window {size}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { input: x, argmax }))
    }

    /// Spatial mean of each channel: `[N,K,H,W] -> [N,K]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected [N,K,H,W], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let out: Vec<f64> = t
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input: x, plane }))
    }

    /// `y = x W^T (+ b)` for `x: [N,K]` and `W: [C,K]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let wt = &self.nodes[weight.0].value;
        let (xs, ws) = (xt.shape(), wt.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "fully_connected",
                format!("input {xs:?} is incompatible with weight {ws:?}"),
            ));
        }
        let (n, k, c) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [c] {
                return Err(Error::shape("fully_connected", format!("bias {bs:?} for {c} outputs")));
            }
        }
        let mut out = vec![0.0; n * c];
        for row in 0..n {
            let xr = &xt.data()[row * k..(row + 1) * k];
            for (o, wr) in out[row * c..(row + 1) * c].iter_mut().zip(wt.data().chunks(k)) {
                *o = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
            if let Some(b) = bias {
                for (o, bv) in out[row * c..(row + 1) * c].iter_mut().zip(self.nodes[b.0].value.data()) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::FullyConnected { input: x, weight, bias }))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; t.numel()];
        let data = t.data();
        for o in 0..outer {
            let base = o * axis_len * inner;
            for i in 0..inner {
                let at = |c: usize| base + c * inner + i;
                let m = (0..axis_len).map(|c| data[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..axis_len {
                    let e = (data[at(c)] - m).exp();
                    out[at(c)] = e;
                    z += e;
                }
                for c in 0..axis_len {
                    out[at(c)] /= z;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                input: x,
                axis_len,
                inner,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Scale(x, factor))
    }

    /// `Σ w_i · x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::InvalidArgument("weighted_sum needs at least one term".into()));
        };
        let shape = self.nodes[first.0].value.shape().to_vec();
        let mut out = vec![0.0; self.nodes[first.0].value.numel()];
        for &(v, w) in terms {
            let t = &self.nodes[v.0].value;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", format!("{:?} vs {shape:?}", t.shape())));
            }
            for (o, x) in out.iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::WeightedSum(terms.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Records an externally defined operation with a precomputed output.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// the store (shared parameters accumulate across every use).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_leaves(loss)?;
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, node.value.grad()) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    /// Reverse sweep that only fills node gradients (parameters included)
    /// without touching a store.
    pub fn backward_leaves(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lt.shape()),
            ));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.nodes[loss.0].value.grad_mut()[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = node.value.grad() else {
                continue;
            };
            propagate(before, node, gout);
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Temporarily removes the gradient buffer of `v` (zeroed if absent) so the
/// caller can write into it while reading other nodes.
fn take_grad(nodes: &mut [Node], v: Var) -> Option<Vec<f64>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.value.grad.take().unwrap_or_else(|| vec![0.0; n]))
}

fn put_grad(nodes: &mut [Node], v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        nodes[v.0].value.grad = Some(g);
    }
}

fn add_into(nodes: &mut [Node], v: Var, contribution: impl FnOnce(&mut [f64], &[Node])) {
    if let Some(mut g) = take_grad(nodes, v) {
        contribution(&mut g, nodes);
        put_grad(nodes, v, Some(g));
    }
}

fn propagate(before: &mut [Node], node: &Node, gout: &[f64]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            dims,
            batch,
            cols,
        } => {
            let in_len = dims.in_channels * dims.in_h * dims.in_w;
            let out_len = dims.out_channels * dims.out_h * dims.out_w;
            add_into(before, *input, |gin, nodes| {
                let w = nodes[weight.0].value.data();
                for n in 0..*batch {
                    conv::backward_input(
                        dims,
                        *geom,
                        w,
                        &gout[n * out_len..(n + 1) * out_len],
                        &mut gin[n * in_len..(n + 1) * in_len],
                    );
                }
            });
            let mut gw = take_grad(before, *weight);
            let mut gb = bias.and_then(|b| take_grad(before, b));
            if gw.is_some() || gb.is_some() {
                let col_len = cols.len() / *batch;
                let mut scratch = Vec::new();
                let gw_buf = match gw.as_mut() {
                    Some(g) => g.as_mut_slice(),
                    None => {
                        scratch.resize(before[weight.0].value.numel(), 0.0);
                        scratch.as_mut_slice()
                    }
                };
                for n in 0..*batch {
                    conv::backward_params(
                        dims,
                        &cols[n * col_len..(n + 1) * col_len],
                        &gout[n * out_len..(n + 1) * out_len],
                        gw_buf,
                        gb.as_deref_mut(),
                    );
                }
            }
            put_grad(before, *weight, gw);
            if let Some(b) = bias {
                put_grad(before, *b, gb);
            }
        }
        Op::Relu(x) => add_into(before, *x, |g, nodes| {
            for ((gi, &xi), &go) in g.iter_mut().zip(nodes[x.0].value.data()).zip(gout) {
                if xi > 0.0 {
                    *gi += go;
                }
            }
        }),
        Op::MaxPool2d { input, argmax } => add_into(before, *input, |g, _| {
            for (&idx, &go) in argmax.iter().zip(gout) {
                g[idx] += go;
            }
        }),
        Op::GlobalAvgPool { input, plane } => add_into(before, *input, |g, _| {
            let inv = 1.0 / *plane as f64;
            for (chunk, &go) in g.chunks_mut(*plane).zip(gout) {
                for v in chunk {
                    *v += go * inv;
                }
            }
        }),
        Op::FullyConnected { input, weight, bias } => {
            let k = before[weight.0].value.shape()[1];
            let c = before[weight.0].value.shape()[0];
            add_into(before, *input, |g, nodes| {
                let w = nodes[weight.0].value.data();
                for (row, gr) in g.chunks_mut(k).enumerate() {
                    for (ci, wr) in w.chunks(k).enumerate() {
                        let go = gout[row * c + ci];
                        for (gi, wi) in gr.iter_mut().zip(wr) {
                            *gi += go * wi;
                        }
                    }
                }
            });
            add_into(before, *weight, |g, nodes| {
                let x = nodes[input.0].value.data();
                for (row, xr) in x.chunks(k).enumerate() {
                    for (ci, gr) in g.chunks_mut(k).enumerate() {
                        let go = gout[row * c + ci];
                        for (gi, xi) in gr.iter_mut().zip(xr) {
                            *gi += go * xi;
                        }
                    }
                }
            });
            if let Some(b) = bias {
                add_into(before, *b, |g, _| {
                    for row in gout.chunks(c) {
                        for (gi, go) in g.iter_mut().zip(row) {
                            *gi += go;
                        }
                    }
                });
            }
        }
        Op::Softmax {
            input,
            axis_len,
            inner,
        } => add_into(before, *input, |g, _| {
            let s = out.data();
            let block = axis_len * inner;
            for o in 0..s.len() / block {
                let base = o * block;
                for i in 0..*inner {
                    let at = |c: usize| base + c * inner + i;
                    let dot: f64 = (0..*axis_len).map(|c| gout[at(c)] * s[at(c)]).sum();
                    for c in 0..*axis_len {
                        g[at(c)] += s[at(c)] * (gout[at(c)] - dot);
                    }
                }
            }
        }),
        Op::Sigmoid(x) => add_into(before, *x, |g, _| {
            for ((gi, &y), &go) in g.iter_mut().zip(out.data()).zip(gout) {
                *gi += go * y * (1.0 - y);
            }
        }),
        Op::Add(a, b) => {
            for v in [a, b] {
                add_into(before, *v, |g, _| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            for (v, other) in [(a, b), (b, a)] {
                add_into(before, *v, |g, nodes| {
                    let o = nodes[other.0].value.data();
                    for ((gi, go), ov) in g.iter_mut().zip(gout).zip(o) {
                        *gi += go * ov;
                    }
                });
            }
        }
        Op::Scale(x, f) => add_into(before, *x, |g, _| {
            for (gi, go) in g.iter_mut().zip(gout) {
                *gi += go * f;
            }
        }),
        Op::WeightedSum(terms) => {
            for &(v, w) in terms {
                add_into(before, v, |g, _| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go * w;
                    }
                });
            }
        }
        Op::Sum(x) => add_into(before, *x, |g, _| {
            for gi in g.iter_mut() {
                *gi += gout[0];
            }
        }),
        Op::Custom { inputs, op } => {
            let grads = {
                let refs: Vec<&Tensor> = inputs.iter().map(|v| &before[v.0].value).collect();
                op.backward(&refs, out, gout)
            };
            for (v, contrib) in inputs.iter().zip(grads) {
                if contrib.is_empty() {
                    continue;
                }
                add_into(before, *v, |g, _| {
                    for (gi, c) in g.iter_mut().zip(&contrib) {
                        *gi += c;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3]));
        let mut store = ParamStore::new();
        assert!(g.backward(x, &mut store).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let y = g.sigmoid(x);
        let s = g.sum(y);
        let z = g.scale(s, 0.0);
        g.backward_leaves(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.variable(Tensor::full(&[2], 2.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        g.backward_leaves(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn gap_of_two_by_two_is_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let p = g.max_pool2d(x, 2).unwrap();
        let s = g.sum(p);
        g.backward_leaves(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), Conv2dGeometry::default()).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let data: Vec<f64> = (0..16).map(|v| v as f64 * 0.5 - 3.0).collect();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 4, 4], data.clone()).unwrap());
        let w = g.constant(Tensor::new(&[1, 1, 3, 3], kernel).unwrap());
        let y = g.conv2d(x, w, None, Conv2dGeometry::same3(1)).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, w, None, Conv2dGeometry::default()).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
    }
}
