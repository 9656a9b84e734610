//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Because inputs always precede outputs on the tape, a single reverse
//! sweep visits each node after all of its consumers.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::param::{Gradients, ParamId, ParamStore};
use crate::error::{CftError, Result};
use crate::real::Real;
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{dims2, dims3, Tensor};

type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId),
    AddRowBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, offset: usize },
    ConcatRows(Vec<NodeId>),
    Gather { x: NodeId, index: Rc<[usize]> },
    Softmax { x: NodeId, outer: usize, len: usize, inner: usize },
    Gelu(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clamp { x: NodeId, lo: S, hi: S },
    Sum(NodeId),
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom, c_out: usize },
    AvgPool { x: NodeId, p: usize },
    Upsample { x: NodeId, h: usize, w: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: S },
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// One recorded operation as seen by the FLOP counter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub op: &'static str,
    pub scope: &'static str,
    /// Multiply-accumulates performed by matrix products and convolutions.
    pub macs: u64,
    /// Scalar operations performed by everything else (elementwise, reductions).
    pub elementwise: u64,
}

/// Operation tape. Not `Sync`: build one graph per thread.
pub struct Graph<S: Real = f32> {
    nodes: RefCell<Vec<Node<S>>>,
    params: RefCell<HashMap<ParamId, NodeId>>,
    trace: RefCell<Vec<TraceEntry>>,
    scope: RefCell<Vec<&'static str>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Real = f32> {
    id: NodeId,
    graph: &'g Graph<S>,
}

impl<S: Real> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            trace: RefCell::new(Vec::new()),
            scope: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value that takes no part in differentiation.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false, None)
    }

    /// Non-parameter leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true, None)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<S>, pid: ParamId) -> Var<'_, S> {
        if let Some(&id) = self.params.borrow().get(&pid) {
            return Var { id, graph: self };
        }
        let v = self.leaf(store.value(pid).clone(), true, Some(pid));
        self.params.borrow_mut().insert(pid, v.id);
        v
    }

    fn leaf(&self, value: Tensor<S>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Run `f` with every recorded operation attributed to `name` in the trace.
    pub fn scoped<R>(&self, name: &'static str, f: impl FnOnce() -> R) -> R {
        self.scope.borrow_mut().push(name);
        let out = f();
        self.scope.borrow_mut().pop();
        out
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.trace.borrow().clone()
    }

    fn value(&self, id: NodeId) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(
        &self,
        name: &'static str,
        value: Tensor<S>,
        op: Op<S>,
        inputs: &[NodeId],
        macs: u64,
    ) -> Result<Var<'_, S>> {
        if !value.all_finite() {
            return Err(CftError::NonFinite(name));
        }
        let elementwise = if macs == 0 { value.len() as u64 } else { 0 };
        let scope = self.scope.borrow().last().copied().unwrap_or("");
        self.trace.borrow_mut().push(TraceEntry {
            op: name,
            scope,
            macs,
            elementwise,
        });
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var {
            id: nodes.len() - 1,
            graph: self,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(CftError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![S::ONE]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |n: NodeId| -> &Tensor<S> { &nodes[n].value };
            let needs = |n: NodeId| nodes[n].requires_grad;
            let mut send = |n: NodeId, contrib: Vec<S>| {
                if !nodes[n].requires_grad {
                    return;
                }
                match &mut grads[n] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => match node.param {
                    Some(pid) => {
                        out.params.insert(pid, g);
                    }
                    None => {
                        out.leaves.insert(id, g);
                    }
                },
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|&v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if needs(*a) {
                        send(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                    }
                    if needs(*b) {
                        send(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if needs(*a) {
                        send(*a, g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
                    }
                    if needs(*b) {
                        let gb = g
                            .iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&g, (&a, &b))| -g * a / (b * b))
                            .collect();
                        send(*b, gb);
                    }
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let pick_a = matches!(node.op, Op::Minimum(..));
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let mut ga = vec![S::ZERO; g.len()];
                    let mut gb = vec![S::ZERO; g.len()];
                    for i in 0..g.len() {
                        let a_wins = if pick_a { av[i] <= bv[i] } else { av[i] >= bv[i] };
                        if a_wins {
                            ga[i] = g[i];
                        } else {
                            gb[i] = g[i];
                        }
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect()),
                Op::AddScalar(x) | Op::Reshape(x) => send(*x, g),
                Op::AddRowBias(x, b) => {
                    let n = *val(*b).shape().last().expect("bias rank 1");
                    if needs(*b) {
                        let mut gb = vec![S::ZERO; n];
                        for row in g.chunks(n) {
                            for (d, &v) in gb.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        send(*b, gb);
                    }
                    send(*x, g);
                }
                Op::AddChannelBias(x, b) => {
                    let c = val(*b).len();
                    if needs(*b) {
                        let plane = g.len() / c;
                        let gb = g.chunks(plane).map(|p| p.iter().copied().sum()).collect();
                        send(*b, gb);
                    }
                    send(*x, g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2(val(*a)).expect("checked at record time");
                    let n = val(*b).shape()[1];
                    if needs(*a) {
                        send(*a, kernels::matmul_nt(&g, val(*b).data(), m, n, k));
                    }
                    if needs(*b) {
                        send(*b, kernels::matmul_tn(val(*a).data(), &g, k, m, n));
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = dims2(val(*a)).expect("checked at record time");
                    let n = val(*b).shape()[0];
                    if needs(*a) {
                        send(*a, kernels::matmul(&g, val(*b).data(), m, n, k));
                    }
                    if needs(*b) {
                        send(*b, kernels::matmul_tn(&g, val(*a).data(), n, m, k));
                    }
                }
                Op::Transpose(x) => {
                    let (m, n) = dims2(val(*x)).expect("checked at record time");
                    send(*x, kernels::transpose(&g, n, m));
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = dims2(val(*x)).expect("checked at record time");
                    let width = g.len() / m;
                    let mut gx = vec![S::ZERO; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + width]
                            .copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    send(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let m = node.value.shape()[0];
                    let n = node.value.shape()[1];
                    let mut col = 0;
                    for &p in parts {
                        let w = val(p).shape()[1];
                        if needs(p) {
                            let mut gp = Vec::with_capacity(m * w);
                            for r in 0..m {
                                gp.extend_from_slice(&g[r * n + col..r * n + col + w]);
                            }
                            send(p, gp);
                        }
                        col += w;
                    }
                }
                Op::SliceRows { x, offset } => {
                    let mut gx = vec![S::ZERO; val(*x).len()];
                    gx[*offset..*offset + g.len()].copy_from_slice(&g);
                    send(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let len = val(p).len();
                        if needs(p) {
                            send(p, g[at..at + len].to_vec());
                        }
                        at += len;
                    }
                }
                Op::Gather { x, index } => {
                    let mut gx = vec![S::ZERO; val(*x).len()];
                    for (&i, &v) in index.iter().zip(&g) {
                        gx[i] += v;
                    }
                    send(*x, gx);
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = node.value.data();
                    let mut gx = vec![S::ZERO; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: S = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    send(*x, gx);
                }
                Op::Gelu(x) => {
                    let xv = val(*x).data();
                    send(
                        *x,
                        g.iter().zip(xv).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect(),
                    );
                }
                Op::Silu(x) => {
                    let xv = val(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| {
                            let s = kernels::sigmoid(x);
                            g * s * (S::ONE + x * (S::ONE - s))
                        })
                        .collect();
                    send(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    send(*x, g.iter().zip(y).map(|(&g, &y)| g * y * (S::ONE - y)).collect());
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    send(*x, g.iter().zip(y).map(|(&g, &y)| g * y).collect());
                }
                Op::Log(x) => {
                    let xv = val(*x).data();
                    send(*x, g.iter().zip(xv).map(|(&g, &x)| g / x).collect());
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = val(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { S::ZERO })
                        .collect();
                    send(*x, gx);
                }
                Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
                Op::Conv2d { x, w, geom, c_out } => {
                    let (gx, gw) = kernels::conv2d_backward(
                        val(*x).data(),
                        val(*w).data(),
                        &g,
                        *c_out,
                        geom,
                        needs(*x),
                        needs(*w),
                    );
                    if let Some(gx) = gx {
                        send(*x, gx);
                    }
                    if let Some(gw) = gw {
                        send(*w, gw);
                    }
                }
                Op::AvgPool { x, p } => {
                    let (c, h, w) = dims3(val(*x)).expect("checked at record time");
                    send(*x, kernels::adaptive_avg_pool_backward(&g, c, h, w, *p));
                }
                Op::Upsample { x, h, w } => {
                    let (c, sh, sw) = dims3(val(*x)).expect("checked at record time");
                    send(*x, kernels::bilinear_upsample_backward(&g, c, sh, sw, *h, *w));
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, n) = dims2(val(*x)).expect("checked at record time");
                    let xv = val(*x).data();
                    let gam = val(*gamma).data();
                    let mut gx = vec![S::ZERO; m * n];
                    let mut gg = vec![S::ZERO; n];
                    let mut gbeta = vec![S::ZERO; n];
                    let nf = S::from_usize(n);
                    for r in 0..m {
                        let row = &xv[r * n..(r + 1) * n];
                        let mean = row.iter().copied().sum::<S>() / nf;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
                        let inv = S::ONE / (var + *eps).sqrt();
                        let gr = &g[r * n..(r + 1) * n];
                        let mut sum_gh = S::ZERO;
                        let mut sum_gh_xh = S::ZERO;
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            let gh = gr[j] * gam[j];
                            gg[j] += gr[j] * xh;
                            gbeta[j] += gr[j];
                            sum_gh += gh;
                            sum_gh_xh += gh * xh;
                        }
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            let gh = gr[j] * gam[j];
                            gx[r * n + j] = inv * (gh - sum_gh / nf - xh * sum_gh_xh / nf);
                        }
                    }
                    send(*gamma, gg);
                    send(*beta, gbeta);
                    send(*x, gx);
                }
            }
        }
        Ok(out)
    }
}

fn same_shape<S: Real>(op: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CftError::dim(format!(
            "{op}: shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'g, S: Real> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn check_same_graph(&self, other: &Var<'g, S>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn zip_with(
        self,
        other: Var<'g, S>,
        name: &'static str,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var<'g, S>> {
        self.check_same_graph(&other);
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.graph.push(name, out, op, &[self.id, other.id], 0)
    }

    fn unary(self, name: &'static str, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var<'g, S>> {
        let out = self.value().map(f);
        self.graph.push(name, out, op, &[self.id], 0)
    }

    pub fn add(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.zip_with(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.zip_with(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn minimum(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.zip_with(other, "minimum", Op::Minimum(self.id, other.id), |a, b| {
            if a <= b {
                a
            } else {
                b
            }
        })
    }

    pub fn maximum(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.zip_with(other, "maximum", Op::Maximum(self.id, other.id), |a, b| {
            if a >= b {
                a
            } else {
                b
            }
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'g, S>> {
        let c = S::from_f64(c);
        self.unary("scale", Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Result<Var<'g, S>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g, S>> {
        let c = S::from_f64(c);
        self.unary("add_scalar", Op::AddScalar(self.id), |v| v + c)
    }

    pub fn square(self) -> Result<Var<'g, S>> {
        self.mul(self)
    }

    /// `x[m x n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'g, S>) -> Result<Var<'g, S>> {
        self.check_same_graph(&bias);
        let (x, b) = (self.value(), bias.value());
        let (_, n) = dims2(&x)?;
        if b.len() != n || b.rank() != 1 {
            return Err(CftError::dim(format!(
                "row bias {:?} does not match matrix {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        self.graph.push(
            "add_row_bias",
            out,
            Op::AddRowBias(self.id, bias.id),
            &[self.id, bias.id],
            0,
        )
    }

    /// `x[c x h x w] + bias[c]` broadcast over each plane.
    pub fn add_channel_bias(self, bias: Var<'g, S>) -> Result<Var<'g, S>> {
        self.check_same_graph(&bias);
        let (x, b) = (self.value(), bias.value());
        let (c, h, w) = dims3(&x)?;
        if b.len() != c || b.rank() != 1 {
            return Err(CftError::dim(format!(
                "channel bias {:?} does not match {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut out = (*x).clone();
        for (plane, &v) in out.data_mut().chunks_mut(h * w).zip(b.data()) {
            for o in plane {
                *o += v;
            }
        }
        self.graph.push(
            "add_channel_bias",
            out,
            Op::AddChannelBias(self.id, bias.id),
            &[self.id, bias.id],
            0,
        )
    }

    pub fn matmul(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.check_same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2(&a)?;
        let (k2, n) = dims2(&b)?;
        if k != k2 {
            return Err(CftError::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        self.graph.push(
            "matmul",
            out,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
            (m * k * n) as u64,
        )
    }

    /// `self[m x k] * other[n x k]^T`.
    pub fn matmul_nt(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.check_same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2(&a)?;
        let (n, k2) = dims2(&b)?;
        if k != k2 {
            return Err(CftError::dim(format!(
                "matmul_nt inner extents differ: {:?} x {:?}^T",
                a.shape(),
                b.shape()
            )));
        }
        let out = Tensor::new(vec![m, n], kernels::matmul_nt(a.data(), b.data(), m, k, n))?;
        self.graph.push(
            "matmul",
            out,
            Op::MatMulNt(self.id, other.id),
            &[self.id, other.id],
            (m * k * n) as u64,
        )
    }

    pub fn transpose(self) -> Result<Var<'g, S>> {
        let x = self.value();
        let (m, n) = dims2(&x)?;
        let out = Tensor::new(vec![n, m], kernels::transpose(x.data(), m, n))?;
        self.graph
            .push("transpose", out, Op::Transpose(self.id), &[self.id], 0)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, S>> {
        let out = self.value().reshape(shape)?;
        self.graph
            .push("reshape", out, Op::Reshape(self.id), &[self.id], 0)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g, S>> {
        let x = self.value();
        let (m, n) = dims2(&x)?;
        if start >= end || end > n {
            return Err(CftError::dim(format!("column range {start}..{end} of {n}")));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&x.data()[r * n + start..r * n + end]);
        }
        let out = Tensor::new(vec![m, end - start], data)?;
        self.graph
            .push("slice_cols", out, Op::SliceCols { x: self.id, start }, &[self.id], 0)
    }

    /// Leading-axis range `start..end`, for any rank.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'g, S>> {
        let x = self.value();
        let rows = x.shape()[0];
        if start >= end || end > rows {
            return Err(CftError::dim(format!("row range {start}..{end} of {rows}")));
        }
        let stride = x.len() / rows;
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, x.data()[start * stride..end * stride].to_vec())?;
        self.graph.push(
            "slice_rows",
            out,
            Op::SliceRows {
                x: self.id,
                offset: start * stride,
            },
            &[self.id],
            0,
        )
    }

    /// Flat gather: output element `i` is `self.data[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'g, S>> {
        let x = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(CftError::dim(format!("gather index {bad} out of {}", x.len())));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.graph.push(
            "gather",
            out,
            Op::Gather {
                x: self.id,
                index: index.into(),
            },
            &[self.id],
            0,
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g, S>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(CftError::dim(format!(
                "softmax axis {axis} for shape {:?}",
                x.shape()
            )));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let out = Tensor::new(
            x.shape().to_vec(),
            kernels::softmax(x.data(), outer, len, inner),
        )?;
        self.graph.push(
            "softmax",
            out,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            &[self.id],
            0,
        )
    }

    pub fn gelu(self) -> Result<Var<'g, S>> {
        self.unary("gelu", Op::Gelu(self.id), kernels::gelu)
    }

    pub fn silu(self) -> Result<Var<'g, S>> {
        self.unary("silu", Op::Silu(self.id), |x| x * kernels::sigmoid(x))
    }

    pub fn sigmoid(self) -> Result<Var<'g, S>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn exp(self) -> Result<Var<'g, S>> {
        self.unary("exp", Op::Exp(self.id), Real::exp)
    }

    pub fn ln(self) -> Result<Var<'g, S>> {
        self.unary("log", Op::Log(self.id), Real::ln)
    }

    /// Clamp to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g, S>> {
        let (lo, hi) = (S::from_f64(lo), S::from_f64(hi));
        self.unary("clamp", Op::Clamp { x: self.id, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum(self) -> Result<Var<'g, S>> {
        let total: S = self.value().data().iter().copied().sum();
        self.graph
            .push("sum", Tensor::scalar(total), Op::Sum(self.id), &[self.id], 0)
    }

    pub fn mean(self) -> Result<Var<'g, S>> {
        let n = self.value().len();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Cross-correlation of `self[c_in x h x w]` with `weight[c_out x c_in x k x k]`.
    pub fn conv2d(self, weight: Var<'g, S>, stride: usize, pad: usize) -> Result<Var<'g, S>> {
        self.check_same_graph(&weight);
        let (x, wt) = (self.value(), weight.value());
        let (c_in, h, w) = dims3(&x)?;
        let (c_out, k) = match wt.shape() {
            [co, ci, k1, k2] if *ci == c_in && k1 == k2 => (*co, *k1),
            s => {
                return Err(CftError::dim(format!(
                    "kernel {s:?} incompatible with input {:?}",
                    x.shape()
                )))
            }
        };
        let h_out = kernels::conv_out_extent(h, k, stride, pad);
        let w_out = kernels::conv_out_extent(w, k, stride, pad);
        let (Some(h_out), Some(w_out)) = (h_out, w_out) else {
            return Err(CftError::dim(format!(
                "conv2d output extent < 1 for input {:?}, kernel {k}, stride {stride}, pad {pad}",
                x.shape()
            )));
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let data = kernels::conv2d(x.data(), wt.data(), c_out, &geom);
        let out = Tensor::new(vec![c_out, h_out, w_out], data)?;
        let macs = (c_out * c_in * k * k * h_out * w_out) as u64;
        self.graph.push(
            "conv2d",
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                c_out,
            },
            &[self.id, weight.id],
            macs,
        )
    }

    /// Mean-pool `self[c x h x w]` onto a `p x p` grid.
    pub fn adaptive_avg_pool(self, p: usize) -> Result<Var<'g, S>> {
        if p < 1 {
            return Err(CftError::dim("pooled size must be at least 1"));
        }
        let x = self.value();
        let (c, h, w) = dims3(&x)?;
        let out = Tensor::new(
            vec![c, p, p],
            kernels::adaptive_avg_pool(x.data(), c, h, w, p),
        )?;
        self.graph
            .push("avg_pool", out, Op::AvgPool { x: self.id, p }, &[self.id], 0)
    }

    /// Bilinear resize of `self[c x p x q]` to `h x w`, half-pixel centers.
    pub fn bilinear_upsample(self, h: usize, w: usize) -> Result<Var<'g, S>> {
        let x = self.value();
        let (c, sh, sw) = dims3(&x)?;
        if h < sh || w < sw {
            return Err(CftError::dim(format!(
                "upsample target {h}x{w} smaller than source {sh}x{sw}"
            )));
        }
        let out = Tensor::new(
            vec![c, h, w],
            kernels::bilinear_upsample(x.data(), c, sh, sw, h, w),
        )?;
        self.graph
            .push("upsample", out, Op::Upsample { x: self.id, h, w }, &[self.id], 0)
    }

    /// Row-wise layer normalization of a matrix with learned gain and shift.
    pub fn layer_norm(self, gamma: Var<'g, S>, beta: Var<'g, S>, eps: f64) -> Result<Var<'g, S>> {
        let x = self.value();
        let (m, n) = dims2(&x)?;
        if gamma.value().len() != n || beta.value().len() != n {
            return Err(CftError::dim("layer norm affine extents"));
        }
        let eps = S::from_f64(eps);
        let (gv, bv) = (gamma.value(), beta.value());
        let nf = S::from_usize(n);
        let mut data = Vec::with_capacity(m * n);
        for row in x.data().chunks(n) {
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let inv = S::ONE / (var + eps).sqrt();
            for j in 0..n {
                data.push((row[j] - mean) * inv * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.graph.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            &[self.id, gamma.id, beta.id],
            0,
        )
    }
}

/// Concatenate matrices side by side.
pub fn concat_cols<'g, S: Real>(parts: &[Var<'g, S>]) -> Result<Var<'g, S>> {
    let first = parts.first().ok_or_else(|| CftError::dim("concat of nothing"))?;
    let g = first.graph;
    let vals: Vec<_> = parts.iter().map(Var::value).collect();
    let m = dims2(&vals[0])?.0;
    let mut n = 0;
    for v in &vals {
        let (rows, cols) = dims2(v)?;
        if rows != m {
            return Err(CftError::dim("concat_cols row counts differ"));
        }
        n += cols;
    }
    let mut data = Vec::with_capacity(m * n);
    for r in 0..m {
        for v in &vals {
            let w = v.shape()[1];
            data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
    g.push(
        "concat_cols",
        Tensor::new(vec![m, n], data)?,
        Op::ConcatCols(ids.clone()),
        &ids,
        0,
    )
}

/// Concatenate along the leading axis; trailing extents must agree.
pub fn concat_rows<'g, S: Real>(parts: &[Var<'g, S>]) -> Result<Var<'g, S>> {
    let first = parts.first().ok_or_else(|| CftError::dim("concat of nothing"))?;
    let g = first.graph;
    let vals: Vec<_> = parts.iter().map(Var::value).collect();
    let tail = vals[0].shape()[1..].to_vec();
    let mut rows = 0;
    let mut data = Vec::new();
    for v in &vals {
        if v.shape()[1..] != tail[..] {
            return Err(CftError::dim(format!(
                "concat_rows trailing extents differ: {:?} vs {:?}",
                v.shape(),
                vals[0].shape()
            )));
        }
        rows += v.shape()[0];
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(&tail);
    let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
    g.push(
        "concat_rows",
        Tensor::new(shape, data)?,
        Op::ConcatRows(ids.clone()),
        &ids,
        0,
    )
}
