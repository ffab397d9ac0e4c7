//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order, so every node's parents
//! precede it and a single reverse sweep visits each node once. A tape can
//! be differentiated exactly once; a second [`Tape::backward`] is an error.

use std::cell::{Cell, Ref, RefCell};

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{NumericError, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Sqrt(usize),
    Powf(usize, f64),
    Softmax { x: usize, n: usize, inner: usize },
    LogSoftmax { x: usize, n: usize, inner: usize },
    LayerNorm { x: usize, rstd: Vec<f64> },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    ConcatRows(Vec<usize>),
    SelectRows { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize },
    Reshape(usize),
    CumsumLast(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
    Attention(Box<AttentionSaved>),
}

#[derive(Debug)]
struct AttentionSaved {
    q: usize,
    k: usize,
    v: usize,
    groups: Vec<Vec<usize>>,
    heads: usize,
    // per group, per head: L×L row-stochastic matrix
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a differentiable computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Concatenates along the first axis. All inputs must share trailing extents.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, NumericError> {
        if parts.is_empty() {
            return Err(NumericError::Shape {
                op: "concat_rows",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let nodes = self.nodes.borrow();
        let first = &nodes[parts[0].id].value;
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(NumericError::Shape {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
            needs |= nodes[p.id].needs_grad;
        }
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(ids),
            needs,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// The tape is consumed: a second call returns [`NumericError::TapeConsumed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumericError> {
        if self.consumed.get() {
            return Err(NumericError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(NumericError::NonScalarLoss {
                shape: root.shape().to_vec(),
            });
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, node, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], node: &Node, _id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm_nt_acc(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm_tn_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::AddRow(a, b) => {
            let n = nodes[*b].value.len();
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        Op::MulRow(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let n = bv.len();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, o) in ga.iter_mut().enumerate() {
                    *o += g[i] * bv[i % n];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % n] += gi * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
        }
        Op::Gelu(a) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    let xi = x[i];
                    let t = (GELU_C * (xi + GELU_K * xi * xi * xi)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xi * xi);
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::Sigmoid(a) => unary(nodes, grads, *a, g, |i, _| y[i] * (1.0 - y[i])),
        Op::Tanh(a) => unary(nodes, grads, *a, g, |i, _| 1.0 - y[i] * y[i]),
        Op::Exp(a) => unary(nodes, grads, *a, g, |i, _| y[i]),
        Op::Log(a) => unary(nodes, grads, *a, g, |_, x| 1.0 / x),
        Op::Sin(a) => unary(nodes, grads, *a, g, |_, x| x.cos()),
        Op::Cos(a) => unary(nodes, grads, *a, g, |_, x| -x.sin()),
        Op::Square(a) => unary(nodes, grads, *a, g, |_, x| 2.0 * x),
        Op::Sqrt(a) => unary(nodes, grads, *a, g, |i, _| 0.5 / y[i]),
        Op::Powf(a, c) => unary(nodes, grads, *a, g, |_, x| c * x.powf(c - 1.0)),
        Op::Softmax { x, n, inner } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for_each_line(y.len(), *n, *inner, |idx| {
                    let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
                    for i in idx {
                        gx[i] += y[i] * (g[i] - dot);
                    }
                });
            }
        }
        Op::LogSoftmax { x, n, inner } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for_each_line(y.len(), *n, *inner, |idx| {
                    let total: f64 = idx.clone().map(|i| g[i]).sum();
                    for i in idx {
                        gx[i] += g[i] - y[i].exp() * total;
                    }
                });
            }
        }
        Op::LayerNorm { x, rstd } => {
            let cols = node.value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &s) in rstd.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        gx[r * cols + j] += s * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let n = ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += g[0] / n);
            }
        }
        Op::SumLast(a) => {
            let cols = nodes[*a].value.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, o) in ga.iter_mut().enumerate() {
                    *o += g[i / cols];
                }
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &p in ids {
                let n = nodes[p].value.len();
                if let Some(gp) = acc(nodes, grads, p) {
                    add_into(gp, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::SelectRows { x, idx } => {
            let cols = node.value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(
                        &mut gx[src * cols..(src + 1) * cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
        }
        Op::SliceCols { x, start } => {
            let src_cols = nodes[*x].value.cols();
            let len = node.value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..node.value.rows() {
                    add_into(
                        &mut gx[r * src_cols + start..r * src_cols + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
        }
        Op::CumsumLast(a) => {
            let cols = node.value.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for r in 0..node.value.rows() {
                    let mut run = 0.0;
                    for j in (0..cols).rev() {
                        run += g[r * cols + j];
                        ga[r * cols + j] += run;
                    }
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xv[i] > *lo && xv[i] < *hi {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] <= bv[i] {
                        ga[i] += g[i];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..g.len() {
                    if av[i] > bv[i] {
                        gb[i] += g[i];
                    }
                }
            }
        }
        Op::Attention(saved) => attention_backward(nodes, saved, g, grads),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    deriv: impl Fn(usize, f64) -> f64,
) {
    let x = nodes[a].value.data();
    if let Some(ga) = acc(nodes, grads, a) {
        for i in 0..g.len() {
            ga[i] += g[i] * deriv(i, x[i]);
        }
    }
}

/// Visits each 1-D line along an axis of extent `n` with stride `inner`.
fn for_each_line(
    total: usize,
    n: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    if n == 0 {
        return;
    }
    let outer = total / (n * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            f((base..base + n * inner).step_by(inner));
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    s: &AttentionSaved,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let qv = nodes[s.q].value.data();
    let kv = nodes[s.k].value.data();
    let vv = nodes[s.v].value.data();
    let cols = nodes[s.q].value.cols();
    let dh = cols / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; qv.len()];
    let mut gk = vec![0.0; kv.len()];
    let mut gv = vec![0.0; vv.len()];
    for (gi, rows) in s.groups.iter().enumerate() {
        let l = rows.len();
        for h in 0..s.heads {
            let p = &s.probs[gi][h * l * l..(h + 1) * l * l];
            let off = h * dh;
            for (a, &ra) in rows.iter().enumerate() {
                let go = &g[ra * cols + off..ra * cols + off + dh];
                // dP[a, b] = go · v_b
                let mut dp = vec![0.0; l];
                for (b, &rb) in rows.iter().enumerate() {
                    let vb = &vv[rb * cols + off..rb * cols + off + dh];
                    dp[b] = go.iter().zip(vb).map(|(x, y)| x * y).sum();
                    let w = p[a * l + b];
                    for d in 0..dh {
                        gv[rb * cols + off + d] += w * go[d];
                    }
                }
                let dot: f64 = (0..l).map(|b| dp[b] * p[a * l + b]).sum();
                for (b, &rb) in rows.iter().enumerate() {
                    let ds = p[a * l + b] * (dp[b] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for d in 0..dh {
                        gq[ra * cols + off + d] += ds * kv[rb * cols + off + d];
                        gk[rb * cols + off + d] += ds * qv[ra * cols + off + d];
                    }
                }
            }
        }
    }
    for (id, buf) in [(s.q, gq), (s.k, gk), (s.v, gv)] {
        if let Some(dst) = acc(nodes, grads, id) {
            add_into(dst, &buf);
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.value_ref(self.id).data().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.tape.value_ref(self.id);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        drop(v);
        let needs = self.requires_grad();
        self.tape.push(Tensor::from_parts(shape, data), op, needs)
    }

    fn zip(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, NumericError> {
        let a = self.tape.value_ref(self.id);
        let b = self.tape.value_ref(other.id);
        if a.shape() != b.shape() {
            return Err(shape_err(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape().to_vec();
        drop((a, b));
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::from_parts(shape, data), op, needs))
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumericError> {
        let a = self.tape.value_ref(self.id);
        let b = self.tape.value_ref(other.id);
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", &a, &b));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        drop((a, b));
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id, other.id),
            needs,
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>, NumericError> {
        let a = self.tape.value_ref(self.id);
        if a.shape().len() != 2 {
            return Err(shape_err("transpose", &a, &a));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        drop(a);
        let needs = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose(self.id),
            needs,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumericError> {
        self.zip(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumericError> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NumericError> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, NumericError> {
        self.zip(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>, NumericError> {
        self.zip(other, "minimum", Op::Minimum(self.id, other.id), f64::min)
    }

    fn row_broadcast(
        self,
        row: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, NumericError> {
        let a = self.tape.value_ref(self.id);
        let b = self.tape.value_ref(row.id);
        if b.len() != a.cols() || b.shape().len() != 1 {
            return Err(shape_err(name, &a, &b));
        }
        let n = b.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % n]))
            .collect();
        let shape = a.shape().to_vec();
        drop((a, b));
        let needs = self.requires_grad() || row.requires_grad();
        Ok(self.tape.push(Tensor::from_parts(shape, data), op, needs))
    }

    /// Adds a length-`n` vector to every row of an `[..×n]` tensor.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>, NumericError> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// Multiplies every row of an `[..×n]` tensor by a length-`n` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>, NumericError> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map(Op::AddScalar(self.id), |x| x + c)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.map(Op::Gelu(self.id), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.map(Op::Log(self.id), f64::ln)
    }

    pub fn sin(self) -> Var<'t> {
        self.map(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.map(Op::Cos(self.id), f64::cos)
    }

    pub fn square(self) -> Var<'t> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn powf(self, c: f64) -> Var<'t> {
        self.map(Op::Powf(self.id, c), |x| x.powf(c))
    }

    /// Elementwise clamp; the gradient is passed only strictly inside `(lo, hi)`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map(Op::Clamp { x: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    fn axis_layout(&self, axis: usize) -> Result<(usize, usize), NumericError> {
        let v = self.tape.value_ref(self.id);
        let shape = v.shape();
        if shape.is_empty() || axis >= shape.len() {
            return Err(shape_err("softmax", &v, &v));
        }
        Ok((shape[axis], shape[axis + 1..].iter().product()))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>, NumericError> {
        let (n, inner) = self.axis_layout(axis)?;
        let v = self.tape.value_ref(self.id);
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(NumericError::NonFinite { op: "softmax" });
        }
        let mut out = v.data().to_vec();
        for_each_line(out.len(), n, inner, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - max).exp();
                sum += out[i];
            }
            for i in idx {
                out[i] /= sum;
            }
        });
        let shape = v.shape().to_vec();
        drop(v);
        let needs = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x: self.id, n, inner },
            needs,
        ))
    }

    /// Log of the softmax along `axis`, computed without forming the softmax.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>, NumericError> {
        let (n, inner) = self.axis_layout(axis)?;
        let v = self.tape.value_ref(self.id);
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(NumericError::NonFinite { op: "log_softmax" });
        }
        let mut out = v.data().to_vec();
        for_each_line(out.len(), n, inner, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.clone().map(|i| (out[i] - max).exp()).sum::<f64>().ln();
            for i in idx {
                out[i] -= lse;
            }
        });
        let shape = v.shape().to_vec();
        drop(v);
        let needs = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { x: self.id, n, inner },
            needs,
        ))
    }

    /// Per-row standardisation over the last axis (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let v = self.tape.value_ref(self.id);
        let cols = v.cols();
        let rows = v.rows();
        let mut out = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &v.data()[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (x[j] - mean) * s;
            }
            rstd.push(s);
        }
        let shape = v.shape().to_vec();
        drop(v);
        let needs = self.requires_grad();
        self.tape.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x: self.id, rstd },
            needs,
        )
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.value_ref(self.id).data().iter().sum();
        let needs = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), needs)
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.tape.value_ref(self.id);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        drop(v);
        let needs = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), needs)
    }

    /// Sums over the last axis: `[..×n] → [..]`.
    pub fn sum_last(self) -> Var<'t> {
        let v = self.tape.value_ref(self.id);
        let cols = v.cols();
        let data: Vec<f64> = v.data().chunks(cols).map(|c| c.iter().sum()).collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        drop(v);
        let needs = self.requires_grad();
        self.tape
            .push(Tensor::from_parts(shape, data), Op::SumLast(self.id), needs)
    }

    /// Gathers rows of a 2-D tensor (indices may repeat).
    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'t>, NumericError> {
        let v = self.tape.value_ref(self.id);
        let rows = v.rows();
        if v.shape().len() != 2 || idx.iter().any(|&i| i >= rows) {
            return Err(NumericError::Shape {
                op: "select_rows",
                lhs: v.shape().to_vec(),
                rhs: idx.to_vec(),
            });
        }
        let cols = v.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        drop(v);
        let needs = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![idx.len(), cols], data),
            Op::SelectRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>, NumericError> {
        let v = self.tape.value_ref(self.id);
        let cols = v.cols();
        if v.shape().len() != 2 || start + len > cols {
            return Err(NumericError::Shape {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        drop(v);
        let needs = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![rows, len], data),
            Op::SliceCols { x: self.id, start },
            needs,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, NumericError> {
        let v = self.tape.value_ref(self.id);
        if shape.iter().product::<usize>() != v.len() {
            return Err(NumericError::Shape {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = v.data().to_vec();
        drop(v);
        let needs = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape(self.id),
            needs,
        ))
    }

    /// Running sum along the last axis.
    pub fn cumsum_last(self) -> Var<'t> {
        let v = self.tape.value_ref(self.id);
        let cols = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            for j in 1..cols {
                row[j] += row[j - 1];
            }
        }
        let shape = v.shape().to_vec();
        drop(v);
        let needs = self.requires_grad();
        self.tape
            .push(Tensor::from_parts(shape, data), Op::CumsumLast(self.id), needs)
    }
}

/// Multi-head scaled dot-product attention restricted to row groups.
///
/// `q`, `k`, `v` are `[R×C]`; each group is a list of row indices forming one
/// independent sequence. Rows outside every group produce zero output. No
/// positional information is added, so the result is equivariant to any
/// permutation of rows within a group.
pub fn grouped_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    groups: &[Vec<usize>],
    heads: usize,
) -> Result<Var<'t>, NumericError> {
    let tape = q.tape;
    let qv = tape.value_ref(q.id);
    let kv = tape.value_ref(k.id);
    let vv = tape.value_ref(v.id);
    if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
        return Err(shape_err("attention", &qv, &kv));
    }
    let cols = qv.cols();
    if heads == 0 || cols % heads != 0 {
        return Err(NumericError::Config(format!(
            "feature width {cols} not divisible by {heads} heads"
        )));
    }
    let rows = qv.rows();
    if groups.iter().flatten().any(|&r| r >= rows) {
        return Err(NumericError::Shape {
            op: "attention",
            lhs: qv.shape().to_vec(),
            rhs: vec![groups.iter().flatten().copied().max().unwrap_or(0)],
        });
    }
    let dh = cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * cols];
    let mut probs = Vec::with_capacity(groups.len());
    for group in groups {
        let l = group.len();
        let mut gp = vec![0.0; heads * l * l];
        for h in 0..heads {
            let off = h * dh;
            for (a, &ra) in group.iter().enumerate() {
                let qa = &qv.data()[ra * cols + off..ra * cols + off + dh];
                let p = &mut gp[h * l * l + a * l..h * l * l + (a + 1) * l];
                let mut max = f64::NEG_INFINITY;
                for (b, &rb) in group.iter().enumerate() {
                    let kb = &kv.data()[rb * cols + off..rb * cols + off + dh];
                    let s = qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() * scale;
                    p[b] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for x in p.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in p.iter_mut() {
                    *x /= sum;
                }
                let o = &mut out[ra * cols + off..ra * cols + off + dh];
                for (b, &rb) in group.iter().enumerate() {
                    let vb = &vv.data()[rb * cols + off..rb * cols + off + dh];
                    for d in 0..dh {
                        o[d] += p[b] * vb[d];
                    }
                }
            }
        }
        probs.push(gp);
    }
    drop((qv, kv, vv));
    let needs = q.requires_grad() || k.requires_grad() || v.requires_grad();
    Ok(tape.push(
        Tensor::from_parts(vec![rows, cols], out),
        Op::Attention(Box::new(AttentionSaved {
            q: q.id,
            k: k.id,
            v: v.id,
            groups: groups.to_vec(),
            heads,
            probs,
        })),
        needs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(NumericError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericError::NonScalarLoss { .. })
        ));
        // a failed call does not consume the tape
        assert!(tape.backward(x.sum()).is_ok());
    }

    #[test]
    fn matmul_hand_values_and_shape_error() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().to_vec(), vec![3.0, 7.0]);
        let bad = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        let err = a.matmul(bad).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn identity_matmul_is_noop() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(i.matmul(x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn softmax_uniform_and_stabilised() {
        let tape = Tape::new();
        let u = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax(0).unwrap();
        for p in u.to_vec() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape.constant(t(&[3], &[1000.0, 0.0, 0.0])).softmax(0).unwrap();
        let v = s.to_vec();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12 && v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(x.softmax(0), Err(NumericError::NonFinite { .. })));
    }

    #[test]
    fn softmax_over_first_axis_of_matrix() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 3.0])).softmax(0).unwrap();
        let v = x.to_vec();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unused_branch_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.leaf(t(&[2], &[3.0, 4.0]));
        let _unused = y.square();
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(y).is_none());
    }
}
