//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are stored
//! in creation order, which is already a topological order, so
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Every op also reports an analytic multiply-add count and the number of
//! values it keeps alive for the backward pass. The conventions are:
//!
//! | op | mults_adds | saved values |
//! |----|-----------:|-------------:|
//! | binary / unary elementwise | `numel(out)` | 0 |
//! | matmul `[..,m,k]x[..,k,n]` | `batch*m*k*n` | 0 |
//! | layer norm | `4*numel` | `numel + rows` |
//! | softmax, log-softmax | `3*numel` | 0 |
//! | sum, sum over an axis | `numel(input)` | 0 |
//! | reshape, permute, concat, slice, block permute, gather | 0 | 0 |
//! | custom | reported by the op | reported by the op |
//!
//! The live-value footprint of a graph is the sum, over non-leaf nodes, of
//! the output size plus the saved values.

use std::collections::HashMap;
use std::fmt::Debug;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{broadcast_shapes, numel, strides, BroadcastMap, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Tanh,
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Abs,
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
}

/// Elementwise operation selector, covering both unary and binary kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Silu,
    Softplus,
    Exp,
    Scale(f64),
}

/// An operation whose forward value is computed outside the graph and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp: Debug {
    fn name(&self) -> &'static str;

    /// Gradient for each input (`None` where `needs[i]` is false), given the
    /// upstream gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;

    fn mults_adds(&self) -> u64;

    fn saved_values(&self) -> usize {
        0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    Matmul { a: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum { x: Var },
    SumAxis { x: Var, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    PermuteBlocks { x: Var, block: usize, perms: Vec<Vec<usize>> },
    GatherRows { x: Var, rows: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Unary { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x }
            | Op::SumAxis { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::PermuteBlocks { x, .. }
            | Op::GatherRows { x, .. } => vec![*x],
        }
    }

    fn saved_values(&self) -> usize {
        match self {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::Custom { op, .. } => op.saved_values(),
            _ => 0,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    mults_adds: u64,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Affine { scale, shift } => scale * x + shift,
    }
}

/// Derivative of the unary op at input `x` with output `y`.
fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Affine { scale, .. } => scale,
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(grow, brow);
        }
    }
}

/// Dot product with four interleaved partial sums.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatmulDims {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_batch: BroadcastMap,
    b_batch: BroadcastMap,
    batches: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shapes(ab, bb).ok_or_else(|| mismatch("matmul", a, b))?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        m,
        k,
        n,
        a_batch: BroadcastMap::new(ab, &batch),
        b_batch: BroadcastMap::new(bb, &batch),
        batches: numel(&batch),
        out_shape,
    })
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn validate_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
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

    /// Multiply-adds performed by every op recorded so far.
    pub fn mults_adds(&self) -> u64 {
        self.mults_adds
    }

    /// Activation values held for the backward pass.
    pub fn live_values(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.numel() + n.op.saved_values())
            .sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Direct inputs of the op that produced `v`; empty for leaves.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Whether `out` was computed, directly or not, from `src`.
    pub fn depends_on(&self, out: Var, src: Var) -> bool {
        if src.0 > out.0 {
            return false;
        }
        let mut seen = vec![false; out.0 + 1 - src.0];
        let mut stack = vec![out];
        while let Some(v) = stack.pop() {
            if v == src {
                return true;
            }
            for u in self.nodes[v.0].op.inputs() {
                if u.0 >= src.0 && !std::mem::replace(&mut seen[u.0 - src.0], true) {
                    stack.push(u);
                }
            }
        }
        false
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the gradient tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(TensorError::InvalidArgument(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(match kind {
            Elementwise::Add => self.add(inputs[0], inputs[1])?,
            Elementwise::Sub => self.sub(inputs[0], inputs[1])?,
            Elementwise::Mul => self.mul(inputs[0], inputs[1])?,
            Elementwise::Tanh => self.tanh(inputs[0]),
            Elementwise::Silu => self.silu(inputs[0]),
            Elementwise::Softplus => self.softplus(inputs[0]),
            Elementwise::Exp => self.exp(inputs[0]),
            Elementwise::Scale(s) => self.scale(inputs[0], s),
        })
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shapes(sa, sb).ok_or_else(|| {
            mismatch(
                match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                    BinaryKind::Div => "div",
                },
                sa,
                sb,
            )
        })?;
        let ma = BroadcastMap::new(sa, &out_shape);
        let mb = BroadcastMap::new(sb, &out_shape);
        let n = numel(&out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = match (&ma, &mb) {
            (BroadcastMap::Same, BroadcastMap::Same) => {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            }
            (BroadcastMap::Same, BroadcastMap::Suffix(m)) => {
                let mut out = Vec::with_capacity(n);
                for row in da.chunks_exact(*m) {
                    out.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            (BroadcastMap::Suffix(m), BroadcastMap::Same) => {
                let mut out = Vec::with_capacity(n);
                for row in db.chunks_exact(*m) {
                    out.extend(da.iter().zip(row).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => ma.iter(n).zip(mb.iter(n)).map(|(i, j)| f(da[i], db[j])).collect(),
        };
        self.mults_adds += n as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| unary_forward(kind, v));
        self.mults_adds += value.numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::Affine { scale: s, shift: 0.0 }, x)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(UnaryKind::Affine { scale, shift }, x)
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product with broadcast leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = matmul_dims(self.shape(a), self.shape(b))?;
        let MatmulDims { m, k, n, .. } = dims;
        let mut out = vec![0.0; dims.batches * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..dims.batches {
            let ao = dims.a_batch.index(bi) * m * k;
            let bo = dims.b_batch.index(bi) * k * n;
            gemm_acc(
                &da[ao..ao + m * k],
                &db[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.mults_adds += (dims.batches * m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(dims.out_shape, out)?, Op::Matmul { a, b }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            shape: shape.clone(),
            reason: "layer_norm needs at least one axis".into(),
        })?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = numel(&shape) / c;
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = gs[j] * h + bs[j];
            }
        }
        self.mults_adds += 4 * (rows * c) as u64;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    // ---- structure ------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat { inputs: inputs.to_vec(), axis },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let dim = *self.shape(x).get(axis).ok_or_else(|| {
            TensorError::InvalidArgument(format!("split axis {axis} out of range"))
        })?;
        if sizes.iter().sum::<usize>() != dim {
            return Err(TensorError::InvalidArgument(format!(
                "split sizes {sizes:?} do not cover axis of length {dim}"
            )));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if !validate_permutation(axes, shape.len()) {
            return Err(TensorError::InvalidArgument(format!(
                "{axes:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.value(x).data(), &shape, axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute { x, axes: axes.to_vec() },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::InvalidArgument("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.mults_adds += self.value(x).numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!(
                "sum axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.mults_adds += (outer * dim * inner) as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.mults_adds += 3 * out.len() as u64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Softmax { x }, rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        self.mults_adds += 3 * out.len() as u64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::LogSoftmax { x }, rg)
    }

    // ---- indexing -------------------------------------------------------

    /// Reorders whole blocks of `block` rows along axis 1 of a `[B, T, C]`
    /// tensor. Output block `j` of batch element `b` is input block
    /// `perms[b][j]`.
    pub fn permute_blocks(&mut self, x: Var, block: usize, perms: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || block == 0 || shape[1] % block != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "permute_blocks: {shape:?} is not [B, n*{block}, C]"
            )));
        }
        let (bsz, t, c) = (shape[0], shape[1], shape[2]);
        let nb = t / block;
        if perms.len() != bsz {
            return Err(TensorError::InvalidArgument(format!(
                "permute_blocks: {} permutations for batch of {bsz}",
                perms.len()
            )));
        }
        for p in perms {
            if !validate_permutation(p, nb) {
                return Err(TensorError::InvalidArgument(format!(
                    "{p:?} is not a permutation of 0..{nb}"
                )));
            }
        }
        let src = self.value(x).data();
        let chunk = block * c;
        let mut out = Vec::with_capacity(src.len());
        for (b, p) in perms.iter().enumerate() {
            for &j in p {
                let start = b * t * c + j * chunk;
                out.extend_from_slice(&src[start..start + chunk]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::PermuteBlocks { x, block, perms: perms.to_vec() },
            rg,
        ))
    }

    /// Picks row `rows[b]` of each batch element of a `[B, T, C]` tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || rows.len() != shape[0] || rows.iter().any(|&r| r >= shape[1]) {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows {rows:?} from {shape:?}"
            )));
        }
        let (t, c) = (shape[1], shape[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for (b, &r) in rows.iter().enumerate() {
            let start = (b * t + r) * c;
            out.extend_from_slice(&src[start..start + c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![shape[0], c], out)?,
            Op::GatherRows { x, rows: rows.to_vec() },
            rg,
        ))
    }

    /// Records an externally computed op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.mults_adds += op.mults_adds();
        let rg = self.any_grad(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = Vec::new();
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let t = g.map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"));
            if let (Some(id), Some(t)) = (node.param, &t) {
                params.push((id, t.clone()));
            }
            nodes.push(t);
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { nodes, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let ma = BroadcastMap::new(va.shape(), out_shape);
                let mb = BroadcastMap::new(vb.shape(), out_shape);
                let (da, db) = (va.data(), vb.data());
                if va.shape() == out_shape && vb.shape() == out_shape {
                    let pairs = || g.iter().zip(da.iter().zip(db));
                    if self.needs(*a) {
                        let ga = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                            BinaryKind::Mul => pairs().map(|(&gk, (_, &y))| gk * y).collect(),
                            BinaryKind::Div => pairs().map(|(&gk, (_, &y))| gk * (1.0 / y)).collect(),
                        };
                        accumulate(grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = match kind {
                            BinaryKind::Add => g.to_vec(),
                            BinaryKind::Sub => g.iter().map(|&gk| -gk).collect(),
                            BinaryKind::Mul => pairs().map(|(&gk, (&x, _))| gk * x).collect(),
                            BinaryKind::Div => pairs().map(|(&gk, (&x, &y))| gk * (-x / (y * y))).collect(),
                        };
                        accumulate(grads, *b, gb);
                    }
                    return;
                }
                if let (BroadcastMap::Same, BroadcastMap::Suffix(m)) = (&ma, &mb) {
                    let m = *m;
                    if self.needs(*a) {
                        let ga = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                            BinaryKind::Mul | BinaryKind::Div => {
                                let mut ga = Vec::with_capacity(g.len());
                                for row in g.chunks_exact(m) {
                                    ga.extend(row.iter().zip(db).map(|(&gk, &y)| match kind {
                                        BinaryKind::Mul => gk * y,
                                        _ => gk * (1.0 / y),
                                    }));
                                }
                                ga
                            }
                        };
                        accumulate(grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; m];
                        for (grow, xrow) in g.chunks_exact(m).zip(da.chunks_exact(m)) {
                            for ((acc, &gk), (&x, &y)) in gb.iter_mut().zip(grow).zip(xrow.iter().zip(db)) {
                                let d = match kind {
                                    BinaryKind::Add => 1.0,
                                    BinaryKind::Sub => -1.0,
                                    BinaryKind::Mul => x,
                                    BinaryKind::Div => -x / (y * y),
                                };
                                *acc += gk * d;
                            }
                        }
                        accumulate(grads, *b, gb);
                    }
                    return;
                }
                if self.needs(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for ((&gk, ia), ib) in g.iter().zip(ma.iter(g.len())).zip(mb.iter(g.len())) {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => db[ib],
                            BinaryKind::Div => 1.0 / db[ib],
                        };
                        ga[ia] += gk * d;
                    }
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for ((&gk, ia), ib) in g.iter().zip(ma.iter(g.len())).zip(mb.iter(g.len())) {
                        let d = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => da[ia],
                            BinaryKind::Div => {
                                let y = db[ib];
                                -da[ia] / (y * y)
                            }
                        };
                        gb[ib] += gk * d;
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Unary { kind, x } => {
                if self.needs(*x) {
                    let xs = self.value(*x).data();
                    let ys = node.value.data();
                    let gx = g
                        .iter()
                        .zip(xs.iter().zip(ys))
                        .map(|(&gk, (&xv, &yv))| gk * unary_derivative(*kind, xv, yv))
                        .collect();
                    accumulate(grads, *x, gx);
                }
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let dims = matmul_dims(va.shape(), vb.shape()).expect("validated in forward");
                let MatmulDims { m, k, n, .. } = dims;
                if self.needs(*a) {
                    let mut ga = vec![0.0; va.numel()];
                    for bi in 0..dims.batches {
                        let ao = dims.a_batch.index(bi) * m * k;
                        let bo = dims.b_batch.index(bi) * k * n;
                        gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb.data()[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; vb.numel()];
                    for bi in 0..dims.batches {
                        let ao = dims.a_batch.index(bi) * m * k;
                        let bo = dims.b_batch.index(bi) * k * n;
                        gemm_tn_acc(
                            &va.data()[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = *node.value.shape().last().expect("rank >= 1");
                let gs = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((o, &gk), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gk * h;
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; c];
                    for gr in g.chunks_exact(c) {
                        for (o, &gk) in gb.iter_mut().zip(gr) {
                            *o += gk;
                        }
                    }
                    accumulate(grads, *beta, gb);
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * c..(r + 1) * c;
                        let (gr, hr) = (&g[range.clone()], &xhat[range.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gs[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gs[j];
                            gx[r * c + j] = rs * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let s = o * total + offset;
                            gv.extend_from_slice(&g[s..s + chunk]);
                        }
                        accumulate(grads, v, gv);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let in_shape = self.shape(*x);
                    let (outer, dim, inner) = split_at_axis(in_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![0.0; numel(in_shape)];
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::SumAxis { x, axis } => {
                if self.needs(*x) {
                    let in_shape = self.shape(*x);
                    let (outer, dim, inner) = split_at_axis(in_shape, *axis);
                    let mut gx = vec![0.0; numel(in_shape)];
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let s = (o * dim + d) * inner;
                            gx[s..s + inner].copy_from_slice(src);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Permute { x, axes } => {
                if self.needs(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    accumulate(grads, *x, permute_data(g, node.value.shape(), &inverse));
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let c = *node.value.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::LogSoftmax { x } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let c = *node.value.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            out[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::PermuteBlocks { x, block, perms } => {
                if self.needs(*x) {
                    let shape = node.value.shape();
                    let (t, c) = (shape[1], shape[2]);
                    let chunk = block * c;
                    let mut gx = vec![0.0; g.len()];
                    for (b, p) in perms.iter().enumerate() {
                        for (j, &src) in p.iter().enumerate() {
                            let from = b * t * c + j * chunk;
                            let to = b * t * c + src * chunk;
                            gx[to..to + chunk].copy_from_slice(&g[from..from + chunk]);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let (t, c) = (shape[1], shape[2]);
                    let mut gx = vec![0.0; numel(shape)];
                    for (b, &r) in rows.iter().enumerate() {
                        let dst = (b * t + r) * c;
                        for j in 0..c {
                            gx[dst + j] += g[b * c + j];
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Custom { inputs, op } => {
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                if needs.iter().any(|&n| n) {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gin = op.backward(&values, &node.value, g, &needs);
                    for ((&v, gv), need) in inputs.iter().zip(gin).zip(needs) {
                        if let (Some(gv), true) = (gv, need) {
                            accumulate(grads, v, gv);
                        }
                    }
                }
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += step[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= step[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}
