//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every differentiable operation appends one node holding its output value
//! and the ids of its inputs. Node ids are assigned in execution order, so the
//! node vector is already a topological order and [`Tape::backward`] simply
//! walks it in reverse.

use std::cell::RefCell;
use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Guard used in cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Sqrt(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    GatherRows { x: usize, index: Vec<usize> },
    SegmentMean { x: usize, groups: Vec<Vec<usize>> },
    SegmentMax { x: usize, source: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Conv1d { x: usize, w: usize },
    Cosine(usize, usize),
    CrossEntropy { logits: usize, targets: Vec<usize> },
    BceWithLogits { x: usize, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::SegmentMean { .. } => "segment_mean",
            Op::SegmentMax { .. } => "segment_max",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::Cosine(..) => "cosine_similarity",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// The computation tape.
///
/// Interior mutability lets [`Var`] handles share the tape while recording,
/// so expressions nest naturally: `x.matmul(w)?.add_bias(b)?.relu()?`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` if `var` was unreachable.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss w.r.t. `var`; zeros when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.leaf(value.clone(), true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op, value: Tensor) -> Result<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        let requires_grad = inputs_of(&op).iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    /// Hash of every discrete choice recorded on the tape: ReLU and |x|
    /// branches, gathered and pooled row indices, max-pool winners and loss
    /// targets. Two passes with equal signatures evaluate the same smooth
    /// piece of a piecewise-defined function.
    pub fn branch_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut bytes: Vec<u8> = Vec::new();
        let mut put = |v: usize| bytes.extend_from_slice(&(v as u64).to_le_bytes());
        for node in nodes.iter() {
            node.op.name().bytes().for_each(|b| put(usize::from(b)));
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    let strict = matches!(node.op, Op::Relu(_));
                    for v in nodes[*x].value.data() {
                        put(usize::from(if strict { *v > 0.0 } else { *v >= 0.0 }));
                    }
                }
                Op::GatherRows { index, .. } => index.iter().for_each(|&i| put(i)),
                Op::SegmentMean { groups, .. } => {
                    for g in groups {
                        put(g.len());
                        g.iter().for_each(|&i| put(i));
                    }
                }
                Op::SegmentMax { source, .. } => source.iter().for_each(|&i| put(i)),
                Op::CrossEntropy { targets, .. } => targets.iter().for_each(|&i| put(i)),
                Op::BceWithLogits { targets, .. } => {
                    targets.iter().for_each(|t| put(t.to_bits() as usize))
                }
                Op::Narrow { axis, start, .. } => {
                    put(*axis);
                    put(*start);
                }
                _ => {}
            }
        }
        crate::container::fnv1a(&bytes)
    }

    fn value(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: id,
                });
            }
            for (input, contrib) in local_grads(&nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // leaves keep their gradient
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(n);
        let mut shapes = Vec::with_capacity(n);
        for (id, g) in grads.into_iter().enumerate() {
            let shape = nodes[id].value.shape().to_vec();
            let t = match (&nodes[id].op, g) {
                (Op::Leaf, Some(g)) if nodes[id].requires_grad => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { op: "leaf", node: id });
                    }
                    Some(Tensor::new(shape.clone(), g)?)
                }
                _ => None,
            };
            out.push(t);
            shapes.push(shape);
        }
        Ok(Gradients { grads: out, shapes })
    }
}

fn inputs_of(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBias(a, b)
        | Op::MatMul(a, b)
        | Op::Cosine(a, b) => vec![*a, *b],
        Op::Conv1d { x, w } => vec![*x, *w],
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Sqrt(a)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumCols(a)
        | Op::LogSoftmax(a)
        | Op::Reshape(a) => vec![*a],
        Op::Softmax { x, .. }
        | Op::GatherRows { x, .. }
        | Op::SegmentMean { x, .. }
        | Op::SegmentMax { x, .. }
        | Op::Narrow { x, .. }
        | Op::BceWithLogits { x, .. } => vec![*x],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Concat { inputs, .. } => inputs.clone(),
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Vector-Jacobian products of node `id` given its output gradient `g`.
fn local_grads(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::AddBias(x, b) => {
            let cols = val(*b).len();
            let mut gb = vec![0.0; cols];
            for row in g.chunks(cols) {
                gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
            }
            vec![(*x, g.to_vec()), (*b, gb)]
        }
        Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            // dA = G Bᵀ, dB = Aᵀ G
            let bt_t = transpose_raw(bt.data(), k, n);
            let ga = matmul_raw(g, &bt_t, m, n, k);
            let at_t = transpose_raw(at.data(), m, k);
            let gb = matmul_raw(&at_t, g, k, m, n);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(x) => {
            let s = val(*x).shape();
            // g has shape (n, m)
            vec![(*x, transpose_raw(g, s[1], s[0]))]
        }
        Op::Relu(x) => vec![(
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Sigmoid(x) => vec![(
            *x,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        )],
        Op::Exp(x) => vec![(*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
        Op::Sqrt(x) => vec![(
            *x,
            g.iter().zip(out.data()).map(|(g, y)| 0.5 * g / y).collect(),
        )],
        Op::Abs(x) => vec![(
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, v)| {
                    if *v > 0.0 {
                        *g
                    } else if *v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect(),
        )],
        Op::Square(x) => vec![(
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, v)| 2.0 * g * v)
                .collect(),
        )],
        Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
        Op::Mean(x) => {
            let n = val(*x).len();
            vec![(*x, vec![g[0] / n as f64; n])]
        }
        Op::SumCols(x) => {
            let c = val(*x).cols();
            let mut gx = Vec::with_capacity(val(*x).len());
            for gi in g {
                gx.extend(std::iter::repeat_n(*gi, c));
            }
            vec![(*x, gx)]
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| y[idx(k)] * g[idx(k)]).sum();
                    for k in 0..len {
                        gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::LogSoftmax(x) => {
            let c = out.cols();
            let mut gx = vec![0.0; out.len()];
            for ((gr, yr), gxr) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let s: f64 = gr.iter().sum();
                for ((o, gv), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = gv - yv.exp() * s;
                }
            }
            vec![(*x, gx)]
        }
        Op::Concat { inputs, axis } => {
            let mut res = Vec::with_capacity(inputs.len());
            if *axis == 0 {
                let mut off = 0;
                for &i in inputs {
                    let n = val(i).len();
                    res.push((i, g[off..off + n].to_vec()));
                    off += n;
                }
            } else {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut col = 0;
                for &i in inputs {
                    let c = val(i).shape()[1];
                    let mut gi = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gi.extend_from_slice(&g[r * total + col..r * total + col + c]);
                    }
                    res.push((i, gi));
                    col += c;
                }
            }
            res
        }
        Op::GatherRows { x, index } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            for (r, &src) in index.iter().enumerate() {
                let dst = &mut gx[src * c..(src + 1) * c];
                dst.iter_mut()
                    .zip(&g[r * c..(r + 1) * c])
                    .for_each(|(d, s)| *d += s);
            }
            vec![(*x, gx)]
        }
        Op::SegmentMean { x, groups } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            for (r, group) in groups.iter().enumerate() {
                if group.is_empty() {
                    continue;
                }
                let w = 1.0 / group.len() as f64;
                for &src in group {
                    let dst = &mut gx[src * c..(src + 1) * c];
                    dst.iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(d, s)| *d += w * s);
                }
            }
            vec![(*x, gx)]
        }
        Op::SegmentMax { x, source } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            for (k, &src) in source.iter().enumerate() {
                if src != usize::MAX {
                    gx[src * c + k % c] += g[k];
                }
            }
            vec![(*x, gx)]
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape().to_vec();
            let mut gx = vec![0.0; xs.iter().product()];
            let os = out.shape();
            if *axis == 0 {
                let c: usize = xs[1..].iter().product();
                gx[start * c..start * c + g.len()].copy_from_slice(g);
            } else {
                let (rows, cols, len) = (xs[0], xs[1], os[1]);
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
            }
            vec![(*x, gx)]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Conv1d { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let (m, cin) = (xv.shape()[0], xv.shape()[1]);
            let (cout, k) = (wv.shape()[0], wv.shape()[2]);
            let pad = (k - 1) / 2;
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let (xd, wd) = (xv.data(), wv.data());
            for i in 0..m {
                for o in 0..cout {
                    let go = g[i * cout + o];
                    if go == 0.0 {
                        continue;
                    }
                    for t in 0..k {
                        let Some(src) = (i + t).checked_sub(pad).filter(|&s| s < m) else {
                            continue;
                        };
                        for c in 0..cin {
                            let wi = (o * cin + c) * k + t;
                            gw[wi] += go * xd[src * cin + c];
                            gx[src * cin + c] += go * wd[wi];
                        }
                    }
                }
            }
            vec![(*x, gx), (*w, gw)]
        }
        Op::Cosine(u, v) => {
            let (ud, vd) = (val(*u).data(), val(*v).data());
            let nu = ud.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (du, dv) = (nu.max(COSINE_EPS), nv.max(COSINE_EPS));
            let c = out.item();
            let g0 = g[0];
            let grad = |a: &[f64], b: &[f64], na: f64| -> Vec<f64> {
                a.iter()
                    .zip(b)
                    .map(|(ai, bi)| {
                        let mut d = bi / (du * dv);
                        if na > COSINE_EPS {
                            d -= c * ai / (na * na);
                        }
                        g0 * d
                    })
                    .collect()
            };
            vec![(*u, grad(ud, vd, nu)), (*v, grad(vd, ud, nv))]
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = val(*logits);
            let c = lv.cols();
            let n = targets.len() as f64;
            let mut gx = vec![0.0; lv.len()];
            let mut buf = vec![0.0; c];
            for (r, &t) in targets.iter().enumerate() {
                log_softmax_row(lv.row(r), &mut buf);
                for j in 0..c {
                    let p = buf[j].exp();
                    gx[r * c + j] = g[0] * (p - if j == t { 1.0 } else { 0.0 }) / n;
                }
            }
            vec![(*logits, gx)]
        }
        Op::BceWithLogits { x, targets } => {
            let n = targets.len() as f64;
            let gx = val(*x)
                .data()
                .iter()
                .zip(targets)
                .map(|(v, t)| g[0] * (sigmoid(*v) - t) / n)
                .collect();
            vec![(*x, gx)]
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn elementwise(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            same_shape(op, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(mk(self.id, other.id), value)
    }

    fn unary(self, mk: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect())?
        };
        self.tape.push(mk(self.id), value)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let value = {
            let (x, b) = (self.tape.value(self.id), self.tape.value(bias.id));
            let (_, n) = require_2d("add_bias", &x)?;
            if b.shape() != [n] {
                return Err(Error::shape(
                    "add_bias",
                    format!("bias {:?} for matrix {:?}", b.shape(), x.shape()),
                ));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(r, bv)| *r += bv);
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.tape.push(Op::AddBias(self.id, bias.id), value)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(|x| Op::Scale(x, s), |v| v * s)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            let (m, k) = require_2d("matmul", &a)?;
            let (k2, n) = require_2d("matmul", &b)?;
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("inner dimensions {k} and {k2} differ"),
                ));
            }
            Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?
        };
        self.tape.push(Op::MatMul(self.id, other.id), value)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (m, n) = require_2d("transpose", &a)?;
            Tensor::new(vec![n, m], transpose_raw(a.data(), m, n))?
        };
        self.tape.push(Op::Transpose(self.id), value)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Op::Square, |v| v * v)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Result<Var<'t>> {
        let m = {
            let a = self.tape.value(self.id);
            a.sum() / a.len() as f64
        };
        self.tape.push(Op::Mean(self.id), Tensor::scalar(m))
    }

    /// Row sums of an `m × n` matrix, giving a length-`m` vector.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (m, n) = require_2d("sum_cols", &a)?;
            Tensor::new(vec![m], a.data().chunks(n).map(|r| r.iter().sum()).collect())?
        };
        self.tape.push(Op::SumCols(self.id), value)
    }

    /// L1 reduction `Σ|x|`.
    pub fn l1(self) -> Result<Var<'t>> {
        self.abs()?.sum()
    }

    /// Squared-L2 reduction `Σx²`.
    pub fn sq_l2(self) -> Result<Var<'t>> {
        self.square()?.sum()
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            if axis >= a.ndim() {
                return Err(Error::shape(
                    "softmax",
                    format!("axis {axis} out of range for {:?}", a.shape()),
                ));
            }
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let x = a.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..len {
                        let e = (x[idx(k)] - max).exp();
                        y[idx(k)] = e;
                        z += e;
                    }
                    for k in 0..len {
                        y[idx(k)] /= z;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), y)?
        };
        self.tape.push(Op::Softmax { x: self.id, axis }, value)
    }

    /// Log-softmax along the last axis of a matrix.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (_, c) = require_2d("log_softmax", &a)?;
            let mut y = vec![0.0; a.len()];
            for (row, out) in a.data().chunks(c).zip(y.chunks_mut(c)) {
                log_softmax_row(row, out);
            }
            Tensor::new(a.shape().to_vec(), y)?
        };
        self.tape.push(Op::LogSoftmax(self.id), value)
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let tape = first.tape;
        for p in parts {
            first.same_tape(p)?;
        }
        if axis > 1 {
            return Err(Error::shape("concat", format!("axis {axis} unsupported")));
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
            let dims: Vec<(usize, usize)> = vals
                .iter()
                .map(|v| require_2d("concat", v))
                .collect::<Result<_>>()?;
            if axis == 0 {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::shape("concat", format!("column counts differ: {dims:?}")));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                Tensor::new(vec![rows, c], data)?
            } else {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * cols);
                for row in 0..r {
                    for v in &vals {
                        data.extend_from_slice(v.row(row));
                    }
                }
                Tensor::new(vec![r, cols], data)?
            }
        };
        tape.push(
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            value,
        )
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (r, c) = require_2d("gather_rows", &a)?;
            if index.is_empty() {
                return Err(Error::shape("gather_rows", "empty index"));
            }
            if let Some(bad) = index.iter().find(|&&i| i >= r) {
                return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
            }
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                data.extend_from_slice(a.row(i));
            }
            Tensor::new(vec![index.len(), c], data)?
        };
        self.tape.push(
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
            value,
        )
    }

    /// Output row `g` is the mean of input rows `groups[g]`; empty groups give zeros.
    pub fn segment_mean(self, groups: &[Vec<usize>]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (r, c) = require_2d("segment_mean", &a)?;
            if groups.is_empty() {
                return Err(Error::shape("segment_mean", "no groups"));
            }
            let mut data = vec![0.0; groups.len() * c];
            for (out, group) in data.chunks_mut(c).zip(groups) {
                if group.is_empty() {
                    continue;
                }
                for &i in group {
                    if i >= r {
                        return Err(Error::shape("segment_mean", format!("row {i} of {r}")));
                    }
                    out.iter_mut().zip(a.row(i)).for_each(|(o, v)| *o += v);
                }
                let w = group.len() as f64;
                out.iter_mut().for_each(|o| *o /= w);
            }
            Tensor::new(vec![groups.len(), c], data)?
        };
        self.tape.push(
            Op::SegmentMean {
                x: self.id,
                groups: groups.to_vec(),
            },
            value,
        )
    }

    /// Output row `g` is the column-wise maximum of input rows `groups[g]`;
    /// empty groups give zeros. Ties go to the earliest row in the group.
    pub fn segment_max(self, groups: &[Vec<usize>]) -> Result<Var<'t>> {
        let (value, source) = {
            let a = self.tape.value(self.id);
            let (r, c) = require_2d("segment_max", &a)?;
            if groups.is_empty() {
                return Err(Error::shape("segment_max", "no groups"));
            }
            let mut data = vec![0.0; groups.len() * c];
            let mut source = vec![usize::MAX; groups.len() * c];
            for (g, group) in groups.iter().enumerate() {
                for &i in group {
                    if i >= r {
                        return Err(Error::shape("segment_max", format!("row {i} of {r}")));
                    }
                    for (k, v) in a.row(i).iter().enumerate() {
                        let slot = g * c + k;
                        if source[slot] == usize::MAX || *v > data[slot] {
                            data[slot] = *v;
                            source[slot] = i;
                        }
                    }
                }
            }
            (Tensor::new(vec![groups.len(), c], data)?, source)
        };
        self.tape.push(Op::SegmentMax { x: self.id, source }, value)
    }

    /// Slice `[start, start + len)` of a matrix along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let (r, c) = require_2d("narrow", &a)?;
            let extent = if axis == 0 { r } else { c };
            if axis > 1 || len == 0 || start + len > extent {
                return Err(Error::shape(
                    "narrow",
                    format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
                ));
            }
            if axis == 0 {
                Tensor::new(vec![len, c], a.data()[start * c..(start + len) * c].to_vec())?
            } else {
                let mut data = Vec::with_capacity(r * len);
                for row in 0..r {
                    data.extend_from_slice(&a.row(row)[start..start + len]);
                }
                Tensor::new(vec![r, len], data)?
            }
        };
        self.tape.push(
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            value,
        )
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let c = self.tape.value(self.id).cols();
        self.narrow(0, i, 1)?.reshape(vec![c])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).reshaped(shape)?;
        self.tape.push(Op::Reshape(self.id), value)
    }

    /// One-dimensional convolution along the row (sequence) axis.
    ///
    /// `self` is `M × C_in` (one row per position), `weight` is
    /// `C_out × C_in × k` with odd `k`; zero padding keeps the output at `M` rows.
    pub fn conv1d(self, weight: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let value = {
            let (x, w) = (self.tape.value(self.id), self.tape.value(weight.id));
            let (m, cin) = require_2d("conv1d", &x)?;
            let [cout, wcin, k] = w.shape() else {
                return Err(Error::shape("conv1d", format!("weight {:?}", w.shape())));
            };
            let (cout, k) = (*cout, *k);
            if *wcin != cin || k % 2 == 0 {
                return Err(Error::shape(
                    "conv1d",
                    format!("weight {:?} for input {:?}", w.shape(), x.shape()),
                ));
            }
            let pad = (k - 1) / 2;
            let (xd, wd) = (x.data(), w.data());
            let mut y = vec![0.0; m * cout];
            for i in 0..m {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for t in 0..k {
                        let Some(src) = (i + t).checked_sub(pad).filter(|&s| s < m) else {
                            continue;
                        };
                        for c in 0..cin {
                            acc += wd[(o * cin + c) * k + t] * xd[src * cin + c];
                        }
                    }
                    y[i * cout + o] = acc;
                }
            }
            Tensor::new(vec![m, cout], y)?
        };
        self.tape.push(
            Op::Conv1d {
                x: self.id,
                w: weight.id,
            },
            value,
        )
    }

    /// `u·v / (max(‖u‖, ε) · max(‖v‖, ε))`; zero vectors give 0.
    pub fn cosine_similarity(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let c = {
            let (u, v) = (self.tape.value(self.id), self.tape.value(other.id));
            same_shape("cosine_similarity", &u, &v)?;
            let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
            dot / (u.norm().max(COSINE_EPS) * v.norm().max(COSINE_EPS))
        };
        self.tape.push(Op::Cosine(self.id, other.id), Tensor::scalar(c))
    }

    /// Mean cross-entropy of `self` (rows of logits) against integer targets.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let loss = {
            let a = self.tape.value(self.id);
            let (r, c) = require_2d("cross_entropy", &a)?;
            if targets.len() != r {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{} targets for {r} rows", targets.len()),
                ));
            }
            if let Some(bad) = targets.iter().find(|&&t| t >= c) {
                return Err(Error::shape("cross_entropy", format!("target {bad} of {c} classes")));
            }
            let mut buf = vec![0.0; c];
            let mut total = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                log_softmax_row(a.row(i), &mut buf);
                total -= buf[t];
            }
            total / r as f64
        };
        self.tape.push(
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
        )
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(self, targets: &[f64]) -> Result<Var<'t>> {
        let loss = {
            let a = self.tape.value(self.id);
            if targets.len() != a.len() {
                return Err(Error::shape(
                    "bce_with_logits",
                    format!("{} targets for {} logits", targets.len(), a.len()),
                ));
            }
            a.data()
                .iter()
                .zip(targets)
                .map(|(x, t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
                .sum::<f64>()
                / a.len() as f64
        };
        self.tape.push(
            Op::BceWithLogits {
                x: self.id,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
        )
    }

    /// `KL(softmax(teacher/T) ‖ softmax(self/T)) · T²`, averaged over rows.
    ///
    /// `teacher_logits` is a constant; only `self` receives a gradient.
    pub fn kl_divergence(self, teacher_logits: &Tensor, temperature: f64) -> Result<Var<'t>> {
        let (rows, cols) = require_2d("kl_divergence", &self.tape.value(self.id))?;
        if teacher_logits.shape() != [rows, cols] {
            return Err(Error::shape(
                "kl_divergence",
                format!("teacher {:?} vs student {:?}", teacher_logits.shape(), [rows, cols]),
            ));
        }
        let mut log_p = vec![0.0; teacher_logits.len()];
        for (row, out) in teacher_logits.data().chunks(cols).zip(log_p.chunks_mut(cols)) {
            let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
            log_softmax_row(&scaled, out);
        }
        let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
        // Σ p·log p is a constant; only the cross term carries gradient.
        let entropy_term: f64 = p.iter().zip(&log_p).map(|(a, b)| a * b).sum();
        let tape = self.tape;
        let log_q = self.scale(1.0 / temperature)?.log_softmax()?;
        let p = tape.constant(Tensor::new(vec![rows, cols], p)?);
        let cross = p.mul(log_q)?.sum()?;
        let entropy = tape.constant(Tensor::scalar(entropy_term));
        entropy
            .sub(cross)?
            .scale(temperature * temperature / rows as f64)
    }
}
