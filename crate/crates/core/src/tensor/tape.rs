use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::{check_distribution, softmax_into, Tensor};
use crate::error::{dim_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Record of executed operations. Node ids are assigned in execution order, so
/// the node vector is already topologically sorted.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
    consumed: Cell<bool>,
    frozen: Frozen,
}

/// What [`Var::detach`] does besides cutting the gradient.
#[derive(Default)]
enum Frozen {
    #[default]
    Off,
    /// Keeps a copy of every detached value, in call order.
    Log(RefCell<Vec<Tensor>>),
    /// Hands back logged values in call order instead of the current ones.
    Replay(Vec<Tensor>, Cell<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowBias(usize, usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        kernel: usize,
        stride: usize,
    },
    ChannelBias(usize, usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        tau: f64,
    },
    Log(usize),
    KlDiv(usize, usize),
    CrossEntropyLogits {
        logits: usize,
        label: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        p: usize,
        target: Vec<f64>,
        eps: f64,
    },
    Entropy {
        p: usize,
        eps: f64,
    },
    Concat(Vec<usize>),
    Mean(usize),
    Sum(usize),
    SelectRow(usize, usize),
    SpatialTokens(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddRowBias(a, b) | Op::ChannelBias(a, b) | Op::KlDiv(a, b) => vec![*a, *b],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Concat(ids) => ids.clone(),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::SelectRow(a, _)
            | Op::SpatialTokens(a)
            | Op::Softmax { x: a, .. }
            | Op::CrossEntropyLogits { logits: a, .. }
            | Op::CrossEntropy { p: a, .. }
            | Op::Entropy { p: a, .. } => vec![*a],
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires grad and
    /// the loss depends on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: true,
            consumed: Cell::new(false),
            frozen: Frozen::Off,
        }
    }

    /// A recording tape that also logs every detached value, for use with
    /// [`Tape::replay`].
    pub fn logging() -> Self {
        Tape {
            frozen: Frozen::Log(RefCell::new(Vec::new())),
            ..Tape::new()
        }
    }

    /// Values detached so far on a [`Tape::logging`] tape.
    pub fn detached_log(&self) -> Vec<Tensor> {
        match &self.frozen {
            Frozen::Log(log) => log.borrow().clone(),
            _ => Vec::new(),
        }
    }

    /// An inference tape on which the i-th detach returns `log[i]` rather
    /// than the current value. Differentiating the surrogate evaluated on
    /// such tapes matches the gradient of a stop-gradient objective.
    pub fn replay(log: Vec<Tensor>) -> Self {
        Tape {
            frozen: Frozen::Replay(log, Cell::new(0)),
            ..Tape::inference()
        }
    }

    fn detached_value(&self, current: Tensor) -> Result<Tensor> {
        match &self.frozen {
            Frozen::Off => Ok(current),
            Frozen::Log(log) => {
                log.borrow_mut().push(current.clone());
                Ok(current)
            }
            Frozen::Replay(log, next) => {
                let i = next.get();
                next.set(i + 1);
                match log.get(i) {
                    Some(t) if t.shape == current.shape => Ok(t.clone()),
                    _ => Err(Error::Contract(format!("replayed detach #{i} does not match the logged run"))),
                }
            }
        }
    }

    /// A tape that evaluates values only; nothing requires grad.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let requires_grad = self.record;
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn same_tape(&self, other: Var<'_>) {
        assert!(
            std::ptr::eq(self, other.tape),
            "variables from different tapes cannot be combined"
        );
    }

    /// Concatenates 2-D tensors along the row (token) axis.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let (value, ids) = {
            let nodes = self.nodes.borrow();
            let cols = {
                let s = &nodes[parts[0].id].value.shape;
                if s.len() != 2 {
                    return Err(dim_err!("concat expects 2-D tensors, got {s:?}"));
                }
                s[1]
            };
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                self.same_tape(*p);
                let v = &nodes[p.id].value;
                if v.shape.len() != 2 || v.shape[1] != cols {
                    return Err(dim_err!(
                        "concat column mismatch: {:?} vs [_, {cols}]",
                        v.shape
                    ));
                }
                rows += v.shape[0];
                data.extend_from_slice(&v.data);
            }
            (
                Tensor::new(vec![rows, cols], data)?,
                parts.iter().map(|p| p.id).collect(),
            )
        };
        Ok(self.push(value, Op::Concat(ids)))
    }

    /// Multi-head scaled dot-product self-attention over `[L × d]` projections.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
    ) -> Result<Var<'t>> {
        let (value, probs) = {
            let (qv, kv, vv) = (q.value(), k.value(), v.value());
            if qv.shape.len() != 2 || qv.shape != kv.shape || qv.shape != vv.shape {
                return Err(dim_err!(
                    "attention needs equal 2-D q/k/v, got {:?} {:?} {:?}",
                    qv.shape,
                    kv.shape,
                    vv.shape
                ));
            }
            let (len, dim) = (qv.shape[0], qv.shape[1]);
            if heads == 0 || dim % heads != 0 {
                return Err(dim_err!("model width {dim} not divisible into {heads} heads"));
            }
            let hd = dim / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut probs = vec![0.0; heads * len * len];
            let mut out = vec![0.0; len * dim];
            let mut scores = vec![0.0; len];
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let qi = &qv.data[i * dim + off..i * dim + off + hd];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.data[j * dim + off..j * dim + off + hd];
                        *s = dot(qi, kj) * scale;
                    }
                    let prow = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                    softmax_into(&scores, 1.0, prow);
                    let orow = &mut out[i * dim + off..i * dim + off + hd];
                    for (j, &pij) in prow.iter().enumerate() {
                        let vj = &vv.data[j * dim + off..j * dim + off + hd];
                        axpy(pij, vj, orow);
                    }
                }
            }
            (Tensor::new(vec![len, dim], out)?, probs)
        };
        Ok(self.push(
            value,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                probs,
            },
        ))
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.same_tape(loss);
        if !self.record {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|data| Tensor {
                    shape: n.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

// Four independent partial sums let the compiler vectorise; the summation
// order is fixed, so results stay deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Accumulates into the gradient buffer of `id` if it requires grad.
fn acc<F: FnOnce(&mut [f64])>(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: F) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(buf);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| axpy(1.0, g, d));
            acc(nodes, grads, *b, |d| axpy(1.0, g, d));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| axpy(1.0, g, d));
            acc(nodes, grads, *b, |d| axpy(-1.0, g, d));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            acc(nodes, grads, *a, |d| {
                for ((di, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                    *di += gi * bi;
                }
            });
            acc(nodes, grads, *b, |d| {
                for ((di, gi), ai) in d.iter_mut().zip(g).zip(av) {
                    *di += gi * ai;
                }
            });
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, |d| axpy(*c, g, d)),
        Op::AddRowBias(a, b) => {
            let n = val(*b).len();
            acc(nodes, grads, *a, |d| axpy(1.0, g, d));
            acc(nodes, grads, *b, |d| {
                for row in g.chunks(n) {
                    axpy(1.0, row, d);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            acc(nodes, grads, *a, |d| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        d[i * k + p] += dot(grow, &bv.data[p * n..(p + 1) * n]);
                    }
                }
            });
            acc(nodes, grads, *b, |d| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        axpy(av.data[i * k + p], grow, &mut d[p * n..(p + 1) * n]);
                    }
                }
            });
        }
        Op::Conv2d { x, kernel, stride } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let geo = ConvGeometry::new(&xv.shape, &kv.shape, *stride).expect("validated");
            acc(nodes, grads, *x, |d| geo.backward_input(g, &kv.data, d));
            acc(nodes, grads, *kernel, |d| geo.backward_kernel(g, &xv.data, d));
        }
        Op::ChannelBias(x, b) => {
            let c = val(*b).len();
            let plane = g.len() / c;
            acc(nodes, grads, *x, |d| axpy(1.0, g, d));
            acc(nodes, grads, *b, |d| {
                for (ch, di) in d.iter_mut().enumerate() {
                    *di += g[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                }
            });
        }
        Op::Relu(a) => {
            let av = &val(*a).data;
            acc(nodes, grads, *a, |d| {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(av) {
                    if *xi > 0.0 {
                        *di += gi;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = &val(*gain).data;
            let n = gv.len();
            acc(nodes, grads, *gain, |d| {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        d[j] += grow[j] * hrow[j];
                    }
                }
            });
            acc(nodes, grads, *bias, |d| {
                for grow in g.chunks(n) {
                    axpy(1.0, grow, d);
                }
            });
            acc(nodes, grads, *x, |d| {
                let nf = n as f64;
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h = dot(&dh, hrow);
                    let drow = &mut d[r * n..(r + 1) * n];
                    for j in 0..n {
                        drow[j] += inv_std[r] / nf * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
            });
        }
        Op::Softmax { x, tau } => {
            let y = &node.value;
            let n = *y.shape.last().unwrap();
            acc(nodes, grads, *x, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data.chunks(n))
                {
                    let s = dot(grow, yrow);
                    for j in 0..n {
                        drow[j] += yrow[j] * (grow[j] - s) / tau;
                    }
                }
            });
        }
        Op::Log(a) => {
            let av = &val(*a).data;
            acc(nodes, grads, *a, |d| {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(av) {
                    if *xi >= f64::MIN_POSITIVE {
                        *di += gi / xi;
                    }
                }
            });
        }
        Op::KlDiv(p, q) => {
            let (pv, qv) = (&val(*p).data, &val(*q).data);
            let g0 = g[0];
            acc(nodes, grads, *p, |d| {
                for ((di, pi), qi) in d.iter_mut().zip(pv).zip(qv) {
                    if *pi > 0.0 {
                        *di += g0 * ((pi / qi.max(super::EPS)).ln() + 1.0);
                    }
                }
            });
            acc(nodes, grads, *q, |d| {
                for ((di, pi), qi) in d.iter_mut().zip(pv).zip(qv) {
                    if *qi > super::EPS {
                        *di -= g0 * pi / qi;
                    }
                }
            });
        }
        Op::CrossEntropyLogits {
            logits,
            label,
            probs,
        } => {
            let g0 = g[0];
            acc(nodes, grads, *logits, |d| {
                for (j, (di, pj)) in d.iter_mut().zip(probs).enumerate() {
                    let t = if j == *label { 1.0 } else { 0.0 };
                    *di += g0 * (pj - t);
                }
            });
        }
        Op::CrossEntropy { p, target, eps } => {
            let pv = &val(*p).data;
            let g0 = g[0];
            acc(nodes, grads, *p, |d| {
                for ((di, pi), qi) in d.iter_mut().zip(pv).zip(target) {
                    if *qi != 0.0 {
                        *di -= g0 * qi / (pi + eps);
                    }
                }
            });
        }
        Op::Entropy { p, eps } => {
            let pv = &val(*p).data;
            let g0 = g[0];
            acc(nodes, grads, *p, |d| {
                for (di, pi) in d.iter_mut().zip(pv) {
                    if *pi > 0.0 || *eps > 0.0 {
                        *di -= g0 * ((pi + eps).ln() + pi / (pi + eps));
                    }
                }
            });
        }
        Op::Concat(ids) => {
            let mut off = 0;
            for &i in ids {
                let len = val(i).len();
                acc(nodes, grads, i, |d| axpy(1.0, &g[off..off + len], d));
                off += len;
            }
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            acc(nodes, grads, *a, |d| d.iter_mut().for_each(|di| *di += g[0] / n));
        }
        Op::Sum(a) => acc(nodes, grads, *a, |d| d.iter_mut().for_each(|di| *di += g[0])),
        Op::SelectRow(a, r) => {
            let n = g.len();
            acc(nodes, grads, *a, |d| axpy(1.0, g, &mut d[r * n..(r + 1) * n]));
        }
        Op::SpatialTokens(a) => {
            let shape = &val(*a).shape;
            let (c, s) = (shape[0], shape[1] * shape[2]);
            acc(nodes, grads, *a, |d| {
                for ch in 0..c {
                    for pos in 0..s {
                        d[ch * s + pos] += g[pos * c + ch];
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (len, dim) = (qv.shape[0], qv.shape[1]);
            let hd = dim / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut dq = vec![0.0; len * dim];
            let mut dk = vec![0.0; len * dim];
            let mut dv = vec![0.0; len * dim];
            let mut dp = vec![0.0; len];
            for h in 0..*heads {
                let off = h * hd;
                for i in 0..len {
                    let prow = &probs[(h * len + i) * len..(h * len + i + 1) * len];
                    let grow = &g[i * dim + off..i * dim + off + hd];
                    for j in 0..len {
                        let vj = &vv.data[j * dim + off..j * dim + off + hd];
                        dp[j] = dot(grow, vj);
                        axpy(prow[j], grow, &mut dv[j * dim + off..j * dim + off + hd]);
                    }
                    let s = dot(&dp, prow);
                    let qi = &qv.data[i * dim + off..i * dim + off + hd];
                    for j in 0..len {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.data[j * dim + off..j * dim + off + hd];
                        axpy(ds, kj, &mut dq[i * dim + off..i * dim + off + hd]);
                        axpy(ds, qi, &mut dk[j * dim + off..j * dim + off + hd]);
                    }
                }
            }
            acc(nodes, grads, *q, |d| axpy(1.0, &dq, d));
            acc(nodes, grads, *k, |d| axpy(1.0, &dk, d));
            acc(nodes, grads, *v, |d| axpy(1.0, &dv, d));
        }
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self> {
        if x.len() != 3 || k.len() != 4 {
            return Err(dim_err!("conv2d expects C×H×W input and Co×C×kh×kw kernel, got {x:?} and {k:?}"));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let (c, h, w) = (x[0], x[1], x[2]);
        let (co, kc, kh, kw) = (k[0], k[1], k[2], k[3]);
        if kc != c {
            return Err(dim_err!("conv2d channel mismatch: input {x:?}, kernel {k:?}"));
        }
        if kh > h || kw > w {
            return Err(dim_err!("conv2d kernel {k:?} larger than input {x:?}"));
        }
        Ok(ConvGeometry {
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.co * self.oh * self.ow];
        for o in 0..self.co {
            for y in 0..self.oh {
                for xo in 0..self.ow {
                    let mut acc = 0.0;
                    for ch in 0..self.c {
                        for i in 0..self.kh {
                            let xrow = (ch * self.h + y * self.stride + i) * self.w + xo * self.stride;
                            let krow = ((o * self.c + ch) * self.kh + i) * self.kw;
                            acc += dot(&x[xrow..xrow + self.kw], &k[krow..krow + self.kw]);
                        }
                    }
                    out[(o * self.oh + y) * self.ow + xo] = acc;
                }
            }
        }
        out
    }

    fn backward_input(&self, g: &[f64], k: &[f64], dx: &mut [f64]) {
        for o in 0..self.co {
            for y in 0..self.oh {
                for xo in 0..self.ow {
                    let go = g[(o * self.oh + y) * self.ow + xo];
                    for ch in 0..self.c {
                        for i in 0..self.kh {
                            let xrow = (ch * self.h + y * self.stride + i) * self.w + xo * self.stride;
                            let krow = ((o * self.c + ch) * self.kh + i) * self.kw;
                            axpy(go, &k[krow..krow + self.kw], &mut dx[xrow..xrow + self.kw]);
                        }
                    }
                }
            }
        }
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64], dk: &mut [f64]) {
        for o in 0..self.co {
            for y in 0..self.oh {
                for xo in 0..self.ow {
                    let go = g[(o * self.oh + y) * self.ow + xo];
                    for ch in 0..self.c {
                        for i in 0..self.kh {
                            let xrow = (ch * self.h + y * self.stride + i) * self.w + xo * self.stride;
                            let krow = ((o * self.c + ch) * self.kh + i) * self.kw;
                            axpy(go, &x[xrow..xrow + self.kw], &mut dk[krow..krow + self.kw]);
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of this value cut off from gradient flow.
    ///
    /// Fails only on a [`Tape::replay`] tape whose log does not line up.
    pub fn detach(&self) -> Result<Var<'t>> {
        Ok(self.tape.constant(self.tape.detached_value(self.tensor())?))
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>) -> Result<Var<'t>> {
        let (value, op) = f(&self.value())?;
        Ok(self.tape.push(value, op))
    }

    fn binary(
        &self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<(Tensor, Op)>,
    ) -> Result<Var<'t>> {
        self.tape.same_tape(other);
        let (value, op) = f(&self.value(), &other.value())?;
        Ok(self.tape.push(value, op))
    }

    fn zip_same(
        &self,
        other: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.binary(other, |a, b| {
            if a.shape != b.shape {
                return Err(dim_err!("{name}: shapes {:?} and {:?} differ", a.shape, b.shape));
            }
            let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
            Ok((Tensor::new(a.shape.clone(), data)?, op))
        })
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().map(|x| x * c).collect(),
            }
        };
        self.tape.push(value, Op::Scale(self.id, c))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| {
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(dim_err!("matmul: shapes {:?} and {:?} are incompatible", a.shape, b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a.data[i * k + p];
                    if aip != 0.0 {
                        axpy(aip, &b.data[p * n..(p + 1) * n], orow);
                    }
                }
            }
            Ok((Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, other.id)))
        })
    }

    /// Adds a bias vector to every row (last axis).
    pub fn add_row_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, |x, b| {
            let n = *x.shape.last().unwrap();
            if b.shape != [n] {
                return Err(dim_err!("row bias {:?} does not match rows of {:?}", b.shape, x.shape));
            }
            let mut data = x.data.clone();
            for row in data.chunks_mut(n) {
                axpy(1.0, &b.data, row);
            }
            Ok((Tensor::new(x.shape.clone(), data)?, Op::AddRowBias(self.id, bias.id)))
        })
    }

    /// Affine map `x·W + b` for `x: [r × i]`, `W: [i × o]`, `b: [o]`.
    pub fn linear(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_row_bias(bias)
    }

    /// Valid-padding 2-D convolution of a `C×H×W` input.
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.binary(kernel, |x, k| {
            let geo = ConvGeometry::new(&x.shape, &k.shape, stride)?;
            let out = geo.forward(&x.data, &k.data);
            Ok((
                Tensor::new(vec![geo.co, geo.oh, geo.ow], out)?,
                Op::Conv2d {
                    x: self.id,
                    kernel: kernel.id,
                    stride,
                },
            ))
        })
    }

    /// Adds a per-channel bias to a `C×H×W` tensor.
    pub fn add_channel_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, |x, b| {
            if x.shape.len() != 3 || b.shape != [x.shape[0]] {
                return Err(dim_err!("channel bias {:?} does not match {:?}", b.shape, x.shape));
            }
            let plane = x.shape[1] * x.shape[2];
            let mut data = x.data.clone();
            for (ch, chunk) in data.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b.data[ch]);
            }
            Ok((Tensor::new(x.shape.clone(), data)?, Op::ChannelBias(self.id, bias.id)))
        })
    }

    pub fn relu(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().map(|x| x.max(0.0)).collect(),
            }
        };
        self.tape.push(value, Op::Relu(self.id))
    }

    /// Normalizes each row over the last axis, then applies gain and bias.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.tape.same_tape(gain);
        self.tape.same_tape(bias);
        let (value, xhat, inv_std) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let n = *x.shape.last().unwrap();
            if gv.shape != [n] || bv.shape != [n] {
                return Err(dim_err!(
                    "layer_norm params {:?}/{:?} do not match {:?}",
                    gv.shape,
                    bv.shape,
                    x.shape
                ));
            }
            let mut xhat = Vec::with_capacity(x.len());
            let mut inv_std = Vec::with_capacity(x.len() / n);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data.chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(is);
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat.push(h);
                    out.push(h * gv.data[j] + bv.data[j]);
                }
            }
            (Tensor::new(x.shape.clone(), out)?, xhat, inv_std)
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax of `x / tau` over the last axis of every row.
    pub fn softmax(&self, tau: f64) -> Result<Var<'t>> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        self.unary(|x| {
            if x.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("softmax of non-finite logits".into()));
            }
            let n = *x.shape.last().unwrap();
            let mut out = vec![0.0; x.len()];
            for (orow, xrow) in out.chunks_mut(n).zip(x.data.chunks(n)) {
                softmax_into(xrow, tau, orow);
            }
            Ok((Tensor::new(x.shape.clone(), out)?, Op::Softmax { x: self.id, tau }))
        })
    }

    /// Natural log, with inputs floored at the smallest positive normal f64.
    pub fn log(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().map(|x| x.max(f64::MIN_POSITIVE).ln()).collect(),
            }
        };
        self.tape.push(value, Op::Log(self.id))
    }

    /// KL(self ‖ q) between two distributions; `q` is clamped below at [`super::EPS`].
    pub fn kl_div(&self, q: Var<'t>) -> Result<Var<'t>> {
        self.binary(q, |p, qv| {
            if p.shape != qv.shape {
                return Err(dim_err!("kl_div: shapes {:?} and {:?} differ", p.shape, qv.shape));
            }
            check_distribution(&p.data, "kl_div p")?;
            check_distribution(&qv.data, "kl_div q")?;
            let value = super::kl_value(&p.data, &qv.data);
            Ok((Tensor::scalar(value), Op::KlDiv(self.id, q.id)))
        })
    }

    /// Softmax cross-entropy of 1-D logits against an integer label.
    pub fn cross_entropy_logits(&self, label: usize) -> Result<Var<'t>> {
        self.unary(|z| {
            if z.shape.len() != 1 {
                return Err(dim_err!("cross_entropy_logits expects 1-D logits, got {:?}", z.shape));
            }
            if label >= z.len() {
                return Err(Error::Index(format!("label {label} out of range for {} classes", z.len())));
            }
            let probs = super::softmax_values(&z.data, 1.0);
            let max = z.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Ok((
                Tensor::scalar(lse - z.data[label]),
                Op::CrossEntropyLogits {
                    logits: self.id,
                    label,
                    probs,
                },
            ))
        })
    }

    /// −Σ target_i ln(p_i + eps) for a distribution `self`.
    pub fn cross_entropy(&self, target: &Tensor, eps: f64) -> Result<Var<'t>> {
        self.unary(|p| {
            if p.shape != target.shape {
                return Err(dim_err!("cross_entropy: shapes {:?} and {:?} differ", p.shape, target.shape));
            }
            check_distribution(&p.data, "cross_entropy p")?;
            Ok((
                Tensor::scalar(super::cross_entropy_value(&p.data, &target.data, eps)),
                Op::CrossEntropy {
                    p: self.id,
                    target: target.data.clone(),
                    eps,
                },
            ))
        })
    }

    /// −Σ p_i ln(p_i + eps); `eps = 0` gives the exact Shannon entropy.
    pub fn entropy(&self, eps: f64) -> Result<Var<'t>> {
        self.unary(|p| {
            check_distribution(&p.data, "entropy p")?;
            Ok((
                Tensor::scalar(super::entropy_value(&p.data, eps)),
                Op::Entropy { p: self.id, eps },
            ))
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::scalar(v.data.iter().sum::<f64>() / v.len() as f64)
        };
        self.tape.push(value, Op::Mean(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data.iter().sum());
        self.tape.push(value, Op::Sum(self.id))
    }

    /// Row `r` of a 2-D tensor as a 1-D tensor.
    pub fn select_row(&self, r: usize) -> Result<Var<'t>> {
        self.unary(|x| {
            if x.shape.len() != 2 || r >= x.shape[0] {
                return Err(Error::Index(format!("row {r} of tensor {:?}", x.shape)));
            }
            Ok((Tensor::vector(x.row(r)), Op::SelectRow(self.id, r)))
        })
    }

    /// Flattens a `C×h×w` feature map into `h·w` tokens of width `C`.
    pub fn spatial_tokens(&self) -> Result<Var<'t>> {
        self.unary(|f| {
            if f.shape.len() != 3 {
                return Err(dim_err!("spatial_tokens expects C×h×w, got {:?}", f.shape));
            }
            let (c, s) = (f.shape[0], f.shape[1] * f.shape[2]);
            let mut out = vec![0.0; c * s];
            for ch in 0..c {
                for pos in 0..s {
                    out[pos * c + ch] = f.data[ch * s + pos];
                }
            }
            Ok((Tensor::new(vec![s, c], out)?, Op::SpatialTokens(self.id)))
        })
    }
}
