//! Tape-based reverse-mode differentiation over dense vectors and matrices.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward sweep is a reverse scan.

use crate::error::{Result, RkmError};
use crate::grad::kernels::{axpy, dot};
use crate::grad::tensor::{ParamGrads, ParamId, ParamStore};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value(usize);

enum Storage {
    Owned(Vec<f64>),
    Param(usize),
}

enum Op {
    Leaf,
    Affine {
        w: Value,
        x: Value,
        b: Option<Value>,
    },
    Add(Value, Value),
    Sub(Value, Value),
    Hadamard(Value, Value),
    Scale(Value, f64),
    ScaleBy(Value, Value),
    OneMinus(Value),
    Sigmoid(Value),
    Tanh(Value),
    Concat(Vec<Value>),
    Gather {
        table: Value,
        row: usize,
    },
    LayerNorm {
        x: Value,
        gain: Value,
        bias: Value,
        xhat: Vec<f64>,
        inv_std: f64,
    },
    SoftmaxXent {
        logits: Value,
        label: usize,
        probs: Vec<f64>,
    },
    MeanPool(Vec<Value>),
    Wavelet {
        alpha: Value,
        omega: Value,
        phi: Value,
        beta: Value,
        grid: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    storage: Storage,
    op: Op,
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Value>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters; every leaf is an explicit constant.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    /// A graph whose parameter leaves borrow from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Value) -> usize {
        self.nodes[v.0].shape.iter().product()
    }

    pub fn data(&self, v: Value) -> &[f64] {
        match &self.nodes[v.0].storage {
            Storage::Owned(d) => d,
            Storage::Param(i) => {
                let store = self.store.expect("parameter leaf without a store");
                store.param(ParamId(*i)).value.data()
            }
        }
    }

    /// Scalar payload of a one-element node.
    pub fn scalar(&self, v: Value) -> f64 {
        self.data(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            storage: Storage::Owned(data),
            op,
        });
        Value(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Value> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || numel == 0 {
            return Err(RkmError::shape(
                "constant",
                format!("shape {shape:?} with {} values", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Value {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf)
    }

    pub fn zeros(&mut self, n: usize) -> Value {
        self.push(vec![n], vec![0.0; n], Op::Leaf)
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node so
    /// that every use accumulates into one gradient buffer.
    pub fn param(&mut self, id: ParamId) -> Value {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.store.expect("param() on a graph without a store");
        let shape = store.param(id).value.shape().to_vec();
        self.nodes.push(Node {
            shape,
            storage: Storage::Param(id.0),
            op: Op::Leaf,
        });
        let v = Value(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(RkmError::shape(
                op,
                format!("lhs {:?} vs rhs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Value, f: impl Fn(f64) -> f64, op: Op) -> Value {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op)
    }

    /// `W x (+ b)` for a `[p x q]` matrix and a length-`q` vector.
    pub fn affine(&mut self, w: Value, x: Value, b: Option<Value>) -> Result<Value> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(RkmError::shape("affine", format!("W must be a matrix, got {ws:?}")));
        }
        let (p, q) = (ws[0], ws[1]);
        if self.numel(x) != q {
            return Err(RkmError::shape(
                "affine",
                format!("W is {p}x{q} but x has {} entries", self.numel(x)),
            ));
        }
        if let Some(b) = b {
            if self.numel(b) != p {
                return Err(RkmError::shape(
                    "affine",
                    format!("W is {p}x{q} but b has {} entries", self.numel(b)),
                ));
            }
        }
        let wd = self.data(w);
        let xd = self.data(x);
        let mut out: Vec<f64> = wd.chunks_exact(q).map(|row| dot(row, xd)).collect();
        if let Some(b) = b {
            for (o, bi) in out.iter_mut().zip(self.data(b)) {
                *o += bi;
            }
        }
        Ok(self.push(vec![p], out, Op::Affine { w, x, b }))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("hadamard", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Value, s: f64) -> Value {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    /// Multiply every entry of `a` by the single entry of `s`.
    pub fn scale_by(&mut self, a: Value, s: Value) -> Result<Value> {
        if self.numel(s) != 1 {
            return Err(RkmError::shape("scale_by", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let k = self.scalar(s);
        Ok(self.map(a, |x| k * x, Op::ScaleBy(a, s)))
    }

    pub fn one_minus(&mut self, a: Value) -> Value {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Stack vectors end to end.
    pub fn concat(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(RkmError::EmptySequence("concat"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let total: usize = parts.iter().map(|&p| self.numel(p)).sum();
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(vec![total], data, Op::Concat(parts.to_vec())))
    }

    /// Row `row` of a `[rows x cols]` table, e.g. an embedding lookup.
    pub fn gather(&mut self, table: Value, row: usize) -> Result<Value> {
        let s = self.shape(table);
        if s.len() != 2 || row >= s[0] {
            return Err(RkmError::shape("gather", format!("row {row} of table {s:?}")));
        }
        let cols = s[1];
        let data = self.data(table)[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(vec![cols], data, Op::Gather { table, row }))
    }

    /// `(v - mean) / sqrt(var + eps) * gain + bias` with population variance.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Result<Value> {
        self.same_shape("layer_norm", x, gain)?;
        self.same_shape("layer_norm", x, bias)?;
        let xd = self.data(x);
        let d = xd.len() as f64;
        let mean = xd.iter().sum::<f64>() / d;
        let var = xd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = xd.iter().map(|v| (v - mean) * inv_std).collect();
        let out = xhat
            .iter()
            .zip(self.data(gain))
            .zip(self.data(bias))
            .map(|((h, g), b)| h * g + b)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Cross-entropy of a max-shifted softmax. Returns the scalar loss node and
    /// the probability vector.
    pub fn softmax_xent(&mut self, logits: Value, label: usize) -> Result<(Value, Vec<f64>)> {
        let classes = self.numel(logits);
        if label >= classes {
            return Err(RkmError::LabelOutOfRange { label, classes });
        }
        let (probs, log_z) = softmax_with_logsumexp(self.data(logits));
        let loss = log_z - self.data(logits)[label];
        let v = self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                label,
                probs: probs.clone(),
            },
        );
        Ok((v, probs))
    }

    /// Arithmetic mean of equally shaped nodes.
    pub fn mean_pool(&mut self, items: &[Value]) -> Result<Value> {
        let first = *items.first().ok_or(RkmError::EmptySequence("mean_pool"))?;
        for &it in &items[1..] {
            self.same_shape("mean_pool", first, it)?;
        }
        let mut acc = vec![0.0; self.numel(first)];
        for &it in items {
            for (a, x) in acc.iter_mut().zip(self.data(it)) {
                *a += x;
            }
        }
        let inv = 1.0 / items.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        let shape = self.shape(first).to_vec();
        Ok(self.push(shape, acc, Op::MeanPool(items.to_vec())))
    }

    /// Morlet filter bank `[K x (n*C)]`. Entry `(k, lag*C + c)` holds
    /// `alpha[k,c] * cos(omega[k] t + phi[k,c]) * exp(-beta[k] t^2)` evaluated at
    /// `t = grid[n - 1 - lag]`, so that lag 0 (the newest input) meets the last
    /// grid point.
    pub fn wavelet_bank(
        &mut self,
        alpha: Value,
        omega: Value,
        phi: Value,
        beta: Value,
        grid: &[f64],
    ) -> Result<Value> {
        let (k, c) = match self.shape(alpha) {
            [k, c] => (*k, *c),
            s => return Err(RkmError::shape("wavelet_bank", format!("alpha must be KxC, got {s:?}"))),
        };
        self.same_shape("wavelet_bank", alpha, phi)?;
        if self.numel(omega) != k || self.numel(beta) != k {
            return Err(RkmError::shape("wavelet_bank", "omega and beta need K entries"));
        }
        let n = grid.len();
        let (a, w, p, b) = (self.data(alpha), self.data(omega), self.data(phi), self.data(beta));
        let mut out = vec![0.0; k * n * c];
        for i in 0..k {
            for lag in 0..n {
                let t = grid[n - 1 - lag];
                let env = (-b[i] * t * t).exp();
                for ch in 0..c {
                    out[i * n * c + lag * c + ch] = a[i * c + ch] * (w[i] * t + p[i * c + ch]).cos() * env;
                }
            }
        }
        Ok(self.push(
            vec![k, n * c],
            out,
            Op::Wavelet {
                alpha,
                omega,
                phi,
                beta,
                grid: grid.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Value) -> Result<Gradients> {
        if self.numel(loss) != 1 {
            return Err(RkmError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = || match &node.storage {
            Storage::Owned(d) => d.as_slice(),
            Storage::Param(_) => unreachable!("parameter nodes are leaves"),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { w, x, b } => {
                let q = self.shape(*w)[1];
                let wd = self.data(*w);
                let xd = self.data(*x);
                {
                    let gw = slot(grads, *w, wd.len());
                    for (row, gi) in gw.chunks_exact_mut(q).zip(g) {
                        axpy(*gi, xd, row);
                    }
                }
                {
                    let gx = slot(grads, *x, q);
                    for (row, gi) in wd.chunks_exact(q).zip(g) {
                        axpy(*gi, row, gx);
                    }
                }
                if let Some(b) = b {
                    let gb = slot(grads, *b, g.len());
                    axpy(1.0, g, gb);
                }
            }
            Op::Add(a, b) => {
                axpy(1.0, g, slot(grads, *a, g.len()));
                axpy(1.0, g, slot(grads, *b, g.len()));
            }
            Op::Sub(a, b) => {
                axpy(1.0, g, slot(grads, *a, g.len()));
                axpy(-1.0, g, slot(grads, *b, g.len()));
            }
            Op::Hadamard(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = slot(grads, *a, g.len());
                for ((s, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                    *s += gi * bi;
                }
                let gb = slot(grads, *b, g.len());
                for ((s, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                    *s += gi * ai;
                }
            }
            Op::Scale(a, k) => axpy(*k, g, slot(grads, *a, g.len())),
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                let ad = self.data(*a);
                axpy(k, g, slot(grads, *a, g.len()));
                slot(grads, *s, 1)[0] += dot(g, ad);
            }
            Op::OneMinus(a) => axpy(-1.0, g, slot(grads, *a, g.len())),
            Op::Sigmoid(a) => {
                let y = out();
                let ga = slot(grads, *a, g.len());
                for ((s, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *s += gi * yi * (1.0 - yi);
                }
            }
            Op::Tanh(a) => {
                let y = out();
                let ga = slot(grads, *a, g.len());
                for ((s, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *s += gi * (1.0 - yi * yi);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.numel(p);
                    axpy(1.0, &g[off..off + len], slot(grads, p, len));
                    off += len;
                }
            }
            Op::Gather { table, row } => {
                let total = self.numel(*table);
                let cols = g.len();
                let gt = slot(grads, *table, total);
                axpy(1.0, g, &mut gt[row * cols..(row + 1) * cols]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.len() as f64;
                let gain_d = self.data(*gain);
                let dxhat: Vec<f64> = g.iter().zip(gain_d).map(|(gi, ga)| gi * ga).collect();
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
                {
                    let gx = slot(grads, *x, g.len());
                    for ((s, dh), h) in gx.iter_mut().zip(&dxhat).zip(xhat) {
                        *s += inv_std / d * (d * dh - sum_dxhat - h * sum_dxhat_xhat);
                    }
                }
                {
                    let gg = slot(grads, *gain, g.len());
                    for ((s, gi), h) in gg.iter_mut().zip(g).zip(xhat) {
                        *s += gi * h;
                    }
                }
                axpy(1.0, g, slot(grads, *bias, g.len()));
            }
            Op::SoftmaxXent { logits, label, probs } => {
                let gl = slot(grads, *logits, probs.len());
                for (k, (s, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let target = if k == *label { 1.0 } else { 0.0 };
                    *s += g[0] * (p - target);
                }
            }
            Op::MeanPool(items) => {
                let inv = 1.0 / items.len() as f64;
                for &it in items {
                    axpy(inv, g, slot(grads, it, g.len()));
                }
            }
            Op::Wavelet {
                alpha,
                omega,
                phi,
                beta,
                grid,
            } => {
                let (k, c) = (self.shape(*alpha)[0], self.shape(*alpha)[1]);
                let n = grid.len();
                let (a, w, p, b) = (self.data(*alpha), self.data(*omega), self.data(*phi), self.data(*beta));
                let mut ga = vec![0.0; k * c];
                let mut gw = vec![0.0; k];
                let mut gp = vec![0.0; k * c];
                let mut gb = vec![0.0; k];
                for i in 0..k {
                    for lag in 0..n {
                        let t = grid[n - 1 - lag];
                        let env = (-b[i] * t * t).exp();
                        for ch in 0..c {
                            let gi = g[i * n * c + lag * c + ch];
                            let arg = w[i] * t + p[i * c + ch];
                            let (sin, cos) = arg.sin_cos();
                            let amp = a[i * c + ch];
                            ga[i * c + ch] += gi * cos * env;
                            gp[i * c + ch] -= gi * amp * sin * env;
                            gw[i] -= gi * amp * sin * env * t;
                            gb[i] -= gi * amp * cos * env * t * t;
                        }
                    }
                }
                axpy(1.0, &ga, slot(grads, *alpha, k * c));
                axpy(1.0, &gw, slot(grads, *omega, k));
                axpy(1.0, &gp, slot(grads, *phi, k * c));
                axpy(1.0, &gb, slot(grads, *beta, k));
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Value, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not reach the loss.
    pub fn wrt(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter of `store`; unreachable parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = store.zero_grads();
        for (slot, node) in out.0.iter_mut().zip(&self.param_nodes) {
            if let Some(g) = node.and_then(|v| self.wrt(v)) {
                slot.copy_from_slice(g);
            }
        }
        out
    }

    /// Add this sweep's parameter gradients into `acc`.
    pub fn accumulate_into(&self, acc: &mut ParamGrads) {
        for (slot, node) in acc.0.iter_mut().zip(&self.param_nodes) {
            if let Some(g) = node.and_then(|v| self.wrt(v)) {
                axpy(1.0, g, slot);
            }
        }
    }
}

/// Logistic function that never produces NaN for finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax together with `log(sum(exp(logits)))`.
pub fn softmax_with_logsumexp(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / z).collect();
    (probs, max + z.ln())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_with_logsumexp(logits).0
}
