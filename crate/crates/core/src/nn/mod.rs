//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value and
//! enough context to propagate gradients. Graphs are single-threaded; build one
//! per sample to run samples in parallel.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod scan;

use ndarray::{concatenate, s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice, Zip};
use ndarray::linalg::general_mat_mul;
use thiserror::Error;

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> NnError {
    NnError::Shape { op, left: a.to_vec(), right: b.to_vec() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat(Vec<Var>, usize),
    Softmax(Var),
    LogSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, window: usize, probs: Vec<f64> },
    LayerNorm { x: Var, eps: f64 },
    Gelu(Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Gather { x: Var, axis: usize, idx: Vec<usize> },
    Scatter { x: Var, axis: usize, idx: Vec<usize> },
    Scan { u: Var, delta: Var, a: Var, b: Var, c: Var, zoh: bool, states: Vec<f64> },
    CausalConv { x: Var, w: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(mut g: Tensor, shape: &[usize]) -> Tensor {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

/// Mean taken relative to the first element, exact for constant input.
fn shifted_mean<'a>(xs: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let mut it = xs.clone();
    let Some(&first) = it.next() else { return 0.0 };
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), &x| (s + (x - first), n + 1));
    first + sum / n as f64
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Batch-flattened view helper: `[.., m, n]` data as `count` matrices.
fn mats(t: &Tensor) -> (usize, usize, usize) {
    let nd = t.ndim();
    let m = t.shape()[nd - 2];
    let n = t.shape()[nd - 1];
    (t.len() / (m * n).max(1), m, n)
}

/// A 2-D tensor as a matrix view.
fn view_2d(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

fn view2(data: &[f64], i: usize, m: usize, n: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((m, n), &data[i * m * n..(i + 1) * m * n]).unwrap()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: standard(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is returned by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(), NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        broadcast_shape(sa, sb).map(|_| ()).ok_or_else(|| shape_err(name, sa, sb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a), self.rg(&[a]))
    }

    /// `[.., m, k] × [k, n]` with a shared right operand, or `[.., m, k] × [.., k, n]`
    /// with matching batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let av = self.value(a);
        let bv = self.value(b);
        let out = if sb.len() == 2 {
            let a2 = av.view().into_shape_with_order((av.len() / k, k)).unwrap();
            let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            a2.dot(&b2).into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap()
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err("matmul", &sa, &sb));
            }
            let batches = av.len() / (m * k);
            let mut out = vec![0.0; batches * m * n];
            let (ad, bd) = (av.as_slice().unwrap(), bv.as_slice().unwrap());
            for i in 0..batches {
                let mut o = ndarray::ArrayViewMut2::from_shape((m, n), &mut out[i * m * n..(i + 1) * m * n]).unwrap();
                general_mat_mul(1.0, &view2(ad, i, m, k), &view2(bd, i, k, n), 0.0, &mut o);
            }
            Tensor::from_shape_vec(IxDyn(&out_shape), out).unwrap()
        };
        Ok(self.push(out, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, NnError> {
        let nd = self.shape(a).len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&x| x >= nd || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", self.shape(a), axes));
        }
        let v = self.value(a).view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), self.rg(&[a])))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let v = self.value(a).clone().into_shape_with_order(IxDyn(shape)).unwrap();
        Ok(self.push(v, Op::Reshape(a), self.rg(&[a])))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NnError> {
        let sh = self.shape(a);
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(shape_err("narrow", sh, &[axis, start, len]));
        }
        let v = self.value(a).slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        Ok(self.push(v, Op::Narrow { x: a, axis, start }, self.rg(&[a])))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::Invalid("concat of nothing".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        for p in parts {
            let sh = self.shape(*p);
            let ok = sh.len() == first.len()
                && axis < sh.len()
                && sh.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(shape_err("concat", &first, sh));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(axis), &views).unwrap();
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), self.rg(parts)))
    }

    fn last_axis(&self, a: Var, op: &'static str) -> Result<Axis, NnError> {
        match self.shape(a).len() {
            0 => Err(shape_err(op, self.shape(a), &[])),
            n => Ok(Axis(n - 1)),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let ax = self.last_axis(a, "softmax")?;
        let mut v = self.value(a).clone();
        for mut lane in v.lanes_mut(ax) {
            let m = lane.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        Ok(self.push(v, Op::Softmax(a), self.rg(&[a])))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let ax = self.last_axis(a, "log_softmax")?;
        let mut v = self.value(a).clone();
        for mut lane in v.lanes_mut(ax) {
            let m = lane.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + lane.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            lane.mapv_inplace(|x| x - lse);
        }
        Ok(self.push(v, Op::LogSoftmax(a), self.rg(&[a])))
    }

    /// Scaled dot-product attention of `[L, dim]` queries, keys and values split
    /// into `heads`. Tokens attend only inside consecutive groups of `window`;
    /// `window` equal to `L` is global attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, window: usize) -> Result<Var, NnError> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != &sq[..] || self.shape(v) != &sq[..] {
            return Err(shape_err("attention", &sq, self.shape(k)));
        }
        let (l, dim) = (sq[0], sq[1]);
        if heads == 0 || dim % heads != 0 || window == 0 || l % window != 0 {
            return Err(NnError::Invalid(format!("attention: {heads} heads, window {window} over {l}x{dim}")));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (view_2d(self.value(q)), view_2d(self.value(k)), view_2d(self.value(v)));
        let mut out = Array2::<f64>::zeros((l, dim));
        let mut probs = vec![0.0; (l / window) * heads * window * window];
        for (blk, p) in probs.chunks_mut(window * window).enumerate() {
            let (grp, h) = (blk / heads, blk % heads);
            let rows = grp * window..(grp + 1) * window;
            let cols = h * dh..(h + 1) * dh;
            let qs = qv.slice(s![rows.clone(), cols.clone()]);
            let ks = kv.slice(s![rows.clone(), cols.clone()]);
            let mut pm = ndarray::ArrayViewMut2::from_shape((window, window), p).unwrap();
            general_mat_mul(scale, &qs, &ks.t(), 0.0, &mut pm);
            for mut row in pm.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - m).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            let mut os = out.slice_mut(s![rows.clone(), cols.clone()]);
            general_mat_mul(1.0, &pm, &vv.slice(s![rows, cols]), 0.0, &mut os);
        }
        Ok(self.push(out.into_dyn(), Op::Attention { q, k, v, heads, window, probs }, self.rg(&[q, k, v])))
    }

    /// Normalizes the last axis to zero mean and unit variance, without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, NnError> {
        let ax = self.last_axis(a, "layer_norm")?;
        let mut v = self.value(a).clone();
        for mut lane in v.lanes_mut(ax) {
            let n = lane.len() as f64;
            let mu = shifted_mean(lane.iter());
            let var = lane.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|x| (x - mu) * inv);
        }
        Ok(self.push(v, Op::LayerNorm { x: a, eps }, self.rg(&[a])))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        self.push(v, op, self.rg(&[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(v, Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_elem(IxDyn(&[]), t.sum() / t.len().max(1) as f64);
        self.push(v, Op::Mean(a), self.rg(&[a]))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NnError> {
        if axis >= self.shape(a).len() {
            return Err(shape_err("sum_axis", self.shape(a), &[axis]));
        }
        let v = self.value(a).sum_axis(Axis(axis));
        Ok(self.push(v, Op::SumAxis(a, axis), self.rg(&[a])))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NnError> {
        if axis >= self.shape(a).len() || self.shape(a)[axis] == 0 {
            return Err(shape_err("mean_axis", self.shape(a), &[axis]));
        }
        let v = self.value(a).mean_axis(Axis(axis)).unwrap();
        Ok(self.push(v, Op::MeanAxis(a, axis), self.rg(&[a])))
    }

    /// Selects `idx` along `axis`.
    pub fn gather(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var, NnError> {
        let sh = self.shape(a);
        if axis >= sh.len() || idx.iter().any(|&i| i >= sh[axis]) {
            return Err(shape_err("gather", sh, idx));
        }
        let v = self.value(a).select(Axis(axis), idx);
        Ok(self.push(v, Op::Gather { x: a, axis, idx: idx.to_vec() }, self.rg(&[a])))
    }

    /// Writes slice `j` of `a` to position `idx[j]` of `base` along `axis`; other
    /// positions keep `base`. Indices must be distinct.
    pub fn scatter(&mut self, base: Var, a: Var, axis: usize, idx: &[usize]) -> Result<Var, NnError> {
        let (sb, sa) = (self.shape(base).to_vec(), self.shape(a).to_vec());
        let mut expect = sb.clone();
        if axis < expect.len() {
            expect[axis] = idx.len();
        }
        let mut seen = vec![false; sb.get(axis).copied().unwrap_or(0)];
        if axis >= sb.len()
            || sa != expect
            || idx.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(shape_err("scatter", &sb, &sa));
        }
        // base contributes where not overwritten: mask it out explicitly
        let mut keep = Tensor::ones(IxDyn(&sb));
        for &i in idx {
            keep.index_axis_mut(Axis(axis), i).fill(0.0);
        }
        let keep = self.constant(keep);
        let masked = self.mul(base, keep)?;
        let mut v = Tensor::zeros(IxDyn(&sb));
        for (j, &i) in idx.iter().enumerate() {
            v.index_axis_mut(Axis(axis), i).assign(&self.value(a).index_axis(Axis(axis), j));
        }
        let placed = self.push(v, Op::Scatter { x: a, axis, idx: idx.to_vec() }, self.rg(&[a]));
        self.add(masked, placed)
    }

    /// Diagonal selective scan over time.
    ///
    /// Shapes: `u, delta: [L, D]`, `a: [D, N]`, `b, c: [L, N]`. The state follows
    /// `h_t = exp(Δ_t A) h_{t-1} + B̄_t u_t` with `B̄ = Δ B`, or the exact
    /// zero-order hold `(exp(ΔA) - 1) / A · B` when `zoh` is set, and
    /// `y_t = C_t · h_t`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, zoh: bool) -> Result<Var, NnError> {
        let (su, sd, sa, sb, sc) = (self.shape(u), self.shape(delta), self.shape(a), self.shape(b), self.shape(c));
        if su.len() != 2 || su != sd {
            return Err(shape_err("selective_scan", su, sd));
        }
        if sa.len() != 2 || sa[0] != su[1] {
            return Err(shape_err("selective_scan", su, sa));
        }
        if sb != [su[0], sa[1]] || sc != sb {
            return Err(shape_err("selective_scan", sb, sc));
        }
        let (y, states) = scan::forward(
            self.value(u).view().into_dimensionality().unwrap(),
            self.value(delta).view().into_dimensionality().unwrap(),
            self.value(a).view().into_dimensionality().unwrap(),
            self.value(b).view().into_dimensionality().unwrap(),
            self.value(c).view().into_dimensionality().unwrap(),
            zoh,
        );
        let rg = self.rg(&[u, delta, a, b, c]);
        Ok(self.push(y.into_dyn(), Op::Scan { u, delta, a, b, c, zoh, states }, rg))
    }

    /// Depthwise causal convolution, `x: [L, D]`, `w: [D, K]`; output step `t`
    /// sees inputs `t-K+1..=t`.
    pub fn causal_conv(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(shape_err("causal_conv", sx, sw));
        }
        let (l, d, k) = (sx[0], sx[1], sw[1]);
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = Array2::<f64>::zeros((l, d));
        for t in 0..l {
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                for ch in 0..d {
                    y[[t, ch]] += wv[[ch, j]] * xv[[src, ch]];
                }
            }
        }
        Ok(self.push(y.into_dyn(), Op::CausalConv { x, w }, self.rg(&[x, w])))
    }

    /// `x·W + b` over the last axis; `b` may be omitted.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar. The graph is left intact and may be reused.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        // interior nodes were consumed; keep only leaf gradients and the loss
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                self.acc(grads, *b, reduce_to(g.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                self.acc(grads, *b, reduce_to(-g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.acc(grads, *a, reduce_to(g * self.value(*b), self.shape(*a)));
                }
                if self.nodes[b.0].requires_grad {
                    self.acc(grads, *b, reduce_to(g * self.value(*a), self.shape(*b)));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (j, &ax) in axes.iter().enumerate() {
                    inv[ax] = j;
                }
                self.acc(grads, *a, g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned());
            }
            Op::Reshape(a) => {
                let sh = self.shape(*a);
                self.acc(grads, *a, g.clone().into_shape_with_order(IxDyn(sh)).unwrap());
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = Tensor::zeros(IxDyn(self.shape(*x)));
                let len = g.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(g);
                self.acc(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let mut off = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    let part = g.slice_axis(Axis(*axis), Slice::from(off..off + len)).to_owned();
                    self.acc(grads, *p, part);
                    off += len;
                }
            }
            Op::Softmax(a) => {
                let ax = Axis(y.ndim() - 1);
                let mut gx = g * y;
                let dots = gx.sum_axis(ax).insert_axis(ax);
                Zip::from(&mut gx).and_broadcast(y).and_broadcast(&dots).for_each(|o, &yy, &d| *o -= yy * d);
                self.acc(grads, *a, gx);
            }
            Op::Attention { q, k, v, heads, window, probs } => {
                let (q, k, v, heads, w) = (*q, *k, *v, *heads, *window);
                let (l, dim) = (y.shape()[0], y.shape()[1]);
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv, gv) = (view_2d(self.value(q)), view_2d(self.value(k)), view_2d(self.value(v)), view_2d(g));
                let (mut gq, mut gk, mut gvv) = (Array2::<f64>::zeros((l, dim)), Array2::<f64>::zeros((l, dim)), Array2::<f64>::zeros((l, dim)));
                let mut dp = Array2::<f64>::zeros((w, w));
                for (blk, p) in probs.chunks(w * w).enumerate() {
                    let (grp, h) = (blk / heads, blk % heads);
                    let rows = grp * w..(grp + 1) * w;
                    let cols = h * dh..(h + 1) * dh;
                    let pm = ArrayView2::from_shape((w, w), p).unwrap();
                    let go = gv.slice(s![rows.clone(), cols.clone()]);
                    general_mat_mul(1.0, &pm.t(), &go, 0.0, &mut gvv.slice_mut(s![rows.clone(), cols.clone()]));
                    general_mat_mul(1.0, &go, &vv.slice(s![rows.clone(), cols.clone()]).t(), 0.0, &mut dp);
                    for (mut drow, prow) in dp.rows_mut().into_iter().zip(pm.rows()) {
                        let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                        drow.zip_mut_with(&prow, |d, &pp| *d = pp * (*d - dot));
                    }
                    general_mat_mul(scale, &dp, &kv.slice(s![rows.clone(), cols.clone()]), 0.0, &mut gq.slice_mut(s![rows.clone(), cols.clone()]));
                    general_mat_mul(scale, &dp.t(), &qv.slice(s![rows.clone(), cols.clone()]), 0.0, &mut gk.slice_mut(s![rows, cols]));
                }
                self.acc(grads, q, gq.into_dyn());
                self.acc(grads, k, gk.into_dyn());
                self.acc(grads, v, gvv.into_dyn());
            }
            Op::LogSoftmax(a) => {
                let ax = Axis(y.ndim() - 1);
                let sums = g.sum_axis(ax).insert_axis(ax);
                let mut gx = g.clone();
                Zip::from(&mut gx).and_broadcast(y).and_broadcast(&sums).for_each(|o, &yy, &s| *o -= yy.exp() * s);
                self.acc(grads, *a, gx);
            }
            Op::LayerNorm { x, eps } => {
                let ax = Axis(y.ndim() - 1);
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.raw_dim());
                for ((mut out, xl), (yl, gl)) in gx
                    .lanes_mut(ax)
                    .into_iter()
                    .zip(xv.lanes(ax))
                    .zip(y.lanes(ax).into_iter().zip(g.lanes(ax)))
                {
                    let n = xl.len() as f64;
                    let mu = shifted_mean(xl.iter());
                    let var = xl.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mg = gl.sum() / n;
                    let mgy = gl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gi), &yi) in out.iter_mut().zip(gl.iter()).zip(yl.iter()) {
                        *o = inv * (gi - mg - yi * mgy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Gelu(a) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*a)).for_each(|o, &x| *o *= gelu_parts(x).1);
                self.acc(grads, *a, gx);
            }
            Op::Silu(a) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*a)).for_each(|o, &x| {
                    let s = sigmoid(x);
                    *o *= s * (1.0 + x * (1.0 - s));
                });
                self.acc(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(y).for_each(|o, &s| *o *= s * (1.0 - s));
                self.acc(grads, *a, gx);
            }
            Op::Exp(a) => self.acc(grads, *a, g * y),
            Op::Softplus(a) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*a)).for_each(|o, &x| *o *= sigmoid(x));
                self.acc(grads, *a, gx);
            }
            Op::Powf(a, p) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*a)).for_each(|o, &x| *o *= p * x.powf(p - 1.0));
                self.acc(grads, *a, gx);
            }
            Op::Sum(a) => {
                let s = g.iter().next().copied().unwrap_or(0.0);
                self.acc(grads, *a, Tensor::from_elem(IxDyn(self.shape(*a)), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let s = g.iter().next().copied().unwrap_or(0.0) / n;
                self.acc(grads, *a, Tensor::from_elem(IxDyn(self.shape(*a)), s));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let sh = self.shape(*a);
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / sh[*axis] as f64 } else { 1.0 };
                let gx = g.clone().insert_axis(Axis(*axis)).broadcast(IxDyn(sh)).unwrap().to_owned() * scale;
                self.acc(grads, *a, gx);
            }
            Op::Gather { x, axis, idx } => {
                let mut gx = Tensor::zeros(IxDyn(self.shape(*x)));
                for (j, &src) in idx.iter().enumerate() {
                    let mut dst = gx.index_axis_mut(Axis(*axis), src);
                    dst += &g.index_axis(Axis(*axis), j);
                }
                self.acc(grads, *x, gx);
            }
            Op::Scatter { x, axis, idx } => {
                let gx = g.select(Axis(*axis), idx);
                self.acc(grads, *x, gx);
            }
            Op::Scan { u, delta, a, b, c, zoh, states } => {
                let v2 = |v: Var| self.value(v).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gr = scan::backward(
                    v2(*u),
                    v2(*delta),
                    v2(*a),
                    v2(*b),
                    v2(*c),
                    *zoh,
                    states,
                    g.view().into_dimensionality().unwrap(),
                );
                self.acc(grads, *u, gr.du.into_dyn());
                self.acc(grads, *delta, gr.ddelta.into_dyn());
                self.acc(grads, *a, gr.da.into_dyn());
                self.acc(grads, *b, gr.db.into_dyn());
                self.acc(grads, *c, gr.dc.into_dyn());
            }
            Op::CausalConv { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (l, d) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[1];
                let mut gx = Array2::<f64>::zeros((l, d));
                let mut gw = Array2::<f64>::zeros((d, k));
                for t in 0..l {
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                        for ch in 0..d {
                            let gy = g[[t, ch]];
                            gx[[src, ch]] += wv[[ch, j]] * gy;
                            gw[[ch, j]] += xv[[src, ch]] * gy;
                        }
                    }
                }
                self.acc(grads, *x, gx.into_dyn());
                self.acc(grads, *w, gw.into_dyn());
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape(), bv.shape());
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        if sb.len() == 2 {
            let a2 = av.view().into_shape_with_order((av.len() / k, k)).unwrap();
            let g2 = g.view().into_shape_with_order((g.len() / n, n)).unwrap();
            let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            if self.nodes[a.0].requires_grad {
                let ga = g2.dot(&b2.t()).into_dyn().into_shape_with_order(IxDyn(sa)).unwrap();
                self.acc(grads, a, ga);
            }
            if self.nodes[b.0].requires_grad {
                self.acc(grads, b, a2.t().dot(&g2).into_dyn());
            }
            return;
        }
        let (batches, m, _) = mats(av);
        let (ad, bd, gd) = (av.as_slice().unwrap(), bv.as_slice().unwrap(), g.as_slice().unwrap());
        if self.nodes[a.0].requires_grad {
            let mut ga = vec![0.0; av.len()];
            for i in 0..batches {
                let mut o = ndarray::ArrayViewMut2::from_shape((m, k), &mut ga[i * m * k..(i + 1) * m * k]).unwrap();
                general_mat_mul(1.0, &view2(gd, i, m, n), &view2(bd, i, k, n).t(), 0.0, &mut o);
            }
            self.acc(grads, a, Tensor::from_shape_vec(IxDyn(sa), ga).unwrap());
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = vec![0.0; bv.len()];
            for i in 0..batches {
                let mut o = ndarray::ArrayViewMut2::from_shape((k, n), &mut gb[i * k * n..(i + 1) * k * n]).unwrap();
                general_mat_mul(1.0, &view2(ad, i, m, k).t(), &view2(gd, i, m, n), 0.0, &mut o);
            }
            self.acc(grads, b, Tensor::from_shape_vec(IxDyn(sb), gb).unwrap());
        }
    }
}

/// Convenience constructor for tests and small inputs.
pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("data length matches shape")
}

pub fn to_array2(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality().expect("rank-2 tensor").to_owned()
}
