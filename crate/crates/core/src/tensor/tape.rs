//! Wengert-list tape. Every operation appends one node; `backward` walks the
//! nodes in exact reverse order and accumulates gradients additively.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use super::{matmul_into, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

// tanh-approximate gelu: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the system recorded a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scope {
    Backbone,
    #[default]
    Side,
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param { name: String },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    AddBias(Var, Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Softmax(Var),
    Sum(Var),
    /// Loss whose gradient w.r.t. its input was computed in the forward pass.
    Fused { x: Var, grad: Vec<T>, exact: f64 },
}

#[derive(Debug)]
struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    scope: Scope,
}

/// Gradients for trainable parameters recorded on a tape.
#[derive(Clone, Debug, Default)]
pub struct GradMap<T> {
    grads: BTreeMap<String, Tensor<T>>,
    reached: BTreeSet<String>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Parameters that an actual gradient path from the loss reached.
    pub fn reached(&self) -> &BTreeSet<String> {
        &self.reached
    }

    /// Adds zero entries for trainable parameters of `store` never put on the tape.
    pub fn fill_unreached(&mut self, store: &ParamStore<T>) {
        for p in store.iter().filter(|p| p.trainable) {
            self.grads
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.tensor.shape()));
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    scope: Scope,
}

fn same_or_scalar(a: &[usize], an: usize, b: &[usize], bn: usize) -> bool {
    a == b || an == 1 || bn == 1
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: Scope::Side,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of nodes recorded under `scope` that sit on a gradient path,
    /// i.e. whose values must be retained for the backward pass.
    pub fn retained_in_scope(&self, scope: Scope) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.scope == scope && n.requires_grad && !matches!(n.op, Op::Param { .. }))
            .count()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Constant, false)
    }

    /// Records a parameter leaf. Frozen parameters become constants for the
    /// purpose of differentiation.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(
            Cow::Borrowed(&p.tensor),
            Op::Param {
                name: p.name.clone(),
            },
            p.trainable,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb)?;
        Ok(self.push_owned(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::dim("transpose", ta.shape(), &[]));
        }
        let out = ta.transpose();
        Ok(self.push_owned(out, Op::Transpose(a), &[a]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !same_or_scalar(ta.shape(), ta.numel(), tb.shape(), tb.numel()) {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let (big, small_a) = if ta.numel() >= tb.numel() { (ta, false) } else { (tb, true) };
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if !small_a {
            let s = tb.item();
            big.data().iter().map(|&x| f(x, s)).collect()
        } else {
            let s = ta.item();
            big.data().iter().map(|&y| f(s, y)).collect()
        };
        Tensor::new(big.shape().to_vec(), data)
    }

    /// Elementwise sum; shapes must be equal or one side a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push_owned(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_owned(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect()).expect("same shape");
        self.push_owned(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x + c).collect()).expect("same shape");
        self.push_owned(out, Op::AddScalar(a), &[a])
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -T::one());
        self.add_scalar(n, T::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| sigmoid(x)).collect()).expect("same shape");
        self.push_owned(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| gelu(x)).collect()).expect("same shape");
        self.push_owned(out, Op::Gelu(a), &[a])
    }

    /// Normalizes the last axis, then applies `gain` and `offset` (both of
    /// the last axis' length).
    pub fn layernorm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        let (tg, tb) = (self.value(gain), self.value(offset));
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::dim("layernorm", tx.shape(), tg.shape()));
        }
        let n = cols as f64;
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = T::lit(rs);
            for c in 0..cols {
                let h = (row[c].as_f64() - mean) * rs;
                xhat[r * cols + c] = T::lit(h);
                out[r * cols + c] = T::lit(h * tg.data()[c].as_f64() + tb.data()[c].as_f64());
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            &[x, gain, offset],
        ))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (rows, cols) = tx.dims2();
        if tb.numel() != cols {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.data().to_vec();
        for r in 0..rows {
            for (o, &b) in out[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_owned(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if tx.shape().len() != 2 || start + len > cols || len == 0 {
            return Err(Error::dim("slice_cols", tx.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], out)?;
        Ok(self.push_owned(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).dims2().0)
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.dims2().0 != rows {
                return Err(Error::dim("concat_cols", &[rows], t.shape()));
            }
            widths.push(t.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).dims2().1)
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2();
            if c != cols {
                return Err(Error::dim("concat_rows", &[cols], t.shape()));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim("gather_rows", tx.shape(), &[i]));
            }
            out.extend_from_slice(tx.row_slice(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push_owned(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.gather_rows(x, &[r])
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked for `j > i`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let max = row[..limit].iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let e: Vec<f64> = row[..limit].iter().map(|v| (v.as_f64() - max).exp()).collect();
            let denom: f64 = e.iter().sum();
            for (c, ec) in e.iter().enumerate() {
                out[r * cols + c] = T::lit(ec / denom);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_owned(out, Op::Softmax(x), &[x]))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push_owned(Tensor::scalar(T::lit(s)), Op::Sum(x), &[x])
    }

    /// Records a scalar computed outside the tape together with its
    /// gradient w.r.t. `x`. The `f64` value stays readable through
    /// [`Tape::scalar_f64`].
    pub fn fused_scalar(&mut self, x: Var, value: f64, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::dim("fused_scalar", self.value(x).shape(), &[grad.len()]));
        }
        let op = Op::Fused { x, grad, exact: value };
        Ok(self.push_owned(Tensor::scalar(T::lit(value)), op, &[x]))
    }

    /// A scalar's value; fused scalars report their value before rounding to `T`.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        match &self.nodes[v.0].op {
            Op::Fused { exact, .. } => *exact,
            _ => self.value(v).item().as_f64(),
        }
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// The returned map holds an entry for every trainable parameter leaf on
    /// this tape (zero when no path from the loss reaches it); frozen
    /// parameters never appear.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut map = GradMap::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads, &mut map)?;
        }

        for node in &self.nodes {
            if let Op::Param { name } = &node.op {
                if node.requires_grad {
                    map.grads
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(map)
    }

    fn backprop_node(
        &self,
        node: &Node<'a, T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        map: &mut GradMap<T>,
    ) -> Result<()> {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e = *e + d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        // gradient for a scalar-broadcast operand is the sum of its share
        let reduce_if_scalar = |src: &Tensor<T>, full: Vec<T>| -> Vec<T> {
            if src.numel() == 1 && full.len() != 1 {
                vec![full.iter().fold(T::zero(), |s, &v| s + v)]
            } else {
                full
            }
        };

        match &node.op {
            Op::Constant => {}
            Op::Param { name } => {
                let shape = node.value.shape().to_vec();
                match map.grads.get_mut(name) {
                    Some(t) => {
                        for (e, &d) in t.data_mut().iter_mut().zip(g) {
                            *e = *e + d;
                        }
                    }
                    None => {
                        map.grads.insert(name.clone(), Tensor::new(shape, g.to_vec())?);
                    }
                }
                map.reached.insert(name.clone());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k) = ta.dims2();
                let m = tb.dims2().1;
                if rg(*a) {
                    let bt = tb.transpose();
                    let mut da = vec![T::zero(); n * k];
                    matmul_into(g, bt.data(), &mut da, n, m, k);
                    acc(*a, da);
                }
                if rg(*b) {
                    let at = ta.transpose();
                    let mut db = vec![T::zero(); k * m];
                    matmul_into(at.data(), g, &mut db, k, n, m);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2();
                let gt = Tensor::new(vec![c, r], g.to_vec())?.transpose();
                acc(*a, gt.into_data());
            }
            Op::Add(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, reduce_if_scalar(ta, g.to_vec()));
                acc(*b, reduce_if_scalar(tb, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let other = |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.item() } else { t.data()[i] };
                if rg(*a) {
                    let full = g.iter().enumerate().map(|(i, &gi)| gi * other(tb, i)).collect();
                    acc(*a, reduce_if_scalar(ta, full));
                }
                if rg(*b) {
                    let full = g.iter().enumerate().map(|(i, &gi)| gi * other(ta, i)).collect();
                    acc(*b, reduce_if_scalar(tb, full));
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect());
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect());
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let (rows, cols) = val(*x).dims2();
                let gv = val(*gain).data();
                let n = T::lit(cols as f64);
                if rg(*gain) || rg(*offset) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] = dg[c] + g[r * cols + c] * xhat[r * cols + c];
                            db[c] = db[c] + g[r * cols + c];
                        }
                    }
                    acc(*gain, dg);
                    acc(*offset, db);
                }
                if rg(*x) {
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[r * cols + c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            dx[r * cols + c] = rstd[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::AddBias(x, b) => {
                let (rows, cols) = val(*x).dims2();
                acc(*x, g.to_vec());
                if rg(*b) {
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] = db[c] + g[r * cols + c];
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = val(*x).dims2();
                let len = node.value.dims2().1;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2().1;
                    if rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = val(*x).dims2();
                let mut dx = vec![T::zero(); rows * cols];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] = dx[i * cols + c] + g[k * cols + c];
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax(x) => {
                let (rows, cols) = node.value.dims2();
                let y = node.value.data();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let dot = (0..cols).fold(T::zero(), |s, c| s + g[r * cols + c] * y[r * cols + c]);
                    for c in 0..cols {
                        dx[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::Fused { x, grad, .. } => {
                acc(*x, grad.iter().map(|&d| d * g[0]).collect());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn square_sum_gradient() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::scalar(3.0), true).unwrap();
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let sq = t.mul(wv, wv).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().item(), 6.0);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::scalar(1.5), true).unwrap();
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let y = t.add(xv, xv).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get("x").unwrap().item(), 2.0);
    }

    #[test]
    fn frozen_parameter_is_absent() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::scalar(2.0), true).unwrap();
        let f = store.add("frozen", Tensor::scalar(5.0), false).unwrap();
        let mut t = Tape::new();
        let (wv, fv) = (t.param(&store, w), t.param(&store, f));
        let y = t.mul(wv, fv).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get("w").unwrap().item(), 5.0);
        assert!(!g.contains("frozen"));
    }

    #[test]
    fn unreachable_trainable_maps_to_zero() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::scalar(2.0), true).unwrap();
        let u = store.add("u", Tensor::row(vec![1.0, 2.0]), true).unwrap();
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let _uv = t.param(&store, u);
        let y = t.scale(wv, 3.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get("u").unwrap().data(), &[0.0, 0.0]);
        assert!(!g.reached().contains("u"));
        assert!(g.reached().contains("w"));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn layernorm_constant_row_yields_offset() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::row(vec![4.0; 5]));
        let g = t.constant(Tensor::row(vec![2.0; 5]));
        let b = t.constant(Tensor::row(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
        let y = t.layernorm(x, g, b).unwrap();
        assert_eq!(t.value(y).data(), &[0.1, 0.2, 0.3, 0.4, 0.5]);
    }

    #[test]
    fn broadcast_rejected_for_unequal_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::row(vec![1.0, 2.0]));
        let b = t.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![2, 2], vec![1.0, 5.0, 1.0, 1.0]).unwrap());
        let y = t.softmax_rows(x, true).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0, 0.5, 0.5]);
    }
}
