//! Tape-recorded reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive op in execution order, so the node
//! list is already a topological order and the backward sweep is a single
//! reverse pass. Parameters are borrowed from a [`ParamSet`] rather than
//! copied; gradients for them come back keyed by [`ParamId`].

use std::collections::HashMap;

use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter storage. Order is insertion order and is the
/// order used by checkpoints and optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Debug)]
pub enum AttnMask {
    None,
    /// `[batch * len_k]`, true = visible.
    Keys(Vec<bool>),
    /// `[batch * len_q * len_k]`, true = visible.
    Pairs(Vec<bool>),
}

impl AttnMask {
    fn visible(&self, b: usize, i: usize, j: usize, lq: usize, lk: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Keys(m) => m[b * lk + j],
            AttnMask::Pairs(m) => m[(b * lq + i) * lk + j],
        }
    }
}

/// Geometry of a batched multi-head attention call. Queries are stored as
/// `[batch * len_q, width]`, keys and values as `[batch * len_k, width]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub heads: usize,
    pub len_q: usize,
    pub len_k: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Exp(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f32>, probs: Vec<f32> },
    Gather { table: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f32> },
    CosineRows { a: Var, b: Var, na: Vec<f32>, nb: Vec<f32> },
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

impl Node<'_> {
    fn tensor(&self) -> &Tensor {
        match &self.value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            params: params.values.iter().map(|t| Some(Tensor::zeros(t.shape()))).collect(),
            leaves: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.params.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub(crate) fn param_slots(&self) -> &[Option<Tensor>] {
        &self.params
    }
}

/// The tape.
pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { params: None, nodes: Vec::new(), param_vars: HashMap::new(), backward_done: false }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Graph { params: Some(params), ..Graph::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].tensor()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameter leaf (trainable).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let params = self.params.expect("graph was built without a parameter set");
        self.nodes.push(Node {
            value: Value::Borrowed(params.get(id)),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameter leaf that does not receive gradients (frozen weights).
    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        let params = self.params.expect("graph was built without a parameter set");
        self.nodes.push(Node {
            value: Value::Borrowed(params.get(id)),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Free leaf; with `requires_grad` its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, t: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var, NumericsError> {
        if !t.is_finite() {
            return Err(NumericsError::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Value::Owned(t), op, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_same(&self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = tx.dims2();
        if tb.len() != c {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var, NumericsError> {
        let t = self.map(x, |v| v * s);
        self.push(t, Op::Scale(x, s), &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Result<Var, NumericsError> {
        let t = self.map(x, |v| v + s);
        self.push(t, Op::AddScalar(x), &[x], "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_ex(a, b, false, true)
    }

    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NumericsError> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.rank() != 2 || xb.rank() != 2 {
            return Err(NumericsError::Shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
        let (ra, ca) = xa.dims2();
        let (rb, cb) = xb.dims2();
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(NumericsError::Shape(format!(
                "matmul inner extents differ: {:?}{} x {:?}{}",
                xa.shape(),
                if ta { "ᵀ" } else { "" },
                xb.shape(),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, xa.data(), ca, ta, xb.data(), cb, tb, 0.0, &mut out, n);
        let t = Tensor::from_parts(vec![m, n], out);
        self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b], "matmul")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x], "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.map(x, f32::exp);
        self.push(t, Op::Exp(x), &[x], "exp")
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var, NumericsError> {
        let t = self.map(x, |v| v.clamp(lo, hi));
        self.push(t, Op::Clamp { x, lo, hi }, &[x], "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let s = t.sum() / t.len() as f32;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (_, c) = tx.dims2();
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            if row.iter().all(|v| *v == f32::NEG_INFINITY) {
                return Err(NumericsError::DegenerateRow(format!("softmax row {i} is entirely -inf")));
            }
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::Softmax(x), &[x], "softmax")
    }

    /// Softmax along `axis` of a rank-2 tensor.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(NumericsError::Parameter(format!("softmax axis {axis} out of range for rank {rank}")));
        }
        if axis + 1 == rank {
            return self.softmax(x);
        }
        if rank != 2 {
            return Err(NumericsError::Parameter("softmax over a non-final axis needs rank 2".into()));
        }
        let xt = self.transpose(x)?;
        let s = self.softmax(xt)?;
        self.transpose(s)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var, NumericsError> {
        if !(eps > 0.0) {
            return Err(NumericsError::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[i] = rs as f32;
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias], "layer_norm")
    }

    /// Weighted mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let w = vec![1.0; targets.len()];
        self.cross_entropy_weighted(logits, targets, &w)
    }

    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        let (r, c) = tl.dims2();
        if targets.len() != r || weights.len() != r {
            return Err(NumericsError::Shape(format!(
                "cross_entropy: {r} rows but {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::Index { index: bad, bound: c });
        }
        let wsum: f32 = weights.iter().sum();
        if !(wsum > 0.0) {
            return Err(NumericsError::Parameter("cross_entropy needs positive total weight".into()));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0f64;
        for i in 0..r {
            let row = &mut probs[i * c..(i + 1) * c];
            softmax_in_place(row);
            if weights[i] != 0.0 {
                let lse = log_sum_exp(&tl.data()[i * c..(i + 1) * c]);
                loss += weights[i] as f64 * (lse - tl.data()[i * c + targets[i]] as f64);
            }
        }
        let value = (loss / wsum as f64) as f32;
        let normed: Vec<f32> = weights.iter().map(|w| w / wsum).collect();
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: normed, probs },
            &[logits],
            "cross_entropy",
        )
    }

    /// Row lookup: `out[i] = table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        let (r, c) = tt.dims2();
        if idx.is_empty() {
            return Err(NumericsError::Shape("gather with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumericsError::Index { index: i, bound: r });
            }
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], out);
        self.push(t, Op::Gather { table, idx: idx.to_vec() }, &[table], "gather")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = ta.dims2();
        let (rb, cb) = tb.dims2();
        if ra != rb {
            return Err(shape_err("concat_cols", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let t = Tensor::from_parts(vec![ra, ca + cb], out);
        self.push(t, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x), &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    /// Scaled dot-product attention, batched and multi-headed:
    /// `softmax(q·kᵀ/√d_head + log mask)·v` per (example, head) block.
    /// Masked keys get exactly zero weight; a query with no visible key is an error.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape, mask: &AttnMask) -> Result<Var, NumericsError> {
        let AttnShape { batch, heads, len_q, len_k } = shape;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rq, w) = tq.dims2();
        let (rk, wk) = tk.dims2();
        if rq != batch * len_q || rk != batch * len_k || tv.dims2() != (rk, wk) || wk != w {
            return Err(NumericsError::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?} do not fit batch={batch} len_q={len_q} len_k={len_k}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || w % heads != 0 {
            return Err(NumericsError::Parameter(format!("width {w} not divisible into {heads} heads")));
        }
        match mask {
            AttnMask::Keys(m) if m.len() != batch * len_k => {
                return Err(NumericsError::Shape("attention key mask length".into()))
            }
            AttnMask::Pairs(m) if m.len() != batch * len_q * len_k => {
                return Err(NumericsError::Shape("attention pair mask length".into()))
            }
            _ => {}
        }
        let dh = w / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let block = len_q * len_k;
        let mut probs = vec![0.0f32; batch * heads * block];
        let mut out = vec![0.0f32; rq * w];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * block..(b * heads + h + 1) * block];
                let qo = b * len_q * w + h * dh;
                let ko = b * len_k * w + h * dh;
                gemm(len_q, dh, len_k, scale, &tq.data()[qo..], w, false, &tk.data()[ko..], w, true, 0.0, p, len_k);
                for i in 0..len_q {
                    let row = &mut p[i * len_k..(i + 1) * len_k];
                    let mut max = f32::NEG_INFINITY;
                    for (j, s) in row.iter().enumerate() {
                        if mask.visible(b, i, j, len_q, len_k) {
                            max = max.max(*s);
                        }
                    }
                    if max == f32::NEG_INFINITY {
                        return Err(NumericsError::DegenerateRow(format!(
                            "attention query {i} of example {b} has every key masked"
                        )));
                    }
                    let mut z = 0.0f32;
                    for (j, s) in row.iter_mut().enumerate() {
                        if mask.visible(b, i, j, len_q, len_k) {
                            *s = (*s - max).exp();
                            z += *s;
                        } else {
                            *s = 0.0;
                        }
                    }
                    for s in row.iter_mut() {
                        *s /= z;
                    }
                }
                gemm(len_q, len_k, dh, 1.0, p, len_k, false, &tv.data()[ko..], w, false, 0.0, &mut out[qo..], w);
            }
        }
        let t = Tensor::from_parts(vec![rq, w], out);
        self.push(t, Op::Attention { q, k, v, shape, probs }, &[q, k, v], "attention")
    }

    /// Row-wise cosine similarity, `[r, c] x [r, c] -> [r]`. Norms below 1e-8
    /// are clamped, so a zero row gives similarity 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine_rows", ta.shape(), tb.shape()));
        }
        let (r, _) = ta.dims2();
        let mut na = vec![0.0; r];
        let mut nb = vec![0.0; r];
        let mut out = vec![0.0; r];
        for i in 0..r {
            let (x, y) = (ta.row(i), tb.row(i));
            let dot: f32 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            na[i] = x.iter().map(|v| v * v).sum::<f32>().sqrt().max(COS_EPS);
            nb[i] = y.iter().map(|v| v * v).sum::<f32>().sqrt().max(COS_EPS);
            out[i] = dot / (na[i] * nb[i]);
        }
        let t = Tensor::from_parts(vec![r], out);
        self.push(t, Op::CosineRows { a, b, na, nb }, &[a, b], "cosine_rows")
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.backward_done {
            return Err(NumericsError::Backward("backward already ran on this tape; call reset_backward first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NumericsError::Backward("loss does not depend on any trainable leaf (detached graph)".into()));
        }
        self.backward_done = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients { params: Vec::new(), leaves: HashMap::new() };
        if let Some(p) = self.params {
            out.params = vec![None; p.len()];
        }

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match node.param {
                    Some(pid) => accumulate_into(&mut out.params[pid.0], g),
                    None => {
                        out.leaves.insert(Var(id), g);
                    }
                }
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
        }
        Ok(out)
    }

    /// Allows a further backward pass over the same tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let node = &self.nodes[id];
        let out = node.tensor();
        let send = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if self.wants(v) {
                accumulate_into(&mut grads[v.0], t);
            }
        };
        let like = |v: Var, data: Vec<f32>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.clone());
                if self.wants(*b) {
                    send(grads, *b, like(*b, g.data().iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    send(grads, *a, like(*a, g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    send(grads, *b, like(*b, g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddBias(x, b) => {
                send(grads, *x, g.clone());
                if self.wants(*b) {
                    let (_, c) = g.dims2();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(grads, *b, like(*b, gb));
                }
            }
            Op::Scale(x, s) => send(grads, *x, like(*x, g.data().iter().map(|v| v * s).collect())),
            Op::AddScalar(x) => send(grads, *x, g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (ra, ca) = xa.dims2();
                let (rb, cb) = xb.dims2();
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = if *tb { rb } else { cb };
                if self.wants(*a) {
                    let mut da = vec![0.0; ra * ca];
                    if !*ta {
                        // dA[m,k] = G[m,n] · op(B)ᵀ
                        gemm(m, n, k, 1.0, g.data(), n, false, xb.data(), cb, !*tb, 0.0, &mut da, ca);
                    } else {
                        // dA[k,m] = op(B)[k,n] · Gᵀ
                        gemm(k, n, m, 1.0, xb.data(), cb, *tb, g.data(), n, true, 0.0, &mut da, ca);
                    }
                    send(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; rb * cb];
                    if !*tb {
                        // dB[k,n] = op(A)ᵀ · G
                        gemm(k, m, n, 1.0, xa.data(), ca, !*ta, g.data(), n, false, 0.0, &mut db, cb);
                    } else {
                        // dB[n,k] = Gᵀ · op(A)
                        gemm(n, m, k, 1.0, g.data(), n, true, xa.data(), ca, *ta, 0.0, &mut db, cb);
                    }
                    send(grads, *b, like(*b, db));
                }
            }
            Op::Relu(x) => send(
                grads,
                *x,
                like(*x, g.data().iter().zip(out.data()).map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 }).collect()),
            ),
            Op::Exp(x) => send(grads, *x, like(*x, g.data().iter().zip(out.data()).map(|(a, b)| a * b).collect())),
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x);
                send(
                    grads,
                    *x,
                    like(
                        *x,
                        g.data()
                            .iter()
                            .zip(tx.data())
                            .map(|(gv, v)| if *v > *lo && *v < *hi { *gv } else { 0.0 })
                            .collect(),
                    ),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                send(grads, *x, like(*x, vec![g.data()[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(grads, *x, like(*x, vec![g.data()[0] / n as f32; n]));
            }
            Op::Softmax(x) => {
                let (_, c) = out.dims2();
                let mut dx = vec![0.0; out.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(grads, *x, like(*x, dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = out.dims2();
                let tg = self.value(*gain);
                if self.wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..c {
                            let d = gr[j] * tg.data()[j];
                            m1 += d;
                            m2 += d * hr[j];
                        }
                        m1 /= c as f32;
                        m2 /= c as f32;
                        for j in 0..c {
                            let d = gr[j] * tg.data()[j];
                            dx[i * c + j] = rstd[i] * (d - m1 - hr[j] * m2);
                        }
                    }
                    send(grads, *x, like(*x, dx));
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            dg[j] += gv * xhat[i * c + j];
                            db[j] += gv;
                        }
                    }
                    send(grads, *gain, like(*gain, dg));
                    send(grads, *bias, like(*bias, db));
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let (_, c) = self.value(*logits).dims2();
                let s = g.data()[0];
                let mut dl = probs.clone();
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut dl[i * c..(i + 1) * c];
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w * s;
                    }
                }
                send(grads, *logits, like(*logits, dl));
            }
            Op::Gather { table, idx } => {
                let tt = self.value(*table);
                let (_, c) = tt.dims2();
                let mut dt = vec![0.0; tt.len()];
                for (row, &i) in g.data().chunks(c).zip(idx) {
                    for (acc, v) in dt[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(grads, *table, like(*table, dt));
            }
            Op::ConcatCols(a, b) => {
                let (_, ca) = self.value(*a).dims2();
                let (r, cb) = self.value(*b).dims2();
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                send(grads, *a, like(*a, da));
                send(grads, *b, like(*b, db));
            }
            Op::Transpose(x) => send(grads, *x, g.transpose()),
            Op::Reshape(x) => send(grads, *x, like(*x, g.data().to_vec())),
            Op::Attention { q, k, v, shape, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *shape, probs, g);
                send(grads, *q, dq);
                send(grads, *k, dk);
                send(grads, *v, dv);
            }
            Op::CosineRows { a, b, na, nb } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = ta.dims2();
                let mut da = vec![0.0; r * c];
                let mut db = vec![0.0; r * c];
                for i in 0..r {
                    let (x, y) = (ta.row(i), tb.row(i));
                    let cos = out.data()[i];
                    let gi = g.data()[i];
                    let inv = 1.0 / (na[i] * nb[i]);
                    // Gradient through a clamped norm is the constant-norm gradient.
                    let ca = if na[i] > COS_EPS { cos / (na[i] * na[i]) } else { 0.0 };
                    let cb = if nb[i] > COS_EPS { cos / (nb[i] * nb[i]) } else { 0.0 };
                    for j in 0..c {
                        da[i * c + j] = gi * (y[j] * inv - ca * x[j]);
                        db[i * c + j] = gi * (x[j] * inv - cb * y[j]);
                    }
                }
                send(grads, *a, like(*a, da));
                send(grads, *b, like(*b, db));
            }
        }
        Ok(())
    }

    fn attention_backward(&self, q: Var, k: Var, v: Var, shape: AttnShape, probs: &[f32], g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let AttnShape { batch, heads, len_q, len_k } = shape;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (_, w) = tq.dims2();
        let dh = w / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let block = len_q * len_k;
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut dp = vec![0.0; block];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * block..(b * heads + h + 1) * block];
                let qo = b * len_q * w + h * dh;
                let ko = b * len_k * w + h * dh;
                // dV = Pᵀ·dO
                gemm(len_k, len_q, dh, 1.0, p, len_k, true, &g.data()[qo..], w, false, 1.0, &mut dv[ko..], w);
                // dP = dO·Vᵀ
                gemm(len_q, dh, len_k, 1.0, &g.data()[qo..], w, false, &tv.data()[ko..], w, true, 0.0, &mut dp, len_k);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
                for i in 0..len_q {
                    let pr = &p[i * len_k..(i + 1) * len_k];
                    let dr = &mut dp[i * len_k..(i + 1) * len_k];
                    let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..len_k {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ = dS·K, dK = dSᵀ·Q
                gemm(len_q, len_k, dh, 1.0, &dp, len_k, false, &tk.data()[ko..], w, false, 1.0, &mut dq[qo..], w);
                gemm(len_k, len_q, dh, 1.0, &dp, len_k, true, &tq.data()[qo..], w, false, 1.0, &mut dk[ko..], w);
            }
        }
        (
            Tensor::from_parts(tq.shape().to_vec(), dq),
            Tensor::from_parts(tk.shape().to_vec(), dk),
            Tensor::from_parts(tv.shape().to_vec(), dv),
        )
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

const COS_EPS: f32 = 1e-8;

fn accumulate_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => *slot = Some(t),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}
