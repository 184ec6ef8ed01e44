use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Softmax(Var, bool),
    LogSoftmax(Var, bool),
    NormalizeRows(Var, Vec<f64>),
    StraightThrough(Var, Vec<f64>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Concat(..) => "concat",
            Op::SelectRows(..) => "select_rows",
            Op::Gather(..) => "gather",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Softplus(..) => "softplus",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    param: Option<ParamId>,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Every op appends a node whose inputs precede it, so the node list is
/// already in topological order. A recording supports exactly one
/// [`Graph::backward`]; call [`Graph::clear`] to start the next step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<Option<Var>>,
    consumed: bool,
    soft_surrogate: bool,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Yields `(offset, stride, len)` for each softmax group.
fn groups(rows: usize, cols: usize, along_row: bool) -> impl Iterator<Item = (usize, usize, usize)> {
    let (count, stride, len, step) = if along_row {
        (rows, 1, cols, cols)
    } else {
        (cols, cols, rows, 1)
    };
    (0..count).map(move |g| (g * step, stride, len))
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let rows = if ar == br || br == 1 {
        ar
    } else if ar == 1 {
        br
    } else {
        usize::MAX
    };
    let cols = if ac == bc || bc == 1 {
        ac
    } else if ac == 1 {
        bc
    } else {
        usize::MAX
    };
    if rows == usize::MAX || cols == usize::MAX {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok((rows, cols))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// When set, [`Graph::straight_through`] forwards its soft surrogate
    /// instead of the hard value. Used by finite-difference checks, which can
    /// only see the function whose gradient backward actually computes.
    pub fn with_soft_surrogate(mut self, on: bool) -> Self {
        self.soft_surrogate = on;
        self
    }

    pub fn soft_surrogate(&self) -> bool {
        self.soft_surrogate
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops the recording so the next step starts from an empty tape.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.bound.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|v| !v.is_nan()),
            "{} produced NaN",
            op.kind()
        );
        self.nodes.push(Node {
            value,
            op,
            tracked,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Tracked leaf bound to a stored parameter; see [`Graph::accumulate_into`].
    ///
    /// Each parameter is copied onto the tape once per recording; later calls
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return *v;
        }
        let v = self.leaf(store.value(id).clone());
        self.nodes[v.0].param = Some(id);
        self.bind(id, v);
        v
    }

    /// Makes [`Graph::param`] resolve `id` to an existing node. Gradient
    /// checks use this to route parameters through their own leaves.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
    }

    /// Untracked copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims();
        let (k2, n) = self.value(b).dims();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::matrix(m, n, data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), tracked))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op = Op::Binary(kind, a, b);
        let name = op.kind();
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(name, ta, tb)?;
        let (ar, ac) = ta.dims();
        let (br, bc) = tb.dims();
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let ai = if ar == 1 { 0 } else { i };
            let bi = if br == 1 { 0 } else { i };
            for j in 0..cols {
                let x = ad[ai * ac + if ac == 1 { 0 } else { j }];
                let y = bd[bi * bc + if bc == 1 { 0 } else { j }];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => {
                        if y == 0.0 {
                            return Err(Error::Domain {
                                op: "div",
                                detail: "division by zero".into(),
                            });
                        }
                        x / y
                    }
                });
            }
        }
        // keep rank-1 results rank-1 when both inputs agree
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else {
            vec![rows, cols]
        };
        let t = Tensor::new(shape, out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, op, tracked))
    }

    /// Elementwise sum; either operand may broadcast along an extent of 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(&[a]);
        self.push(t, op, tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        let d = t.data();
        let (shape, data) = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, &x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                if mean {
                    out.iter_mut().for_each(|o| *o /= r as f64);
                }
                (vec![1, c], out)
            }
            1 => {
                let out = (0..r)
                    .map(|i| {
                        let s: f64 = d[i * c..(i + 1) * c].iter().sum();
                        if mean {
                            s / c as f64
                        } else {
                            s
                        }
                    })
                    .collect();
                (vec![r, 1], out)
            }
            _ => {
                return Err(Error::Invalid(format!(
                    "reduction axis {axis} out of range for shape {:?}",
                    t.shape()
                )))
            }
        };
        let tracked = self.tracked(&[a]);
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        Ok(self.push(Tensor::new(shape, data)?, op, tracked))
    }

    /// Sum over rows (axis 0, giving 1×c) or columns (axis 1, giving r×1).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Joins matrices along rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let (r0, c0) = self.value(first).dims();
        for &p in &parts[1..] {
            let (r, c) = self.value(p).dims();
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let t = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        let tracked = self.tracked(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), tracked))
    }

    /// Stacks the listed rows of `a`; indices may repeat.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!(
                "select_rows: row {bad} out of range for {r} rows"
            )));
        }
        if rows.is_empty() {
            return Err(Error::Invalid("select_rows: empty selection".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::SelectRows(a, rows.to_vec()), tracked))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.select_rows(a, &[r])
    }

    /// Picks entries by `(row, col)` into a 1×k row.
    pub fn gather(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        if at.is_empty() {
            return Err(Error::Invalid("gather: empty selection".into()));
        }
        let mut flat = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(Error::Invalid(format!(
                    "gather: ({i}, {j}) out of range for {r}x{c}"
                )));
            }
            flat.push(i * c + j);
        }
        let data = flat.iter().map(|&k| t.data()[k]).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::row(data), Op::Gather(a, flat), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let tracked = self.tracked(&[a]);
        self.push(t, Op::Transpose(a), tracked)
    }

    fn softmax_axis(&self, a: Var, axis: usize) -> Result<bool> {
        let t = self.value(a);
        match (t.shape().len(), axis) {
            (1, 0) | (2, 1) => Ok(true),
            (2, 0) => Ok(false),
            _ => Err(Error::Invalid(format!(
                "softmax axis {axis} invalid for shape {:?}",
                t.shape()
            ))),
        }
    }

    /// Softmax along `axis` (0 or 1 for matrices, 0 for rank-1).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let along_row = self.softmax_axis(a, axis)?;
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut out = t.data().to_vec();
        for (off, stride, len) in groups(r, c, along_row) {
            let m = (0..len)
                .map(|k| out[off + k * stride])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (out[off + k * stride] - m).exp();
                out[off + k * stride] = e;
                z += e;
            }
            for k in 0..len {
                out[off + k * stride] /= z;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::Softmax(a, along_row), tracked))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let axis = self.shape(a).len() - 1;
        self.softmax(a, axis).expect("last axis is valid")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let along_row = self.softmax_axis(a, axis)?;
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut out = t.data().to_vec();
        for (off, stride, len) in groups(r, c, along_row) {
            let m = (0..len)
                .map(|k| out[off + k * stride])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..len)
                .map(|k| (out[off + k * stride] - m).exp())
                .sum::<f64>()
                .ln();
            for k in 0..len {
                out[off + k * stride] -= lse;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::LogSoftmax(a, along_row), tracked))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut norms = Vec::with_capacity(r);
        let mut out = t.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::Domain {
                    op: "normalize_rows",
                    detail: format!("row {i} has zero norm"),
                });
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::NormalizeRows(a, norms), tracked))
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    /// Scalar whose forward value is `hard` but whose gradient is that of
    /// `Σ coeffs[i] · soft[i]`.
    pub fn straight_through(&mut self, soft: Var, coeffs: &[f64], hard: f64) -> Result<Var> {
        let t = self.value(soft);
        if t.len() != coeffs.len() {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: t.shape().to_vec(),
                rhs: vec![coeffs.len()],
            });
        }
        let value = if self.soft_surrogate {
            t.data().iter().zip(coeffs).map(|(p, c)| p * c).sum()
        } else {
            hard
        };
        let tracked = self.tracked(&[soft]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::StraightThrough(soft, coeffs.to_vec()),
            tracked,
        ))
    }

    /// Reverse sweep from a scalar, tracked `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let node = self.node(loss);
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.tracked {
            return Err(Error::Backward("loss is not tape-tracked".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Backward(format!(
                        "non-finite gradient {bad} through {}",
                        n.op.kind()
                    )));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (m, k) = ta.dims();
                let n = tb.cols();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[r * n + c] * tb.data()[p * n + c];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            let grow = &g[r * n..(r + 1) * n];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (rows, cols) = out.dims();
                let (ar, ac) = ta.dims();
                let (br, bc) = tb.dims();
                let ia = |i: usize, j: usize| {
                    (if ar == 1 { 0 } else { i }) * ac + if ac == 1 { 0 } else { j }
                };
                let ib = |i: usize, j: usize| {
                    (if br == 1 { 0 } else { i }) * bc + if bc == 1 { 0 } else { j }
                };
                let (ad, bd) = (ta.data(), tb.data());
                acc(*a, &mut |ga| {
                    for i in 0..rows {
                        for j in 0..cols {
                            let gv = g[i * cols + j];
                            ga[ia(i, j)] += match kind {
                                Binary::Add | Binary::Sub => gv,
                                Binary::Mul => gv * bd[ib(i, j)],
                                Binary::Div => gv / bd[ib(i, j)],
                            };
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..rows {
                        for j in 0..cols {
                            let gv = g[i * cols + j];
                            let y = bd[ib(i, j)];
                            gb[ib(i, j)] += match kind {
                                Binary::Add => gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * ad[ia(i, j)],
                                Binary::Div => -gv * ad[ia(i, j)] / (y * y),
                            };
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * c)
            }),
            Op::AddScalar(a) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(o, gv)| *o += gv)
            }),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let n = ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += g[0] / n)
            }),
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (r, c) = nodes[a.0].value.dims();
                let div = match (&nodes[i].op, axis) {
                    (Op::MeanAxis(..), 0) => r as f64,
                    (Op::MeanAxis(..), _) => c as f64,
                    _ => 1.0,
                };
                acc(*a, &mut |ga| {
                    for row in 0..r {
                        for col in 0..c {
                            let gv = if *axis == 0 { g[col] } else { g[row] };
                            ga[row * c + col] += gv / div;
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (_, total_cols) = out.dims();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = nodes[p.0].value.dims();
                    acc(*p, &mut |gp| {
                        if *axis == 0 {
                            for (o, gv) in gp.iter_mut().zip(&g[offset * c..(offset + r) * c]) {
                                *o += gv;
                            }
                        } else {
                            for row in 0..r {
                                for col in 0..c {
                                    gp[row * c + col] += g[row * total_cols + offset + col];
                                }
                            }
                        }
                    });
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::SelectRows(a, rows) => {
                let c = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        for col in 0..c {
                            ga[r * c + col] += g[k * c + col];
                        }
                    }
                });
            }
            Op::Gather(a, flat) => acc(*a, &mut |ga| {
                for (k, &f) in flat.iter().enumerate() {
                    ga[f] += g[k];
                }
            }),
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims();
                acc(*a, &mut |ga| {
                    for row in 0..r {
                        for col in 0..c {
                            ga[row * c + col] += g[col * r + row];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * (1.0 - y * y);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y;
                }
            }),
            Op::Relu(a) | Op::Log(a) | Op::Square(a) | Op::Softplus(a) => {
                let x = nodes[a.0].value.data();
                let op = &nodes[i].op;
                acc(*a, &mut |ga| {
                    for ((o, gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += gv
                            * match op {
                                Op::Relu(_) => {
                                    if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Op::Log(_) => 1.0 / xv,
                                Op::Square(_) => 2.0 * xv,
                                _ => sigmoid(xv),
                            };
                    }
                });
            }
            Op::Softmax(a, along_row) => {
                let (r, c) = out.dims();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for (off, stride, len) in groups(r, c, *along_row) {
                        let dot: f64 = (0..len)
                            .map(|k| g[off + k * stride] * y[off + k * stride])
                            .sum();
                        for k in 0..len {
                            let idx = off + k * stride;
                            ga[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a, along_row) => {
                let (r, c) = out.dims();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for (off, stride, len) in groups(r, c, *along_row) {
                        let gs: f64 = (0..len).map(|k| g[off + k * stride]).sum();
                        for k in 0..len {
                            let idx = off + k * stride;
                            ga[idx] += g[idx] - y[idx].exp() * gs;
                        }
                    }
                });
            }
            Op::NormalizeRows(a, norms) => {
                let (r, c) = out.dims();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for row in 0..r {
                        let s = row * c;
                        let dot: f64 = (0..c).map(|k| y[s + k] * g[s + k]).sum();
                        for k in 0..c {
                            ga[s + k] += (g[s + k] - y[s + k] * dot) / norms[row];
                        }
                    }
                });
            }
            Op::StraightThrough(soft, coeffs) => acc(*soft, &mut |gs| {
                for (o, c) in gs.iter_mut().zip(coeffs) {
                    *o += g[0] * c;
                }
            }),
        }
    }

    /// Adds the gradients of parameter-bound leaves into `store`.
    ///
    /// Calling this after several recordings accumulates their gradients.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        if !self.consumed {
            return Err(Error::Backward(
                "accumulate_into called before backward".into(),
            ));
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.add_grad(id, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let id = g.constant(Tensor::eye(3));
        let x = Tensor::matrix(3, 2, vec![1., -2., 3., 4., 0.5, 6.]).unwrap();
        let xv = g.constant(x.clone());
        let y = g.matmul(id, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 1.0, 1.0]));
        let y = g.softmax(x, 1).unwrap();
        assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, c).unwrap_err().to_string();
        assert!(msg.contains("add"), "{msg}");
    }

    #[test]
    fn log_and_div_domain_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
        let one = g.scalar(1.0);
        assert!(matches!(g.div(one, a), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4], vec![1., 2., 3., 4.]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1., 2.]).unwrap());
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_stale() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1., 2.]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::Backward(_))));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::StaleTape)));
        g.clear();
        assert!(g.is_empty());
    }

    #[test]
    fn untracked_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1., 2.]));
        let s = g.sum(x);
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[3, 2]));
        let b = g.leaf(Tensor::row(vec![1.0, 2.0]));
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
        assert_eq!(g.value(c).shape(), &[3, 2]);
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::row(vec![0.2, 0.3, 0.5]));
        let st = g.straight_through(p, &[0.0, 0.5, 1.0], 0.5).unwrap();
        assert_eq!(g.item(st), 0.5);
        g.backward(st).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 0.5, 1.0]);

        let mut soft = Graph::new().with_soft_surrogate(true);
        let p = soft.leaf(Tensor::row(vec![0.2, 0.3, 0.5]));
        let st = soft.straight_through(p, &[0.0, 0.5, 1.0], 0.5).unwrap();
        assert!((soft.item(st) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn column_softmax_sums_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0., 5.]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let t = g.value(y);
        for c in 0..3 {
            assert!((t.at(0, c) + t.at(1, c) - 1.0).abs() < 1e-12);
        }
        assert!(g.softmax(x, 2).is_err());
    }
}
