//! Reverse-mode differentiation restricted to registered trainables.
//!
//! Values are either constants or nodes on a [`Tape`]. An operation whose
//! inputs are all constants evaluates eagerly and records nothing, so a
//! forward pass through the frozen backbone with no adapters bound builds
//! no graph at all. Gradients exist only for nodes, and reach leaves
//! created through [`Tape::leaf`].

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{fmt_shape, matmul, matmul_at, matmul_bt, Tensor};

thread_local! {
    static PARAM_CONSTRUCTIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`TrainableParam`] values constructed on this thread.
/// Instrumentation hook: static inference paths must not advance it.
pub fn param_constructions() -> u64 {
    PARAM_CONSTRUCTIONS.with(Cell::get)
}

/// Named tensor with a gradient buffer of the same shape.
#[derive(Debug, Clone)]
pub struct TrainableParam {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl TrainableParam {
    pub fn new(id: impl Into<String>, value: Tensor) -> TrainableParam {
        PARAM_CONSTRUCTIONS.with(|c| c.set(c.get() + 1));
        let grad = Tensor::zeros(value.shape().to_vec());
        TrainableParam {
            id: id.into(),
            value,
            grad,
        }
    }
}

/// Ordered set of trainables with unique ids.
#[derive(Debug, Default)]
pub struct ParamSet {
    items: Vec<TrainableParam>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn register(&mut self, param: TrainableParam) -> Result<()> {
        if self.index.contains_key(&param.id) {
            return Err(Error::DuplicateParam(param.id));
        }
        self.index.insert(param.id.clone(), self.items.len());
        self.items.push(param);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TrainableParam> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TrainableParam> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, TrainableParam> {
        self.items.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    fn add_grad(&mut self, id: &str, g: &Tensor) -> Result<()> {
        let i = *self.index.get(id).ok_or_else(|| {
            Error::Internal(format!("gradient for unregistered parameter '{id}'"))
        })?;
        self.items[i].grad.add_assign(g)?;
        Ok(())
    }
}

/// A tensor in a differentiable computation: a constant or a tape node.
#[derive(Debug, Clone)]
pub enum Value {
    Const(Arc<Tensor>),
    Node(usize),
}

impl Value {
    pub fn is_tracked(&self) -> bool {
        matches!(self, Value::Node(_))
    }
}

#[derive(Clone)]
enum Arg {
    Const(Arc<Tensor>),
    Node(usize),
}

enum Op {
    Leaf(String),
    Add(Arg, Arg),
    Mul(Arg, Arg),
    Scale(Arg, f64),
    MatMul(Arg, Arg),
    MatMulBt(Arg, Arg),
    AddRowBroadcast(Arg, Arg),
    MulRowBroadcast(Arg, Arg),
    SoftmaxRows(Arg, f64),
    L2NormRows(Arg),
    LayerNorm {
        x: Arg,
        gamma: Arg,
        beta: Arg,
        eps: f64,
    },
    Gelu(Arg),
    SliceCols(Arg, usize, usize),
    ConcatCols(Vec<Arg>),
    ConcatRows(Vec<Arg>),
    SumLastAxis(Arg),
    PermuteRows(Arg, Vec<usize>),
    Mse(Arg, Arg),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Append-only computation record; node order is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_ids: RefCell<HashSet<String>>,
    spent: Cell<bool>,
}

const GELU_COEFF: f64 = 0.044715;

fn gelu_forward(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, cols) = x.row_view();
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm: x {} gamma {} beta {}",
            fmt_shape(x.shape()),
            fmt_shape(gamma.shape()),
            fmt_shape(beta.shape())
        )));
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            out[r * cols + j] = (row[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out))
}

fn reshape_like(t: Tensor, reference: &Tensor) -> Tensor {
    t.reshaped(reference.shape().to_vec())
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn constant(t: Tensor) -> Value {
        Value::Const(Arc::new(t))
    }

    pub fn constant_arc(t: Arc<Tensor>) -> Value {
        Value::Const(t)
    }

    /// Registers a trainable leaf. Ids must be unique per tape.
    pub fn leaf(&self, id: &str, value: &Tensor) -> Result<Value> {
        if !self.leaf_ids.borrow_mut().insert(id.to_string()) {
            return Err(Error::DuplicateParam(id.to_string()));
        }
        Ok(self.push(value.clone(), Op::Leaf(id.to_string())))
    }

    /// Snapshot of the tensor behind a value.
    pub fn tensor(&self, v: &Value) -> Arc<Tensor> {
        match v {
            Value::Const(t) => t.clone(),
            Value::Node(i) => self.nodes.borrow()[*i].value.clone(),
        }
    }

    /// Detached copy; gradients never flow through the result.
    pub fn detach(&self, v: &Value) -> Tensor {
        (*self.tensor(v)).clone()
    }

    fn arg(&self, v: &Value) -> Arg {
        match v {
            Value::Const(t) => Arg::Const(t.clone()),
            Value::Node(i) => Arg::Node(*i),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Value::Node(nodes.len() - 1)
    }

    fn emit(&self, value: Tensor, tracked: bool, op: impl FnOnce(&Tape) -> Op) -> Value {
        if tracked {
            let op = op(self);
            self.push(value, op)
        } else {
            Tape::constant(value)
        }
    }

    pub fn add(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = self.tensor(a).add(&self.tensor(b))?;
        Ok(self.emit(out, a.is_tracked() || b.is_tracked(), |t| {
            Op::Add(t.arg(a), t.arg(b))
        }))
    }

    pub fn mul(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = self.tensor(a).mul(&self.tensor(b))?;
        Ok(self.emit(out, a.is_tracked() || b.is_tracked(), |t| {
            Op::Mul(t.arg(a), t.arg(b))
        }))
    }

    pub fn scale(&self, a: &Value, c: f64) -> Result<Value> {
        let out = self.tensor(a).scale(c);
        Ok(self.emit(out, a.is_tracked(), |t| Op::Scale(t.arg(a), c)))
    }

    pub fn matmul(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = matmul(&self.tensor(a), &self.tensor(b))?;
        Ok(self.emit(out, a.is_tracked() || b.is_tracked(), |t| {
            Op::MatMul(t.arg(a), t.arg(b))
        }))
    }

    /// a . transpose(b)
    pub fn matmul_bt(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = matmul_bt(&self.tensor(a), &self.tensor(b))?;
        Ok(self.emit(out, a.is_tracked() || b.is_tracked(), |t| {
            Op::MatMulBt(t.arg(a), t.arg(b))
        }))
    }

    /// Adds a length-n bias to every row of an [m x n] matrix.
    pub fn add_row_broadcast(&self, a: &Value, bias: &Value) -> Result<Value> {
        let av = self.tensor(a);
        let bv = self.tensor(bias);
        let (rows, cols) = av.row_view();
        if bv.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "add_row_broadcast: {} vs bias {}",
                fmt_shape(av.shape()),
                fmt_shape(bv.shape())
            )));
        }
        let mut out = av.data().to_vec();
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] += bv.data()[j];
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out);
        Ok(self.emit(out, a.is_tracked() || bias.is_tracked(), |t| {
            Op::AddRowBroadcast(t.arg(a), t.arg(bias))
        }))
    }

    /// Multiplies every row of an [m x n] matrix by a length-n vector.
    pub fn mul_row_broadcast(&self, a: &Value, b: &Value) -> Result<Value> {
        let av = self.tensor(a);
        let bv = self.tensor(b);
        let (rows, cols) = av.row_view();
        if bv.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "mul_row_broadcast: {} vs {}",
                fmt_shape(av.shape()),
                fmt_shape(bv.shape())
            )));
        }
        let mut out = av.data().to_vec();
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] *= bv.data()[j];
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out);
        Ok(self.emit(out, a.is_tracked() || b.is_tracked(), |t| {
            Op::MulRowBroadcast(t.arg(a), t.arg(b))
        }))
    }

    pub fn softmax_rows(&self, a: &Value, tau: f64) -> Result<Value> {
        let out = crate::numerics::tensor::softmax(&self.tensor(a), tau)?;
        Ok(self.emit(out, a.is_tracked(), |t| Op::SoftmaxRows(t.arg(a), tau)))
    }

    pub fn l2_normalize_rows(&self, a: &Value) -> Result<Value> {
        let out = crate::numerics::tensor::l2_normalize_rows(&self.tensor(a));
        Ok(self.emit(out, a.is_tracked(), |t| Op::L2NormRows(t.arg(a))))
    }

    pub fn layer_norm(&self, x: &Value, gamma: &Value, beta: &Value, eps: f64) -> Result<Value> {
        let out = layer_norm_forward(
            &self.tensor(x),
            &self.tensor(gamma),
            &self.tensor(beta),
            eps,
        )?;
        let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        Ok(self.emit(out, tracked, |t| Op::LayerNorm {
            x: t.arg(x),
            gamma: t.arg(gamma),
            beta: t.arg(beta),
            eps,
        }))
    }

    pub fn gelu(&self, a: &Value) -> Result<Value> {
        let out = self.tensor(a).map(gelu_forward);
        Ok(self.emit(out, a.is_tracked(), |t| Op::Gelu(t.arg(a))))
    }

    pub fn slice_cols(&self, a: &Value, start: usize, len: usize) -> Result<Value> {
        let av = self.tensor(a);
        let (rows, cols) = av.dims2()?;
        if start + len > cols {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols {start}..{} out of {cols}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], out);
        Ok(self.emit(out, a.is_tracked(), |t| Op::SliceCols(t.arg(a), start, len)))
    }

    pub fn concat_cols(&self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let tensors: Vec<Arc<Tensor>> = parts.iter().map(|p| self.tensor(p)).collect();
        let (rows, _) = tensors[0].dims2()?;
        let mut widths = Vec::with_capacity(tensors.len());
        for t in &tensors {
            let (r, c) = t.dims2()?;
            if r != rows {
                return Err(Error::ShapeMismatch(
                    "concat_cols: row counts differ".into(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (t, &c) in tensors.iter().zip(widths.iter()) {
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], out);
        let tracked = parts.iter().any(Value::is_tracked);
        Ok(self.emit(out, tracked, |t| {
            Op::ConcatCols(parts.iter().map(|p| t.arg(p)).collect())
        }))
    }

    /// Stacks parts along rows; rank-1 parts count as single rows.
    pub fn concat_rows(&self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let tensors: Vec<Arc<Tensor>> = parts.iter().map(|p| self.tensor(p)).collect();
        let (_, cols) = tensors[0].row_view();
        let mut total_rows = 0;
        for t in &tensors {
            let (r, c) = t.row_view();
            if c != cols {
                return Err(Error::ShapeMismatch("concat_rows: widths differ".into()));
            }
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for t in &tensors {
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![total_rows, cols], out);
        let tracked = parts.iter().any(Value::is_tracked);
        Ok(self.emit(out, tracked, |t| {
            Op::ConcatRows(parts.iter().map(|p| t.arg(p)).collect())
        }))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last_axis(&self, a: &Value) -> Result<Value> {
        let av = self.tensor(a);
        if av.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (rows, cols) = av.row_view();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            out.push(av.data()[r * cols..(r + 1) * cols].iter().sum());
        }
        let shape: Vec<usize> = av.shape()[..av.shape().len().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, out);
        Ok(self.emit(out, a.is_tracked(), |t| Op::SumLastAxis(t.arg(a))))
    }

    /// Reorders the rows of an [n x c] matrix: out[i] = a[perm[i]].
    pub fn permute_rows(&self, a: &Value, perm: Vec<usize>) -> Result<Value> {
        let av = self.tensor(a);
        let (rows, cols) = av.dims2()?;
        if perm.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "permute_rows: {} indices for {rows} rows",
                perm.len()
            )));
        }
        let mut seen = vec![false; rows];
        for &p in &perm {
            if p >= rows || seen[p] {
                return Err(Error::Internal("permute_rows: not a permutation".into()));
            }
            seen[p] = true;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &src in &perm {
            out.extend_from_slice(&av.data()[src * cols..(src + 1) * cols]);
        }
        let out = Tensor::new(vec![rows, cols], out);
        Ok(self.emit(out, a.is_tracked(), |t| Op::PermuteRows(t.arg(a), perm)))
    }

    /// Mean squared error as a scalar node.
    pub fn mse_loss(&self, a: &Value, b: &Value) -> Result<Value> {
        let out = crate::numerics::tensor::mse(&self.tensor(a), &self.tensor(b))?;
        Ok(
            self.emit(Tensor::scalar(out), a.is_tracked() || b.is_tracked(), |t| {
                Op::Mse(t.arg(a), t.arg(b))
            }),
        )
    }

    /// Propagates d(loss)/d(leaf) into `params`. Leaves not reached by the
    /// graph keep zero gradients. A second call without a fresh forward
    /// pass fails with [`Error::StaleGraph`].
    pub fn backward(&self, loss: &Value, params: &mut ParamSet) -> Result<()> {
        if self.spent.replace(true) {
            return Err(Error::StaleGraph);
        }
        params.zero_grads();
        let root = match loss {
            Value::Const(_) => return Ok(()),
            Value::Node(i) => *i,
        };
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got {}",
                fmt_shape(nodes[root].value.shape())
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::new(nodes[root].value.shape().to_vec(), vec![1.0]));

        let value_of = |arg: &Arg| -> Arc<Tensor> {
            match arg {
                Arg::Const(t) => t.clone(),
                Arg::Node(j) => nodes[*j].value.clone(),
            }
        };

        fn accumulate(grads: &mut [Option<Tensor>], arg: &Arg, delta: Tensor) -> Result<()> {
            if let Arg::Node(j) = arg {
                match &mut grads[*j] {
                    Some(t) => t.add_assign(&delta)?,
                    slot @ None => *slot = Some(delta),
                }
            }
            Ok(())
        }

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf(id) => params.add_grad(id, &g)?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, reshape_like(g.clone(), &value_of(a)))?;
                    accumulate(&mut grads, b, reshape_like(g, &value_of(b)))?;
                }
                Op::Mul(a, b) => {
                    let av = value_of(a);
                    let bv = value_of(b);
                    accumulate(&mut grads, a, g.mul(&bv)?)?;
                    accumulate(&mut grads, b, g.mul(&av)?)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.scale(*c))?,
                Op::MatMul(a, b) => {
                    let av = value_of(a);
                    let bv = value_of(b);
                    accumulate(&mut grads, a, matmul_bt(&g, &bv)?)?;
                    accumulate(&mut grads, b, matmul_at(&av, &g)?)?;
                }
                Op::MatMulBt(a, b) => {
                    let av = value_of(a);
                    let bv = value_of(b);
                    accumulate(&mut grads, a, matmul(&g, &bv)?)?;
                    accumulate(&mut grads, b, matmul_at(&g, &av)?)?;
                }
                Op::AddRowBroadcast(a, bias) => {
                    let bv = value_of(bias);
                    let (rows, cols) = g.row_view();
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for (acc, &gv) in db.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *acc += gv;
                        }
                    }
                    accumulate(&mut grads, a, g)?;
                    accumulate(
                        &mut grads,
                        bias,
                        reshape_like(Tensor::new(vec![cols], db), &bv),
                    )?;
                }
                Op::MulRowBroadcast(a, b) => {
                    let av = value_of(a);
                    let bv = value_of(b);
                    let (rows, cols) = g.row_view();
                    let mut da = vec![0.0; rows * cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            let gij = g.data()[r * cols + j];
                            da[r * cols + j] = gij * bv.data()[j];
                            db[j] += gij * av.data()[r * cols + j];
                        }
                    }
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), da))?;
                    accumulate(
                        &mut grads,
                        b,
                        reshape_like(Tensor::new(vec![cols], db), &bv),
                    )?;
                }
                Op::SoftmaxRows(a, tau) => {
                    let y = &node.value;
                    let (rows, cols) = y.row_view();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = yr[j] * (gr[j] - dot) / tau;
                        }
                    }
                    let av = value_of(a);
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), dx))?;
                }
                Op::L2NormRows(a) => {
                    let av = value_of(a);
                    let y = &node.value;
                    let (rows, cols) = av.row_view();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xr = &av.data()[r * cols..(r + 1) * cols];
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), dx))?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let xv = value_of(x);
                    let gv = value_of(gamma);
                    let (rows, cols) = xv.row_view();
                    let mut dx = vec![0.0; rows * cols];
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let xr = &xv.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat and the two row means of the standard formula
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; cols];
                        let mut xhat = vec![0.0; cols];
                        for j in 0..cols {
                            xhat[j] = (xr[j] - mean) * inv;
                            dxhat[j] = gr[j] * gv.data()[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                        }
                        let m1 = sum_dxhat / cols as f64;
                        let m2 = sum_dxhat_xhat / cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] = (dxhat[j] - m1 - xhat[j] * m2) * inv;
                        }
                    }
                    accumulate(&mut grads, x, Tensor::new(xv.shape().to_vec(), dx))?;
                    let gvref = value_of(gamma);
                    accumulate(
                        &mut grads,
                        gamma,
                        reshape_like(Tensor::new(vec![cols], dgamma), &gvref),
                    )?;
                    let bvref = value_of(beta);
                    accumulate(
                        &mut grads,
                        beta,
                        reshape_like(Tensor::new(vec![cols], dbeta), &bvref),
                    )?;
                }
                Op::Gelu(a) => {
                    let av = value_of(a);
                    let dx: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&x, &gv)| gv * gelu_derivative(x))
                        .collect();
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), dx))?;
                }
                Op::SliceCols(a, start, len) => {
                    let av = value_of(a);
                    let (rows, cols) = av.dims2()?;
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..*len {
                            da[r * cols + start + j] = g.data()[r * len + j];
                        }
                    }
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), da))?;
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = g.dims2()?;
                    let mut offset = 0;
                    for part in parts {
                        let pv = value_of(part);
                        let (_, c) = pv.dims2()?;
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        accumulate(&mut grads, part, Tensor::new(pv.shape().to_vec(), dp))?;
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let (_, cols) = g.dims2()?;
                    let mut offset = 0;
                    for part in parts {
                        let pv = value_of(part);
                        let (r, _) = pv.row_view();
                        let dp = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        accumulate(&mut grads, part, Tensor::new(pv.shape().to_vec(), dp))?;
                        offset += r;
                    }
                }
                Op::SumLastAxis(a) => {
                    let av = value_of(a);
                    let (rows, cols) = av.row_view();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = g.data()[r];
                        for j in 0..cols {
                            da[r * cols + j] = gr;
                        }
                    }
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), da))?;
                }
                Op::PermuteRows(a, perm) => {
                    let av = value_of(a);
                    let (rows, cols) = av.dims2()?;
                    let mut da = vec![0.0; rows * cols];
                    for (i, &src) in perm.iter().enumerate() {
                        for j in 0..cols {
                            da[src * cols + j] += g.data()[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), da))?;
                }
                Op::Mse(a, b) => {
                    let av = value_of(a);
                    let bv = value_of(b);
                    let scale = 2.0 * g.item() / av.len() as f64;
                    let da: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data().iter())
                        .map(|(&x, &y)| scale * (x - y))
                        .collect();
                    let db: Vec<f64> = da.iter().map(|&d| -d).collect();
                    accumulate(&mut grads, a, Tensor::new(av.shape().to_vec(), da))?;
                    accumulate(&mut grads, b, Tensor::new(bv.shape().to_vec(), db))?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{central_difference, max_relative_error};
    use crate::numerics::rng::RandomStream;

    #[test]
    fn mse_gradient_of_scalar() {
        // loss = mse(p, 0) with p = 3 -> dl/dp = 2*3/1 = 6
        let mut params = ParamSet::new();
        params
            .register(TrainableParam::new("p", Tensor::scalar(3.0)))
            .unwrap();
        let tape = Tape::new();
        let p = tape.leaf("p", &params.get("p").unwrap().value).unwrap();
        let zero = Tape::constant(Tensor::scalar(0.0));
        let loss = tape.mse_loss(&p, &zero).unwrap();
        assert_eq!(tape.tensor(&loss).item(), 9.0);
        tape.backward(&loss, &mut params).unwrap();
        assert_eq!(params.get("p").unwrap().grad.item(), 6.0);
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut params = ParamSet::new();
        params
            .register(TrainableParam::new("unused", Tensor::scalar(1.0)))
            .unwrap();
        params
            .register(TrainableParam::new("used", Tensor::scalar(2.0)))
            .unwrap();
        let tape = Tape::new();
        let _unused = tape
            .leaf("unused", &params.get("unused").unwrap().value)
            .unwrap();
        let used = tape
            .leaf("used", &params.get("used").unwrap().value)
            .unwrap();
        let loss = tape
            .mse_loss(&used, &Tape::constant(Tensor::scalar(0.0)))
            .unwrap();
        tape.backward(&loss, &mut params).unwrap();
        assert_eq!(params.get("unused").unwrap().grad.item(), 0.0);
        assert_eq!(params.get("used").unwrap().grad.item(), 4.0);
    }

    #[test]
    fn second_backward_is_stale() {
        let mut params = ParamSet::new();
        params
            .register(TrainableParam::new("p", Tensor::scalar(1.0)))
            .unwrap();
        let tape = Tape::new();
        let p = tape.leaf("p", &params.get("p").unwrap().value).unwrap();
        let loss = tape
            .mse_loss(&p, &Tape::constant(Tensor::scalar(0.0)))
            .unwrap();
        tape.backward(&loss, &mut params).unwrap();
        let err = tape.backward(&loss, &mut params).unwrap_err();
        assert!(matches!(err, Error::StaleGraph));
    }

    #[test]
    fn duplicate_leaf_rejected() {
        let tape = Tape::new();
        tape.leaf("w", &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.leaf("w", &Tensor::scalar(2.0)).unwrap_err(),
            Error::DuplicateParam(_)
        ));
    }

    #[test]
    fn const_only_ops_record_nothing() {
        let tape = Tape::new();
        let a = Tape::constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = Tape::constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(&a, &b).unwrap();
        assert!(!c.is_tracked());
        assert_eq!(tape.nodes.borrow().len(), 0);
    }

    /// Runs the same composite graph as a function of the flat parameter
    /// vector so central differences can probe it.
    fn composite_loss(x: &[f64], shape: &[usize], w: &Tensor, target: &Tensor, tau: f64) -> f64 {
        let tape = Tape::new();
        let p = tape
            .leaf("p", &Tensor::new(shape.to_vec(), x.to_vec()))
            .unwrap();
        let wv = Tape::constant(w.clone());
        let h = tape.matmul(&p, &wv).unwrap();
        let h = tape.gelu(&h).unwrap();
        let h = tape.softmax_rows(&h, tau).unwrap();
        let h = tape.l2_normalize_rows(&h).unwrap();
        let t = Tape::constant(target.clone());
        tape.tensor(&tape.mse_loss(&h, &t).unwrap()).item()
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(7);
        for trial in 0..5 {
            let (m, k, n) = (2 + trial % 2, 3, 2 + trial % 3);
            let x = Tensor::new(vec![m, k], rng.fill_normal(m * k, 1.0));
            let w = Tensor::new(vec![k, n], rng.fill_normal(k * n, 1.0));
            let target = Tensor::new(vec![m, n], rng.fill_normal(m * n, 0.5));
            let tau = 0.7;

            let mut params = ParamSet::new();
            params
                .register(TrainableParam::new("p", x.clone()))
                .unwrap();
            let tape = Tape::new();
            let p = tape.leaf("p", &x).unwrap();
            let wv = Tape::constant(w.clone());
            let h = tape.matmul(&p, &wv).unwrap();
            let h = tape.gelu(&h).unwrap();
            let h = tape.softmax_rows(&h, tau).unwrap();
            let h = tape.l2_normalize_rows(&h).unwrap();
            let t = Tape::constant(target.clone());
            let loss = tape.mse_loss(&h, &t).unwrap();
            tape.backward(&loss, &mut params).unwrap();
            let analytic = params.get("p").unwrap().grad.data().to_vec();

            let shape = vec![m, k];
            let mut f = |v: &[f64]| composite_loss(v, &shape, &w, &target, tau);
            let numeric = central_difference(&mut f, x.data(), 1e-5);
            let err = max_relative_error(&analytic, &numeric, 1e-10);
            assert!(err < 1e-6, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(11);
        let (m, n) = (3, 5);
        let x = Tensor::new(vec![m, n], rng.fill_normal(m * n, 1.0));
        let gamma = Tensor::new(
            vec![n],
            rng.fill_normal(n, 0.3).iter().map(|v| 1.0 + v).collect(),
        );
        let beta = Tensor::new(vec![n], rng.fill_normal(n, 0.3));
        let target = Tensor::new(vec![m, n], rng.fill_normal(m * n, 1.0));

        let run = |xv: &[f64]| -> f64 {
            let tape = Tape::new();
            let p = tape
                .leaf("x", &Tensor::new(vec![m, n], xv.to_vec()))
                .unwrap();
            let y = tape
                .layer_norm(
                    &p,
                    &Tape::constant(gamma.clone()),
                    &Tape::constant(beta.clone()),
                    1e-5,
                )
                .unwrap();
            tape.tensor(&tape.mse_loss(&y, &Tape::constant(target.clone())).unwrap())
                .item()
        };

        let mut params = ParamSet::new();
        params
            .register(TrainableParam::new("x", x.clone()))
            .unwrap();
        let tape = Tape::new();
        let p = tape.leaf("x", &x).unwrap();
        let y = tape
            .layer_norm(
                &p,
                &Tape::constant(gamma.clone()),
                &Tape::constant(beta.clone()),
                1e-5,
            )
            .unwrap();
        let loss = tape.mse_loss(&y, &Tape::constant(target.clone())).unwrap();
        tape.backward(&loss, &mut params).unwrap();
        let analytic = params.get("x").unwrap().grad.data().to_vec();

        let mut f = |v: &[f64]| run(v);
        let numeric = central_difference(&mut f, x.data(), 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-10);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn permute_and_slice_gradients_match_finite_differences() {
        let mut rng = RandomStream::new(13);
        let (m, n) = (4, 6);
        let x = Tensor::new(vec![m, n], rng.fill_normal(m * n, 1.0));
        let target = Tensor::new(vec![m, 3], rng.fill_normal(m * 3, 1.0));
        let perm = vec![2, 0, 3, 1];

        let run = |xv: &[f64]| -> f64 {
            let tape = Tape::new();
            let p = tape
                .leaf("x", &Tensor::new(vec![m, n], xv.to_vec()))
                .unwrap();
            let h = tape.permute_rows(&p, perm.clone()).unwrap();
            let a = tape.slice_cols(&h, 0, 3).unwrap();
            let b = tape.slice_cols(&h, 3, 3).unwrap();
            let s = tape.add(&a, &b).unwrap();
            tape.tensor(&tape.mse_loss(&s, &Tape::constant(target.clone())).unwrap())
                .item()
        };

        let mut params = ParamSet::new();
        params
            .register(TrainableParam::new("x", x.clone()))
            .unwrap();
        let tape = Tape::new();
        let p = tape.leaf("x", &x).unwrap();
        let h = tape.permute_rows(&p, perm.clone()).unwrap();
        let a = tape.slice_cols(&h, 0, 3).unwrap();
        let b = tape.slice_cols(&h, 3, 3).unwrap();
        let s = tape.add(&a, &b).unwrap();
        let loss = tape.mse_loss(&s, &Tape::constant(target.clone())).unwrap();
        tape.backward(&loss, &mut params).unwrap();
        let analytic = params.get("x").unwrap().grad.data().to_vec();

        let mut f = |v: &[f64]| run(v);
        let numeric = central_difference(&mut f, x.data(), 1e-5);
        assert!(max_relative_error(&analytic, &numeric, 1e-10) < 1e-6);
    }
}
