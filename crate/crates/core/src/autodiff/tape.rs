use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Clamp bound used before taking logarithms of probabilities.
pub const LOG_CLAMP_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    AddScalar(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    Ln(usize),
    Abs(usize),
    Softplus(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    RowSoftmax(usize),
    LogSoftmax(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    Gather { table: usize, index: Rc<[usize]> },
    PickPerRow { x: usize, cols: Rc<[usize]> },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    OuterDiff(usize),
    GatherCols { x: usize, index: Rc<[usize]> },
    BucketSum { x: usize, index: Rc<[usize]> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation. One tape per training step; a tape supports exactly one
/// backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    consumed: Cell<bool>,
    strict: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Boolean attention mask; `true` entries are excluded from normalisation
/// (equivalent to an additive `-inf`).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    excluded: Rc<[bool]>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, excluded: Vec<bool>) -> Result<Mask> {
        if excluded.len() != rows * cols {
            return Err(Error::shape("mask", format!("{} flags for [{rows}, {cols}]", excluded.len())));
        }
        Ok(Mask { rows, cols, excluded: excluded.into() })
    }

    /// From an additive mask: entries equal to `-inf` are excluded, all others
    /// must be exactly zero.
    pub fn from_additive(additive: &Tensor) -> Result<Mask> {
        let mut flags = Vec::with_capacity(additive.len());
        for &v in additive.data() {
            if v == f64::NEG_INFINITY {
                flags.push(true);
            } else if v == 0.0 {
                flags.push(false);
            } else {
                return Err(Error::Contract(format!("additive mask entry {v} is neither 0 nor -inf")));
            }
        }
        Mask::new(additive.rows(), additive.cols(), flags)
    }

    /// Block-diagonal mask over `blocks` consecutive groups of `size` rows.
    pub fn block_diagonal(blocks: usize, size: usize) -> Mask {
        let n = blocks * size;
        let flags = (0..n * n).map(|k| (k / n) / size != (k % n) / size).collect();
        Mask::new(n, n, flags).expect("sized")
    }

    pub fn is_excluded(&self, r: usize, c: usize) -> bool {
        self.excluded[r * self.cols + c]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.leaves.get(node))
    }

    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, node)| (*p, &self.leaves[node]))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
            strict: false,
        }
    }

    /// A tape on which any non-finite op output is a hard error.
    pub fn strict() -> Tape {
        Tape { strict: true, ..Tape::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_flag(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, "leaf").expect("leaf")
    }

    /// Value excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad: false });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self
            .push(store.get(id).clone(), Op::Param, true, "param")
            .expect("param");
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    pub fn value(&self, var: Var<'_>) -> Rc<Tensor> {
        self.val(var.id)
    }

    /// Reverse pass from a scalar root. Every differentiable leaf receives a
    /// gradient (zeros when it does not influence `loss`).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if nodes[loss.id].value.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, &mut grads, id, g, &mut leaves);
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf | Op::Param) {
                leaves
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        let mut params: Vec<(ParamId, usize)> = self.params.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        params.sort_unstable();
        Ok(Gradients { leaves, params })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor, leaves: &mut HashMap<usize, Tensor>) {
    let y = &nodes[id].value;
    let v = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf | Op::Param => {
            leaves.insert(id, g);
        }
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g.matmul_t(v(*b)).expect("shape"));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, v(*a).t_matmul(&g).expect("shape"));
            }
        }
        Op::MatMulT(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g.matmul(v(*b)).expect("shape"));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, g.t_matmul(v(*a)).expect("shape"));
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(nodes, grads, *b, g.clone());
            accumulate(nodes, grads, *a, g);
        }
        Op::AddRow(a, r) => {
            let mut dr = Tensor::zeros(1, g.cols());
            for i in 0..g.rows() {
                for (d, x) in dr.data_mut().iter_mut().zip(g.row(i)) {
                    *d += x;
                }
            }
            accumulate(nodes, grads, *r, dr);
            accumulate(nodes, grads, *a, g);
        }
        Op::AddScalar(a, s) => {
            accumulate(nodes, grads, *s, Tensor::scalar(g.sum()));
            accumulate(nodes, grads, *a, g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *b, g.map(|x| -x));
            accumulate(nodes, grads, *a, g);
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, g.zip_map(v(*b), |x, y| x * y));
            accumulate(nodes, grads, *b, g.zip_map(v(*a), |x, y| x * y));
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.map(|x| x * c)),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, g.zip_map(y, |gi, s| gi * s * (1.0 - s))),
        Op::Relu(a) => accumulate(nodes, grads, *a, g.zip_map(v(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
        Op::Ln(a) => accumulate(nodes, grads, *a, g.zip_map(v(*a), |gi, x| gi / x)),
        Op::Abs(a) => accumulate(nodes, grads, *a, g.zip_map(v(*a), |gi, x| gi * sign(x))),
        Op::Softplus(a) => accumulate(nodes, grads, *a, g.zip_map(v(*a), |gi, x| gi * sigmoid(x))),
        Op::Clamp { x, lo, hi } => accumulate(
            nodes,
            grads,
            *x,
            g.zip_map(v(*x), |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 }),
        ),
        Op::Sum(a) => {
            let s = g.item().expect("scalar");
            let shape = v(*a).shape();
            accumulate(nodes, grads, *a, Tensor::full(shape[0], shape[1], s));
        }
        Op::Mean(a) => {
            let shape = v(*a).shape();
            let s = g.item().expect("scalar") / (shape[0] * shape[1]) as f64;
            accumulate(nodes, grads, *a, Tensor::full(shape[0], shape[1], s));
        }
        Op::RowSoftmax(x) => {
            let mut dx = Tensor::zeros(y.rows(), y.cols());
            for i in 0..y.rows() {
                let (yr, gr) = (y.row(i), g.row(i));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (d, (yv, gv)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                    *d = yv * (gv - dot);
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LogSoftmax(x) => {
            let mut dx = Tensor::zeros(y.rows(), y.cols());
            for i in 0..y.rows() {
                let gsum: f64 = g.row(i).iter().sum();
                for ((d, yv), gv) in dx.row_mut(i).iter_mut().zip(y.row(i)).zip(g.row(i)) {
                    *d = gv - yv.exp() * gsum;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let rows = v(p).rows();
                let slice = g.data()[offset * g.cols()..(offset + rows) * g.cols()].to_vec();
                accumulate(nodes, grads, p, Tensor::new(rows, g.cols(), slice).expect("sized"));
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let cols = v(p).cols();
                let mut d = Tensor::zeros(g.rows(), cols);
                for i in 0..g.rows() {
                    d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                }
                accumulate(nodes, grads, p, d);
                offset += cols;
            }
        }
        Op::SliceCols { x, start } => {
            let src = v(*x);
            let mut d = Tensor::zeros(src.rows(), src.cols());
            for i in 0..g.rows() {
                d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::Gather { table, index } => {
            let t = v(*table);
            let mut d = Tensor::zeros(t.rows(), t.cols());
            for (r, &src) in index.iter().enumerate() {
                for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                    *dv += gv;
                }
            }
            accumulate(nodes, grads, *table, d);
        }
        Op::PickPerRow { x, cols } => {
            let src = v(*x);
            let mut d = Tensor::zeros(src.rows(), src.cols());
            for (r, &c) in cols.iter().enumerate() {
                d.set(r, c, g.get(r, 0));
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = v(*x);
            let gam = v(*gamma);
            let n = xv.cols();
            let mut dx = Tensor::zeros(xv.rows(), n);
            let mut dgamma = Tensor::zeros(1, n);
            let mut dbeta = Tensor::zeros(1, n);
            let mut xhat = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for i in 0..xv.rows() {
                let (mean, inv_std) = row_moments(xv.row(i), *eps);
                for (k, &xi) in xv.row(i).iter().enumerate() {
                    xhat[k] = (xi - mean) * inv_std;
                    let gi = g.get(i, k);
                    dgamma.data_mut()[k] += gi * xhat[k];
                    dbeta.data_mut()[k] += gi;
                    dxhat[k] = gi * gam.data()[k];
                }
                let sum_d: f64 = dxhat.iter().sum();
                let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let nf = n as f64;
                for k in 0..n {
                    dx.set(i, k, inv_std / nf * (nf * dxhat[k] - sum_d - xhat[k] * sum_dx));
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::OuterDiff(p) => {
            let n = g.rows();
            let mut d = Tensor::zeros(n, 1);
            for i in 0..n {
                for j in 0..n {
                    let gij = g.get(i, j);
                    d.data_mut()[i] += gij;
                    d.data_mut()[j] -= gij;
                }
            }
            accumulate(nodes, grads, *p, d);
        }
        Op::GatherCols { x, index } => {
            let src = v(*x);
            let mut d = Tensor::zeros(src.rows(), src.cols());
            let n = g.cols();
            for i in 0..g.rows() {
                for j in 0..n {
                    let b = index[i * n + j];
                    let cur = d.get(i, b);
                    d.set(i, b, cur + g.get(i, j));
                }
            }
            accumulate(nodes, grads, *x, d);
        }
        Op::BucketSum { x, index } => {
            let src = v(*x);
            let mut d = Tensor::zeros(src.rows(), src.cols());
            for i in 0..src.rows() {
                for j in 0..src.cols() {
                    d.set(i, j, g.get(i, index[i * src.cols() + j]));
                }
            }
            accumulate(nodes, grads, *x, d);
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_flag(self.id)
    }

    /// Copy of this value with no gradient connection.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        self.tape.push(value, op, self.requires_grad(), name)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg, name)
    }

    fn expect_same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        self.binary(other, out, Op::MatMul(self.id, other.id), "matmul")
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul_t(&other.value())?;
        self.binary(other, out, Op::MatMulT(self.id, other.id), "matmul_t")
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        self.unary(self.value().transpose(), Op::Transpose(self.id), "transpose")
    }

    /// Elementwise sum; a `1 × n` right operand is broadcast over rows and a
    /// `1 × 1` operand over every element.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a == b {
            let out = self.value().zip_map(&other.value(), |x, y| x + y);
            self.binary(other, out, Op::Add(self.id, other.id), "add")
        } else if b == [1, 1] {
            let s = other.value().item()?;
            self.binary(other, self.value().map(|x| x + s), Op::AddScalar(self.id, other.id), "add_scalar")
        } else if b[0] == 1 && b[1] == a[1] {
            let r = other.value();
            let mut out = (*self.value()).clone();
            for i in 0..a[0] {
                for (o, x) in out.row_mut(i).iter_mut().zip(r.data()) {
                    *o += x;
                }
            }
            self.binary(other, out, Op::AddRow(self.id, other.id), "add_row")
        } else {
            Err(Error::shape("add", format!("{a:?} + {b:?}")))
        }
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.expect_same_shape(other, "sub")?;
        let out = self.value().zip_map(&other.value(), |x, y| x - y);
        self.binary(other, out, Op::Sub(self.id, other.id), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.expect_same_shape(other, "mul")?;
        let out = self.value().zip_map(&other.value(), |x, y| x * y);
        self.binary(other, out, Op::Mul(self.id, other.id), "mul")
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c), "scale")
    }

    /// `x · W + b` with `b` broadcast over rows.
    pub fn affine(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add(bias)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(self.value().map(sigmoid), Op::Sigmoid(self.id), "sigmoid")
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(self.value().map(|x| x.max(0.0)), Op::Relu(self.id), "relu")
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn ln(&self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain { op: "ln", detail: format!("input {bad} is not positive") });
        }
        self.unary(x.map(f64::ln), Op::Ln(self.id), "ln")
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary(self.value().map(f64::abs), Op::Abs(self.id), "abs")
    }

    /// `ln(1 + eˣ)`, computed stably.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(self.value().map(softplus), Op::Softplus(self.id), "softplus")
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(self.value().map(|x| x.clamp(lo, hi)), Op::Clamp { x: self.id, lo, hi }, "clamp")
    }

    /// `clamp(x, ε, 1 − ε)` with ε = [`LOG_CLAMP_EPS`], for probabilities
    /// about to go through `ln`.
    pub fn clamp_probability(&self) -> Result<Var<'t>> {
        self.clamp(LOG_CLAMP_EPS, 1.0 - LOG_CLAMP_EPS)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id), "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        self.unary(Tensor::scalar(x.sum() / x.len() as f64), Op::Mean(self.id), "mean")
    }

    /// Softmax over each row after adding an optional bias; masked entries
    /// are excluded from normalisation and come out exactly zero.
    pub fn row_softmax(&self, bias: Option<&Var<'t>>, mask: Option<&Mask>) -> Result<Var<'t>> {
        let logits = match bias {
            Some(b) => {
                self.expect_same_shape(b, "row_softmax bias")?;
                self.add(b)?
            }
            None => *self,
        };
        let x = logits.value();
        if let Some(m) = mask {
            if m.shape() != x.shape() {
                return Err(Error::shape("row_softmax mask", format!("{:?} vs {:?}", m.shape(), x.shape())));
            }
        }
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let keep = |j: usize| mask.is_none_or(|m| !m.is_excluded(i, j));
            let max = (0..x.cols())
                .filter(|&j| keep(j))
                .map(|j| x.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("row {i} of softmax input is fully masked")));
            }
            let mut total = 0.0;
            for j in 0..x.cols() {
                if keep(j) {
                    let e = (x.get(i, j) - max).exp();
                    out.set(i, j, e);
                    total += e;
                }
            }
            for v in out.row_mut(i) {
                *v /= total;
            }
        }
        logits.unary(out, Op::RowSoftmax(logits.id), "row_softmax")
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.unary(out, Op::LogSoftmax(self.id), "log_softmax")
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            first.same_tape(p);
            let v = p.value();
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{cols} vs {} columns", v.cols())));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
            rg |= p.requires_grad();
        }
        let ids = parts.iter().map(|p| p.id).collect();
        first.tape.push(Tensor::new(rows, cols, data)?, Op::ConcatRows(ids), rg, "concat_rows")
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = first.rows();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        if let Some(bad) = values.iter().find(|v| v.rows() != rows) {
            return Err(Error::shape("concat_cols", format!("{rows} vs {} rows", bad.rows())));
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for v in &values {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
                offset += v.cols();
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        first.tape.push(out, Op::ConcatCols(ids), rg, "concat_cols")
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if start + len > x.cols() {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {} columns", start + len, x.cols())));
        }
        let mut out = Tensor::zeros(x.rows(), len);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.unary(out, Op::SliceCols { x: self.id, start }, "slice_cols")
    }

    /// Row lookup (`embedding_lookup`): output row `r` is `self[index[r]]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {}", t.rows())));
        }
        let mut data = Vec::with_capacity(index.len() * t.cols());
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(index.len(), t.cols(), data)?;
        self.unary(out, Op::Gather { table: self.id, index: index.into() }, "gather_rows")
    }

    pub fn embedding_lookup(&self, index: &[usize]) -> Result<Var<'t>> {
        self.gather_rows(index)
    }

    /// `m × 1` column holding `self[r, cols[r]]`.
    pub fn pick_per_row(&self, cols: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if cols.len() != x.rows() {
            return Err(Error::shape("pick_per_row", format!("{} picks for {} rows", cols.len(), x.rows())));
        }
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= x.cols() {
                return Err(Error::shape("pick_per_row", format!("column {c} of {}", x.cols())));
            }
            out.push(x.get(r, c));
        }
        self.unary(Tensor::column_vector(out), Op::PickPerRow { x: self.id, cols: cols.into() }, "pick_per_row")
    }

    /// Row-wise layer normalisation followed by `γ ⊙ x̂ + β`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.cols();
        if gamma.shape() != [1, n] || beta.shape() != [1, n] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
            ));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let mut out = Tensor::zeros(x.rows(), n);
        for i in 0..x.rows() {
            let (mean, inv_std) = row_moments(x.row(i), eps);
            for k in 0..n {
                out.set(i, k, (x.get(i, k) - mean) * inv_std * gv.data()[k] + bv.data()[k]);
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push(
            out,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, eps },
            rg,
            "layer_norm",
        )
    }

    /// For an `n × 1` column `p`, the `n × n` matrix `p_i − p_j`.
    pub fn outer_diff(&self) -> Result<Var<'t>> {
        let p = self.value();
        if p.cols() != 1 {
            return Err(Error::shape("outer_diff", format!("{:?} is not a column", p.shape())));
        }
        let n = p.rows();
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, p.data()[i] - p.data()[j]);
            }
        }
        self.unary(out, Op::OuterDiff(self.id), "outer_diff")
    }

    /// For `self: n × B` and a row-major `n × m` index, output
    /// `[i, j] = self[i, index[i][j]]`.
    pub fn gather_cols(&self, index: &[usize], width: usize) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != x.rows() * width || index.iter().any(|&b| b >= x.cols()) {
            return Err(Error::shape("gather_cols", format!("index of {} for {:?}", index.len(), x.shape())));
        }
        let mut out = Tensor::zeros(x.rows(), width);
        for i in 0..x.rows() {
            for j in 0..width {
                out.set(i, j, x.get(i, index[i * width + j]));
            }
        }
        self.unary(out, Op::GatherCols { x: self.id, index: index.into() }, "gather_cols")
    }

    /// For `self: n × m` and a row-major `n × m` index into `buckets`
    /// columns, output `[i, b] = Σ_{j : index[i][j] = b} self[i, j]`.
    pub fn bucket_sum(&self, index: &[usize], buckets: usize) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != x.len() || index.iter().any(|&b| b >= buckets) {
            return Err(Error::shape("bucket_sum", format!("index of {} for {:?}", index.len(), x.shape())));
        }
        let mut out = Tensor::zeros(x.rows(), buckets);
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let b = index[i * x.cols() + j];
                let cur = out.get(i, b);
                out.set(i, b, cur + x.get(i, j));
            }
        }
        self.unary(out, Op::BucketSum { x: self.id, index: index.into() }, "bucket_sum")
    }
}
