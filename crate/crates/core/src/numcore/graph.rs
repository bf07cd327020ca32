//! Tape-based reverse-mode differentiation over [`DiffArray`] values.
//!
//! A [`Graph`] records every forward operation as a node. Nodes are only
//! ever appended, so node order is a valid topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::array::DiffArray;
use super::params::{ParamId, ParamStore};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside the graph module.
///
/// `backward` receives the input values, the forward output and the
/// upstream gradient, and returns one gradient per input (`None` when the
/// input is not differentiable through this op).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&DiffArray],
        output: &DiffArray,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

/// Boolean mask over the last two axes; `true` marks an allowed entry.
/// Broadcast over leading axes by index modulo its length.
pub type Mask = Rc<[bool]>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Softmax { x: Var, geo: AxisGeometry },
    LogSoftmax { x: Var, geo: AxisGeometry, mask: Option<Mask> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, geo: AttnGeometry, probs: Vec<f64> },
    GatherRows(Var, Rc<[usize]>),
    ConcatRows(Var, Var),
    SelectCols(Var, Rc<[usize]>),
    Reshape(Var),
    Transpose(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

#[derive(Clone, Copy)]
struct AxisGeometry {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisGeometry {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn index(&self, o: usize, i: usize, j: usize) -> usize {
        (o * self.len + i) * self.inner + j
    }
}

#[derive(Clone, Copy)]
struct AttnGeometry {
    groups: usize,
    lq: usize,
    lk: usize,
    heads: usize,
    dim: usize,
}

struct Node {
    value: DiffArray,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DiffArray, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].value.requires_grad())
    }

    fn push_op(&self, inputs: &[Var], shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        let rg = self.rg(inputs);
        let value = DiffArray::new(shape, data)?.with_requires_grad(rg);
        Ok(self.push(value, op))
    }

    /// Leaf whose `requires_grad` flag is taken from the array.
    pub fn input(&self, value: DiffArray) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: DiffArray) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same
    /// parameter return the same node, so tied uses share one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let value = store.get(id).clone().with_requires_grad(true);
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            let mut value = value;
            value.zero_grad();
            nodes.push(Node { value, op: Op::Leaf });
            Var(nodes.len() - 1)
        };
        self.params.borrow_mut().insert(id, var);
        var
    }

    /// Graph node bound to `id`, if the parameter was used.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.borrow().get(&id).copied()
    }

    pub fn value(&self, v: Var) -> DiffArray {
        let mut a = self.nodes.borrow()[v.0].value.clone();
        a.zero_grad();
        a
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.data().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].value.requires_grad()
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.0].value.grad().map(<[f64]>::to_vec)
    }

    /// Gradients of every parameter leaf touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<_> = self
            .params
            .borrow()
            .iter()
            .filter_map(|(&id, v)| nodes[v.0].value.grad().map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., k] x b[k, n] -> [.., n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if bv.shape().len() != 2 {
            return dim_err(format!("matmul rhs must be 2-D, got {:?}", bv.shape()));
        }
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        if av.last_dim() != k {
            return dim_err(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        drop(nodes);
        self.push_op(&[a, b], &shape, out, Op::MatMul(a, b))
    }

    /// `x[.., in] W[in, out] + b[out]`
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
        let d = xv.last_dim();
        if bv.len() != d {
            return dim_err(format!("bias of {} for last dim {d}", bv.len()));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(a, b)| a + b))
            .collect();
        let shape = xv.shape().to_vec();
        drop(nodes);
        self.push_op(&[x, b], &shape, out, Op::AddBias(x, b))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        if xv.shape().len() != 2 {
            return dim_err(format!("transpose needs 2-D, got {:?}", xv.shape()));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let d = xv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        drop(nodes);
        self.push_op(&[x], &[n, m], out, Op::Transpose(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.data(x);
        if shape.iter().product::<usize>() != data.len() {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape(x)));
        }
        self.push_op(&[x], shape, data, Op::Reshape(x))
    }

    /// Rows of `x` (viewed as `[rows, last]`) picked by `idx`.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let (rows, d) = (xv.rows(), xv.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return dim_err(format!("row {bad} out of range for {rows} rows"));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        drop(nodes);
        self.push_op(&[x], &[idx.len(), d], out, Op::GatherRows(x, idx.into()))
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.last_dim() != bv.last_dim() {
            return dim_err(format!("concat {:?} with {:?}", av.shape(), bv.shape()));
        }
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        out.extend_from_slice(bv.data());
        let rows = av.rows() + bv.rows();
        drop(nodes);
        self.push_op(&[a, b], &[rows, d], out, Op::ConcatRows(a, b))
    }

    /// Columns of `x` (viewed as `[rows, last]`) picked by `cols`.
    pub fn select_cols(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let d = xv.last_dim();
        if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
            return dim_err(format!("column {bad} out of range for {d}"));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(d)
            .flat_map(|row| cols.iter().map(move |&c| row[c]))
            .collect();
        let rows = xv.rows();
        drop(nodes);
        self.push_op(&[x], &[rows, cols.len()], out, Op::SelectCols(x, cols.into()))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return dim_err(format!("elementwise {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        drop(nodes);
        self.push_op(&[a, b], &shape, out, op)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let out = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        drop(nodes);
        self.push_op(&[x], &shape, out, op).expect("unary preserves shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.push_op(&[x], &[1], vec![s], Op::Sum(x)).expect("scalar")
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.nodes.borrow()[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of several vars of equal shape.
    pub fn add_all(&self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Usage("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    // ---- normalisation ----------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize, mask: Option<&Mask>) -> Result<AxisGeometry> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return dim_err(format!("axis {axis} out of range for {shape:?}"));
        }
        if let Some(m) = mask {
            let n: usize = shape.iter().product();
            if m.is_empty() || !n.is_multiple_of(m.len()) {
                return dim_err(format!("mask of {} does not tile {shape:?}", m.len()));
            }
        }
        Ok(AxisGeometry::of(&shape, axis))
    }

    /// Softmax along `axis`. Masked entries are exactly zero; a row whose
    /// entries are all masked is all zeros.
    pub fn softmax(&self, x: Var, axis: usize, mask: Option<Mask>) -> Result<Var> {
        let geo = self.check_axis(x, axis, mask.as_ref())?;
        let (shape, xd) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.shape().to_vec(), nodes[x.0].value.data().to_vec())
        };
        let mut out = vec![0.0; xd.len()];
        for_each_line(&geo, |idx| {
            let allowed = |p: usize| mask.as_ref().is_none_or(|m| m[p % m.len()]);
            let max = idx
                .clone()
                .filter(|&p| allowed(p))
                .map(|p| xd[p])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return;
            }
            let mut z = 0.0;
            for p in idx.clone().filter(|&p| allowed(p)) {
                out[p] = (xd[p] - max).exp();
                z += out[p];
            }
            for p in idx {
                out[p] /= z;
            }
        });
        self.push_op(&[x], &shape, out, Op::Softmax { x, geo })
    }

    /// Log-softmax along `axis`; masked entries are `-inf`.
    pub fn log_softmax(&self, x: Var, axis: usize, mask: Option<Mask>) -> Result<Var> {
        let geo = self.check_axis(x, axis, mask.as_ref())?;
        let (shape, xd) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.shape().to_vec(), nodes[x.0].value.data().to_vec())
        };
        let mut out = vec![f64::NEG_INFINITY; xd.len()];
        for_each_line(&geo, |idx| {
            let allowed = |p: usize| mask.as_ref().is_none_or(|m| m[p % m.len()]);
            let max = idx
                .clone()
                .filter(|&p| allowed(p))
                .map(|p| xd[p])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return;
            }
            let z: f64 = idx
                .clone()
                .filter(|&p| allowed(p))
                .map(|p| (xd[p] - max).exp())
                .sum();
            let lz = max + z.ln();
            for p in idx.filter(|&p| allowed(p)) {
                out[p] = xd[p] - lz;
            }
        });
        let value = DiffArray::new(&shape, out)?.with_requires_grad(self.rg(&[x]));
        Ok(self.push(value, Op::LogSoftmax { x, geo, mask }))
    }

    /// Per-vector normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let d = xv.last_dim();
        let (gv, bv) = (&nodes[gamma.0].value, &nodes[beta.0].value);
        if gv.len() != d || bv.len() != d {
            return dim_err(format!("layer_norm affine of {} for dim {d}", gv.len()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let shape = xv.shape().to_vec();
        drop(nodes);
        self.push_op(
            &[x, gamma, beta],
            &shape,
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        )
    }

    // ---- attention --------------------------------------------------------

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q` is `[groups * lq, d]`, `k` and `v` are `[groups * lk, d]`; each
    /// group attends only within itself. `mask`, when given, is `[lq, lk]`.
    pub fn attention_core(
        &self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let dim = qv.last_dim();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        if kv.last_dim() != dim || vv.last_dim() != dim || kv.rows() != vv.rows() {
            return dim_err("attention q/k/v dims disagree");
        }
        if groups == 0 || qv.rows() % groups != 0 || kv.rows() % groups != 0 {
            return dim_err(format!("{groups} groups do not tile q/k rows"));
        }
        let geo = AttnGeometry {
            groups,
            lq: qv.rows() / groups,
            lk: kv.rows() / groups,
            heads,
            dim,
        };
        if let Some(m) = mask {
            if m.len() != geo.lq * geo.lk {
                return dim_err(format!("mask of {} for {}x{}", m.len(), geo.lq, geo.lk));
            }
        }
        let (out, probs) = attention_forward(&geo, qv.data(), kv.data(), vv.data(), mask);
        let shape = [qv.rows(), dim];
        drop(nodes);
        self.push_op(&[q, k, v], &shape, out, Op::Attention { q, k, v, geo, probs })
    }

    /// Records the result of a [`CustomOp`].
    pub fn custom(&self, inputs: &[Var], output: DiffArray, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output.with_requires_grad(rg), Op::Custom(inputs.to_vec(), op))
    }

    /// Runs `f` with borrowed values of `vars`.
    pub fn with_values<R>(&self, vars: &[Var], f: impl FnOnce(&[&DiffArray]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&DiffArray> = vars.iter().map(|v| &nodes[v.0].value).collect();
        f(&vals)
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        if !nodes[loss.0].value.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
                continue;
            }
            backprop_node(&nodes, i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

fn for_each_line(geo: &AxisGeometry, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..geo.outer {
        for j in 0..geo.inner {
            let start = geo.index(o, 0, j);
            let end = geo.index(o, geo.len - 1, j) + 1;
            f((start..end).step_by(geo.inner));
        }
    }
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

/// `c = a * b + beta * c` over row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides address only elements inside `a` (m*k), `b` (k*n)
    // and `c` (m*n), which the callers size accordingly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn attention_forward(
    geo: &AttnGeometry,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let AttnGeometry { groups, lq, lk, heads, dim } = *geo;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; groups * lq * dim];
    let mut probs = vec![0.0; groups * heads * lq * lk];
    let mut scores = vec![0.0; lk];
    for g in 0..groups {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &q[(g * lq + i) * dim + off..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..lk {
                    if mask.is_some_and(|m| !m[i * lk + j]) {
                        scores[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let kj = &k[(g * lk + j) * dim + off..][..dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let p = &mut probs[((g * heads + h) * lq + i) * lk..][..lk];
                let mut z = 0.0;
                for j in 0..lk {
                    p[j] = if scores[j] == f64::NEG_INFINITY { 0.0 } else { (scores[j] - max).exp() };
                    z += p[j];
                }
                let o = &mut out[(g * lq + i) * dim + off..][..dh];
                for j in 0..lk {
                    p[j] /= z;
                    if p[j] == 0.0 {
                        continue;
                    }
                    let vj = &v[(g * lk + j) * dim + off..][..dh];
                    for c in 0..dh {
                        o[c] += p[j] * vj[c];
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    geo: &AttnGeometry,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnGeometry { groups, lq, lk, heads, dim } = *geo;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; lk];
    for g in 0..groups {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let p = &probs[((g * heads + h) * lq + i) * lk..][..lk];
                let doi = &dout[(g * lq + i) * dim + off..][..dh];
                let mut dot = 0.0;
                for j in 0..lk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = (g * lk + j) * dim + off;
                    let vj = &v[vrow..][..dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    let dvj = &mut dv[vrow..][..dh];
                    for c in 0..dh {
                        dvj[c] += p[j] * doi[c];
                    }
                }
                let qrow = (g * lq + i) * dim + off;
                for j in 0..lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = (g * lk + j) * dim + off;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].value.requires_grad() {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(x: &DiffArray, g: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    x.data().iter().zip(g).map(|(&a, &b)| f(a, b)).collect()
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].value.requires_grad();
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.rows();
            if wants(a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), bv.data(), (1, n), &mut da, 0.0);
                acc(nodes, grads, a, da);
            }
            if wants(b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, av.data(), (1, k), g, (n, 1), &mut db, 0.0);
                acc(nodes, grads, b, db);
            }
        }
        &Op::AddBias(x, b) => {
            if wants(b) {
                let d = val(b).len();
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                acc(nodes, grads, b, db);
            }
            acc(nodes, grads, x, g.to_vec());
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, g.to_vec());
            acc(nodes, grads, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, g.to_vec());
            acc(nodes, grads, b, g.iter().map(|x| -x).collect());
        }
        &Op::Mul(a, b) => {
            if wants(a) {
                acc(nodes, grads, a, elementwise(val(b), g, |y, g| y * g));
            }
            if wants(b) {
                acc(nodes, grads, b, elementwise(val(a), g, |x, g| x * g));
            }
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            if wants(a) {
                acc(nodes, grads, a, elementwise(bv, g, |y, g| g / y));
            }
            if wants(b) {
                let db = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .zip(g)
                    .map(|((x, y), g)| -g * x / (y * y))
                    .collect();
                acc(nodes, grads, b, db);
            }
        }
        &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
            let is_max = matches!(nodes[i].op, Op::Maximum(..));
            let (av, bv) = (val(a), val(b));
            let pick_a: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| if is_max { x >= y } else { x <= y })
                .collect();
            let ga = g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect();
            let gb = g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect();
            acc(nodes, grads, a, ga);
            acc(nodes, grads, b, gb);
        }
        &Op::Scale(x, c) => acc(nodes, grads, x, g.iter().map(|v| v * c).collect()),
        &Op::AddScalar(x) | &Op::Reshape(x) => acc(nodes, grads, x, g.to_vec()),
        &Op::Relu(x) => acc(nodes, grads, x, elementwise(val(x), g, |v, g| if v > 0.0 { g } else { 0.0 })),
        &Op::Sigmoid(x) => acc(nodes, grads, x, elementwise(out, g, |y, g| g * y * (1.0 - y))),
        &Op::Exp(x) => acc(nodes, grads, x, elementwise(out, g, |y, g| g * y)),
        &Op::Log(x) => acc(nodes, grads, x, elementwise(val(x), g, |v, g| g / v)),
        &Op::Softplus(x) => acc(nodes, grads, x, elementwise(val(x), g, |v, g| g * sigmoid(v))),
        &Op::Abs(x) => acc(
            nodes,
            grads,
            x,
            elementwise(val(x), g, |v, g| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 }),
        ),
        &Op::Sum(x) => acc(nodes, grads, x, vec![g[0]; val(x).len()]),
        Op::Softmax { x, geo, .. } => {
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for_each_line(geo, |idx| {
                let dot: f64 = idx.clone().map(|p| y[p] * g[p]).sum();
                for p in idx {
                    dx[p] = y[p] * (g[p] - dot);
                }
            });
            acc(nodes, grads, *x, dx);
        }
        Op::LogSoftmax { x, geo, mask } => {
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            let allowed = |p: usize| mask.as_ref().is_none_or(|m| m[p % m.len()]);
            for_each_line(geo, |idx| {
                let total: f64 = idx.clone().filter(|&p| allowed(p) && y[p].is_finite()).map(|p| g[p]).sum();
                for p in idx.filter(|&p| allowed(p) && y[p].is_finite()) {
                    dx[p] = g[p] - y[p].exp() * total;
                }
            });
            acc(nodes, grads, *x, dx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = val(*x).last_dim();
            let gm = val(*gamma).data();
            if wants(*gamma) || wants(*beta) {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        dg[c] += row_g[c] * row_h[c];
                        db[c] += row_g[c];
                    }
                }
                acc(nodes, grads, *gamma, dg);
                acc(nodes, grads, *beta, db);
            }
            if wants(*x) {
                let mut dx = vec![0.0; g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..][..d];
                    let hr = &xhat[r * d..][..d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * gm[c];
                        m1 += dh;
                        m2 += dh * hr[c];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = rs * (gr[c] * gm[c] - m1 - hr[c] * m2);
                    }
                }
                acc(nodes, grads, *x, dx);
            }
        }
        Op::Attention { q, k, v, geo, probs } => {
            let (dq, dk, dv) =
                attention_backward(geo, val(*q).data(), val(*k).data(), val(*v).data(), probs, g);
            acc(nodes, grads, *q, dq);
            acc(nodes, grads, *k, dk);
            acc(nodes, grads, *v, dv);
        }
        Op::GatherRows(x, idx) => {
            if wants(*x) {
                let xv = val(*x);
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut dx[src * d..][..d];
                    dst.iter_mut().zip(&g[r * d..][..d]).for_each(|(a, b)| *a += b);
                }
                acc(nodes, grads, *x, dx);
            }
        }
        &Op::ConcatRows(a, b) => {
            let na = val(a).len();
            acc(nodes, grads, a, g[..na].to_vec());
            acc(nodes, grads, b, g[na..].to_vec());
        }
        Op::SelectCols(x, cols) => {
            if wants(*x) {
                let xv = val(*x);
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for (r, row) in g.chunks(cols.len()).enumerate() {
                    for (gv, &c) in row.iter().zip(cols.iter()) {
                        dx[r * d + c] += gv;
                    }
                }
                acc(nodes, grads, *x, dx);
            }
        }
        &Op::Transpose(x) => {
            let (m, n) = (val(x).shape()[0], val(x).shape()[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            acc(nodes, grads, x, dx);
        }
        Op::Custom(inputs, op) => {
            let vals: Vec<&DiffArray> = inputs.iter().map(|v| val(*v)).collect();
            let gs = op.backward(&vals, out, g);
            for (&v, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    acc(nodes, grads, v, gi);
                }
            }
        }
    }
}
