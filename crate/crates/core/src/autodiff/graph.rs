//! Define-by-run computation graph with reverse-mode accumulation.
//!
//! Nodes are appended in topological order. A node's value is computed as
//! soon as all of its inputs have values, so the usual pattern is to build
//! the graph eagerly from bound inputs and parameters, read intermediate
//! values where the model needs them (branch assignment, tuple mining), and
//! keep extending it. [`Graph::forward`] re-evaluates the same structure
//! under new bindings; selections derived from earlier values stay frozen,
//! which is exactly what finite-difference probing needs.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp on row norms in [`Op::L2Normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum Op {
    /// Externally supplied value. Unnamed inputs are constants.
    Input(Option<String>),
    Parameter(String),
    MatMul(Var, Var),
    Transpose(Var),
    /// Elementwise ops broadcast size-1 rows or columns.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    /// Column-wise concatenation.
    Concat(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    GatherRows(Var, Arc<[usize]>),
    /// Row L2 norms, `[m, n] -> [m, 1]`.
    RowNorm(Var),
    /// Rows scaled to unit L2 norm.
    L2Normalize(Var),
    SoftmaxRow(Var),
    /// Mean squared difference, a scalar.
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    /// Per column `c`: `ln(1 + sum_r mask[r, c] * exp(x[r, c]))`, giving `[1, n]`.
    /// Evaluated with a max shift so large exponents never overflow.
    LogOnePlusSumExp(Var, Arc<[bool]>),
    StopGradient(Var),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Parameter(_) => "parameter",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ScalarMul(..) => "scalar-mul",
            Op::AddScalar(..) => "add-scalar",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Concat(_) => "concat",
            Op::SliceCols { .. } => "slice-cols",
            Op::GatherRows(..) => "gather-rows",
            Op::RowNorm(_) => "row-norm",
            Op::L2Normalize(_) => "l2norm",
            Op::SoftmaxRow(_) => "softmax-row",
            Op::Mse(..) => "mse",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LogOnePlusSumExp(..) => "log1p-sum-exp",
            Op::StopGradient(_) => "stop-gradient",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Parameter(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Transpose(a)
            | Op::ScalarMul(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SliceCols { input: a, .. }
            | Op::GatherRows(a, _)
            | Op::RowNorm(a)
            | Op::L2Normalize(a)
            | Op::SoftmaxRow(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogOnePlusSumExp(a, _)
            | Op::StopGradient(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: [usize; 2],
    value: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
}

/// Gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a named parameter; zeros if the loss does not reach it.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradient with respect to any node, if it received one.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.per_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn as_2d(t: &Tensor) -> Option<[usize; 2]> {
    match t.shape() {
        [r, c] => Some([*r, *c]),
        _ => None,
    }
}

fn broadcast(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some([dim(a[0], b[0])?, dim(a[1], b[1])?])
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let mut data = Vec::with_capacity(out[0] * out[1]);
    for i in 0..out[0] {
        let ai = if ar == 1 { 0 } else { i };
        let bi = if br == 1 { 0 } else { i };
        for j in 0..out[1] {
            let aj = if ac == 1 { 0 } else { j };
            let bj = if bc == 1 { 0 } else { j };
            data.push(f(a.data()[ai * ac + aj], b.data()[bi * bc + bj]));
        }
    }
    Tensor::new(out.to_vec(), data).expect("broadcast shape")
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(&shape);
    let cols = g.cols();
    for i in 0..g.rows() {
        let oi = if shape[0] == 1 { 0 } else { i };
        for j in 0..cols {
            let oj = if shape[1] == 1 { 0 } else { j };
            out.data_mut()[oi * shape[1] + oj] += g.data()[i * cols + j];
        }
    }
    out
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

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].shape
    }

    /// Current value of a node. Panics if the node has not been evaluated;
    /// use [`Graph::try_value`] for graphs with unbound placeholders.
    pub fn value(&self, v: Var) -> &Tensor {
        self.try_value(v)
            .unwrap_or_else(|| panic!("node {} has no value yet", v.0))
    }

    pub fn try_value(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].value.as_ref()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    /// Names and handles of every parameter node, in creation order.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, Var)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Parameter(name) => Some((name.as_str(), Var(i))),
            _ => None,
        })
    }

    fn leaf(&mut self, op: Op, shape: [usize; 2], value: Option<Tensor>) -> Result<Var> {
        let id = self.nodes.len();
        if let Op::Input(Some(name)) | Op::Parameter(name) = &op {
            if self.names.contains_key(name) {
                return Err(Error::InvalidArgument(format!("duplicate graph name `{name}`")));
            }
            self.names.insert(name.clone(), Var(id));
        }
        self.nodes.push(Node { op, shape, value });
        Ok(Var(id))
    }

    fn leaf_shape(&self, op: &Op, t: &Tensor) -> Result<[usize; 2]> {
        as_2d(t).ok_or_else(|| Error::Shape {
            node: self.nodes.len(),
            op: op.kind(),
            detail: format!("graph tensors must be rank 2, got {:?}", t.shape()),
        })
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let op = Op::Input(None);
        let shape = self.leaf_shape(&op, &t)?;
        self.leaf(op, shape, Some(t))
    }

    /// Named input bound to a value now.
    pub fn input(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let op = Op::Input(Some(name.to_owned()));
        let shape = self.leaf_shape(&op, &t)?;
        self.leaf(op, shape, Some(t))
    }

    /// Named input to be bound later through [`Graph::forward`].
    pub fn placeholder(&mut self, name: &str, shape: [usize; 2]) -> Result<Var> {
        self.leaf(Op::Input(Some(name.to_owned())), shape, None)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let op = Op::Parameter(name.to_owned());
        let shape = self.leaf_shape(&op, &t)?;
        self.leaf(op, shape, Some(t))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let shape = self.infer_shape(&op)?;
        let value = self.compute(&op, shape);
        if let Some(v) = &value {
            debug_assert_eq!(v.shape(), shape);
        }
        self.nodes.push(Node { op, shape, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn infer_shape(&self, op: &Op) -> Result<[usize; 2]> {
        let node = self.nodes.len();
        let err = |detail: String| Error::Shape {
            node,
            op: op.kind(),
            detail,
        };
        for v in op.inputs() {
            if v.0 >= node {
                return Err(err(format!("operand {} does not exist", v.0)));
            }
        }
        let s = |v: &Var| self.nodes[v.0].shape;
        let shape = match op {
            Op::Input(_) | Op::Parameter(_) => unreachable!("leaves are added directly"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (s(a), s(b));
                if sa[1] != sb[0] {
                    return Err(err(format!("cannot multiply {sa:?} by {sb:?}")));
                }
                [sa[0], sb[1]]
            }
            Op::Transpose(a) => [s(a)[1], s(a)[0]],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                broadcast(s(a), s(b)).ok_or_else(|| {
                    err(format!("cannot broadcast {:?} with {:?}", s(a), s(b)))
                })?
            }
            Op::ScalarMul(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::L2Normalize(a)
            | Op::SoftmaxRow(a)
            | Op::StopGradient(a) => s(a),
            Op::Concat(parts) => {
                let first = parts.first().ok_or_else(|| err("nothing to concatenate".into()))?;
                let rows = s(first)[0];
                let mut cols = 0;
                for p in parts {
                    if s(p)[0] != rows {
                        return Err(err(format!(
                            "row counts differ: {rows} vs {}",
                            s(p)[0]
                        )));
                    }
                    cols += s(p)[1];
                }
                [rows, cols]
            }
            Op::SliceCols { input, start, len } => {
                let si = s(input);
                if *len == 0 || start + len > si[1] {
                    return Err(err(format!(
                        "columns {start}..{} out of range for {si:?}",
                        start + len
                    )));
                }
                [si[0], *len]
            }
            Op::GatherRows(a, idx) => {
                let sa = s(a);
                if idx.is_empty() {
                    return Err(err("empty row selection".into()));
                }
                if let Some(bad) = idx.iter().find(|&&i| i >= sa[0]) {
                    return Err(err(format!("row {bad} out of range for {sa:?}")));
                }
                [idx.len(), sa[1]]
            }
            Op::RowNorm(a) => [s(a)[0], 1],
            Op::Mse(a, b) => {
                if s(a) != s(b) {
                    return Err(err(format!("{:?} vs {:?}", s(a), s(b))));
                }
                [1, 1]
            }
            Op::Sum(_) | Op::Mean(_) => [1, 1],
            Op::LogOnePlusSumExp(a, mask) => {
                let sa = s(a);
                if mask.len() != sa[0] * sa[1] {
                    return Err(err(format!(
                        "mask has {} entries for {sa:?}",
                        mask.len()
                    )));
                }
                [1, sa[1]]
            }
        };
        Ok(shape)
    }

    /// Evaluates `op` if every operand has a value.
    fn compute(&self, op: &Op, shape: [usize; 2]) -> Option<Tensor> {
        let val = |v: &Var| self.nodes[v.0].value.as_ref();
        let out = match op {
            Op::Input(_) | Op::Parameter(_) => return None,
            Op::MatMul(a, b) => val(a)?.matmul(val(b)?),
            Op::Transpose(a) => val(a)?.transpose(),
            Op::Add(a, b) => broadcast_zip(val(a)?, val(b)?, shape, |x, y| x + y),
            Op::Sub(a, b) => broadcast_zip(val(a)?, val(b)?, shape, |x, y| x - y),
            Op::Mul(a, b) => broadcast_zip(val(a)?, val(b)?, shape, |x, y| x * y),
            Op::Div(a, b) => broadcast_zip(val(a)?, val(b)?, shape, |x, y| x / y),
            Op::ScalarMul(a, c) => val(a)?.map(|x| c * x),
            Op::AddScalar(a, c) => val(a)?.map(|x| x + c),
            Op::Relu(a) => val(a)?.map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Exp(a) => val(a)?.map(f64::exp),
            Op::Log(a) => val(a)?.map(f64::ln),
            Op::StopGradient(a) => val(a)?.clone(),
            Op::Concat(parts) => {
                let vals: Vec<&Tensor> = parts.iter().map(val).collect::<Option<_>>()?;
                let mut data = Vec::with_capacity(shape[0] * shape[1]);
                for r in 0..shape[0] {
                    for t in &vals {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Tensor::new(shape.to_vec(), data).ok()?
            }
            Op::SliceCols { input, start, len } => {
                let t = val(input)?;
                let mut data = Vec::with_capacity(shape[0] * len);
                for r in 0..shape[0] {
                    data.extend_from_slice(&t.row(r)[*start..start + len]);
                }
                Tensor::new(shape.to_vec(), data).ok()?
            }
            Op::GatherRows(a, idx) => val(a)?.gather_rows(idx),
            Op::RowNorm(a) => {
                let t = val(a)?;
                let norms: Vec<f64> = (0..t.rows()).map(|r| crate::tensor::l2_norm(t.row(r))).collect();
                Tensor::column_vector(&norms)
            }
            Op::L2Normalize(a) => {
                let mut t = val(a)?.clone();
                for r in 0..t.rows() {
                    let n = crate::tensor::l2_norm(t.row(r)).max(NORMALIZE_EPS);
                    t.row_mut(r).iter_mut().for_each(|x| *x /= n);
                }
                t
            }
            Op::SoftmaxRow(a) => {
                let mut t = val(a)?.clone();
                for r in 0..t.rows() {
                    let row = t.row_mut(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= total);
                }
                t
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(a)?, val(b)?);
                let sq: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                Tensor::scalar(sq / ta.len() as f64)
            }
            Op::Sum(a) => Tensor::scalar(val(a)?.sum()),
            Op::Mean(a) => {
                let t = val(a)?;
                Tensor::scalar(t.sum() / t.len() as f64)
            }
            Op::LogOnePlusSumExp(a, mask) => {
                let t = val(a)?;
                let (rows, cols) = (t.rows(), t.cols());
                let out: Vec<f64> = (0..cols)
                    .map(|c| {
                        let shift = (0..rows)
                            .filter(|&r| mask[r * cols + c])
                            .map(|r| t.get(r, c))
                            .fold(0.0_f64, f64::max);
                        let tail: f64 = (0..rows)
                            .filter(|&r| mask[r * cols + c])
                            .map(|r| (t.get(r, c) - shift).exp())
                            .sum();
                        shift + ((-shift).exp() + tail).ln()
                    })
                    .collect();
                Tensor::row_vector(&out)
            }
        };
        Some(out)
    }

    /// Re-evaluates every node after rebinding the named inputs and
    /// parameters in `bindings`. Leaves absent from `bindings` keep their
    /// current values; a placeholder that was never bound is an error.
    pub fn forward(&mut self, bindings: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in bindings {
            let v = *self
                .names
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no graph input named `{name}`")))?;
            let node = &mut self.nodes[v.0];
            if t.shape() != node.shape {
                return Err(Error::Shape {
                    node: v.0,
                    op: node.op.kind(),
                    detail: format!(
                        "`{name}` declared {:?}, bound to {:?}",
                        node.shape,
                        t.shape()
                    ),
                });
            }
            node.value = Some(t.clone());
        }
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Input(name) => {
                    if self.nodes[i].value.is_none() {
                        let name = name.clone().unwrap_or_else(|| format!("#{i}"));
                        return Err(Error::Unbound(name));
                    }
                }
                Op::Parameter(name) => {
                    if self.nodes[i].value.is_none() {
                        return Err(Error::Unbound(name.clone()));
                    }
                }
                op => {
                    let value = self.compute(op, self.nodes[i].shape);
                    self.nodes[i].value = value;
                }
            }
        }
        Ok(())
    }

    /// Reverse accumulation from a scalar `loss`. Nothing flows through a
    /// stop-gradient node. Every parameter appears in the result, with an
    /// all-zero gradient when the loss does not reach it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].shape;
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.vjp(i, &node.op, &g)?;
            grads[i] = Some(g);
            for (v, dv) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
        }

        let params = self
            .parameters()
            .map(|(name, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].shape));
                (name.to_owned(), g)
            })
            .collect();
        Ok(Gradients {
            per_node: grads,
            params,
        })
    }

    fn vjp(&self, node: usize, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: &Var| {
            self.nodes[v.0]
                .value
                .as_ref()
                .ok_or_else(|| Error::Unbound(format!("node {}", v.0)))
        };
        let out = || val(&Var(node));
        let shape = |v: &Var| self.nodes[v.0].shape;
        let res = match op {
            Op::Input(_) | Op::Parameter(_) | Op::StopGradient(_) => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a)?, val(b)?);
                vec![(*a, g.matmul(&tb.transpose())), (*b, ta.transpose().matmul(g))]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, reduce_to(g, shape(a))), (*b, reduce_to(g, shape(b)))],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, shape(a))),
                (*b, reduce_to(&g.map(|x| -x), shape(b))),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a)?, val(b)?);
                let s = self.nodes[node].shape;
                let ga = broadcast_zip(g, tb, s, |x, y| x * y);
                let gb = broadcast_zip(g, ta, s, |x, y| x * y);
                vec![(*a, reduce_to(&ga, shape(a))), (*b, reduce_to(&gb, shape(b)))]
            }
            Op::Div(a, b) => {
                let tb = val(b)?;
                let s = self.nodes[node].shape;
                let ga = broadcast_zip(g, tb, s, |x, y| x / y);
                // d(a/b)/db = -(a/b)/b
                let qb = broadcast_zip(out()?, tb, s, |x, y| x / y);
                let gb = g.zip_map(&qb, |x, y| -x * y);
                vec![(*a, reduce_to(&ga, shape(a))), (*b, reduce_to(&gb, shape(b)))]
            }
            Op::ScalarMul(a, c) => vec![(*a, g.map(|x| c * x))],
            Op::AddScalar(a, _) => vec![(*a, g.clone())],
            Op::Relu(a) => vec![(*a, g.zip_map(val(a)?, |x, y| if y > 0.0 { x } else { 0.0 }))],
            Op::Exp(a) => vec![(*a, g.zip_map(out()?, |x, y| x * y))],
            Op::Log(a) => vec![(*a, g.zip_map(val(a)?, |x, y| x / y))],
            Op::Concat(parts) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = shape(p)[1];
                    let mut piece = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        piece.extend_from_slice(&g.row(r)[start..start + w]);
                    }
                    res.push((*p, Tensor::new(vec![g.rows(), w], piece)?));
                    start += w;
                }
                res
            }
            Op::SliceCols { input, start, len } => {
                let mut full = Tensor::zeros(&shape(input));
                for r in 0..g.rows() {
                    full.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                vec![(*input, full)]
            }
            Op::GatherRows(a, idx) => {
                let mut full = Tensor::zeros(&shape(a));
                for (r, &src) in idx.iter().enumerate() {
                    for (d, s) in full.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                vec![(*a, full)]
            }
            Op::RowNorm(a) => {
                let (x, n) = (val(a)?, out()?);
                let mut dx = Tensor::zeros(&shape(a));
                for r in 0..x.rows() {
                    let norm = n.data()[r];
                    if norm > 0.0 {
                        let scale = g.data()[r] / norm;
                        for (d, &xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                            *d = scale * xv;
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::L2Normalize(a) => {
                let (x, y) = (val(a)?, out()?);
                let mut dx = Tensor::zeros(&shape(a));
                for r in 0..x.rows() {
                    let norm = crate::tensor::l2_norm(x.row(r));
                    let gr = g.row(r);
                    if norm > NORMALIZE_EPS {
                        let yr = y.row(r);
                        let proj: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * proj) / norm;
                        }
                    } else {
                        for (d, &gv) in dx.row_mut(r).iter_mut().zip(gr) {
                            *d = gv / NORMALIZE_EPS;
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::SoftmaxRow(a) => {
                let y = out()?;
                let mut dx = Tensor::zeros(&shape(a));
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(a)?, val(b)?);
                let scale = 2.0 * g.item() / ta.len() as f64;
                let da = ta.zip_map(tb, |x, y| scale * (x - y));
                let db = da.map(|x| -x);
                vec![(*a, da), (*b, db)]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(&shape(a), g.item()))],
            Op::Mean(a) => {
                let s = shape(a);
                vec![(*a, Tensor::filled(&s, g.item() / (s[0] * s[1]) as f64))]
            }
            Op::LogOnePlusSumExp(a, mask) => {
                let (x, y) = (val(a)?, out()?);
                let cols = x.cols();
                let mut dx = Tensor::zeros(&shape(a));
                for r in 0..x.rows() {
                    for c in 0..cols {
                        if mask[r * cols + c] {
                            let w = (x.get(r, c) - y.data()[c]).exp();
                            dx.set(r, c, g.data()[c] * w);
                        }
                    }
                }
                vec![(*a, dx)]
            }
        };
        Ok(res)
    }

    /// Smallest |input| over all relu nodes, or `None` without relus.
    /// Finite-difference probes closer than this to a kink are unreliable.
    pub fn kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => self.nodes[a.0].value.as_ref(),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .reduce(f64::min)
    }

    // Op constructors.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    /// Hinge `max(x, 0)`; the same node kind as [`Graph::relu`].
    pub fn max_with_zero(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { input, start, len })
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows(a, indices.into()))
    }

    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNorm(a))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L2Normalize(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRow(a))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mse(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn log1p_sum_exp(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        self.push(Op::LogOnePlusSumExp(a, mask.into()))
    }

    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.push(Op::StopGradient(a))
    }

    /// `x @ w + b` with `b` a single broadcast row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }
}
