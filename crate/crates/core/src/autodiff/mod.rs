//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation as a node; [`Var`] is a cheap handle to
//! one node (the node owns its data, gradient, provenance tag and parents).
//! Parents always precede children on the tape, so the graph is acyclic and
//! a reverse sweep over node indices is a valid topological order.
//!
//! Stop-gradient outputs are logged in call order. A tape created with
//! [`Tape::replaying`] substitutes the logged values instead of recomputing
//! them, which is how finite-difference probes hold detached weights fixed.

mod gradcheck;
mod params;

use std::collections::HashMap;

pub use gradcheck::{finite_difference_check, FD_STEP, ROUNDOFF_FLOOR};
pub use params::{Parameter, ParameterVector};

use crate::error::{Error, Result};

/// `(rows, cols)`; scalars are `(1, 1)`.
pub type Shape = (usize, usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Gather(..) => "gather",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Tanh(_) => "tanh",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Scale(..) => "scale",
            Op::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    data: Vec<f64>,
    grad: Vec<f64>,
    shape: Shape,
    op: Op,
}

/// Computation record for one scalar objective.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    detached: Vec<Vec<f64>>,
    replay: Option<Vec<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose stop-gradient nodes take their values from `log`, in order.
    pub fn replaying(log: Vec<Vec<f64>>) -> Self {
        Tape {
            replay: Some(log),
            ..Self::default()
        }
    }

    /// Values produced by every stop-gradient node so far, in call order.
    pub fn detached_log(&self) -> &[Vec<f64>] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Shape, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape.0 * shape.1);
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            data,
            grad,
            shape,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    /// Gradient of the most recent backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.node(v).grad
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).shape
    }

    /// Provenance tag of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op.name()
    }

    /// Scalar value of a `(1, 1)` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.shape(v) {
            (1, 1) => Ok(self.value(v)[0]),
            s => Err(Error::NonScalarRoot(s)),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// An input that is not a model parameter (still receives a gradient).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape) -> Result<Var> {
        if data.len() != shape.0 * shape.1 {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: (1, data.len()),
            });
        }
        Ok(self.push(data, shape, Op::Leaf))
    }

    /// A constant; identical to a leaf whose gradient nobody reads.
    pub fn constant(&mut self, data: Vec<f64>, shape: Shape) -> Result<Var> {
        self.leaf(data, shape)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.push(vec![x], (1, 1), Op::Leaf)
    }

    /// Registers parameter `idx` of `params` (once per tape) and returns its node.
    pub fn param(&mut self, params: &ParameterVector, idx: usize) -> Var {
        if let Some(&v) = self.params.get(&idx) {
            return v;
        }
        let p = params.get(idx);
        let v = self.push(p.data.clone(), p.shape, Op::Param);
        self.params.insert(idx, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(data, s, Op::Add(a, b)))
    }

    /// Adds a `(1, c)` row to every row of an `(r, c)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let r = self.value(row);
        let data = self
            .value(a)
            .chunks(sa.1.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(data, sa, Op::AddRow(a, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(data, s, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, (m, n), Op::MatMul(a, b)))
    }

    /// Picks `x[r, idx[r]]` for every row `r`; output shape `(rows, 1)`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.len() != r {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: (r, c),
                rhs: (idx.len(), 1),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::IndexOutOfRange {
                op: "gather",
                index: bad,
                bound: c,
            });
        }
        let xs = self.value(x);
        let data = idx.iter().enumerate().map(|(row, &i)| xs[row * c + i]).collect();
        Ok(self.push(data, (r, 1), Op::Gather(x, idx.to_vec())))
    }

    /// Stacks rows `table[idx[i], :]`; output shape `(idx.len(), cols)`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        Ok(self.push(data, (idx.len(), c), Op::GatherRows(table, idx.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let s = self.shape(x);
        if s.0 * s.1 != shape.0 * shape.1 {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: s,
                rhs: shape,
            });
        }
        let data = self.value(x).to_vec();
        Ok(self.push(data, shape, Op::Reshape(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let data = self.value(x).iter().map(|v| v.ln()).collect();
        let s = self.shape(x);
        Ok(self.push(data, s, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v.exp()).collect();
        let s = self.shape(x);
        Ok(self.push(data, s, Op::Exp(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v.tanh()).collect();
        let s = self.shape(x);
        Ok(self.push(data, s, Op::Tanh(x)))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(Error::Empty("log_softmax row"));
        }
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        Ok(self.push(data, (r, c), Op::LogSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().sum();
        Ok(self.push(vec![s], (1, 1), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(vec![m], (1, 1), Op::Mean(x)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v * s).collect();
        let sh = self.shape(x);
        Ok(self.push(data, sh, Op::Scale(x, s)))
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let k = self.detached.len();
        let data = match &self.replay {
            Some(log) => {
                let frozen = log.get(k).ok_or_else(|| Error::Domain {
                    op: "stop_gradient",
                    detail: format!("replay log has no entry {k}"),
                })?;
                if frozen.len() != shape.0 * shape.1 {
                    return Err(Error::ShapeMismatch {
                        op: "stop_gradient",
                        lhs: shape,
                        rhs: (1, frozen.len()),
                    });
                }
                frozen.clone()
            }
            None => self.value(x).to_vec(),
        };
        self.detached.push(data.clone());
        Ok(self.push(data, shape, Op::StopGradient))
    }

    /// Computes d(root)/d(node) for every node and adds the parameter-node
    /// gradients into `params`. Node gradients are recomputed from scratch on
    /// each call; parameter gradients accumulate until zeroed.
    pub fn backward(&mut self, root: Var, params: &mut ParameterVector) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::NonScalarRoot(self.shape(root)));
        }
        self.zero_grad();
        self.nodes[root.0].grad[0] = 1.0;
        for i in (0..=root.0).rev() {
            let grad = std::mem::take(&mut self.nodes[i].grad);
            if grad.iter().any(|&g| g != 0.0) {
                self.propagate(i, &grad);
            }
            self.nodes[i].grad = grad;
        }
        for (&idx, &v) in &self.params {
            if idx >= params.len() {
                return Err(Error::IndexOutOfRange {
                    op: "backward",
                    index: idx,
                    bound: params.len(),
                });
            }
            let p = params.get_mut(idx);
            if p.grad.len() != p.data.len() {
                p.grad = vec![0.0; p.data.len()];
            }
            for (acc, g) in p.grad.iter_mut().zip(&self.nodes[v.0].grad) {
                *acc += g;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: impl IntoIterator<Item = (usize, f64)>) {
        let g = &mut self.nodes[v.0].grad;
        for (i, c) in contrib {
            g[i] += c;
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Param | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.iter().copied().enumerate());
                self.accumulate(b, g.iter().copied().enumerate());
            }
            Op::AddRow(a, row) => {
                let c = self.shape(a).1;
                self.accumulate(a, g.iter().copied().enumerate());
                let contrib: Vec<(usize, f64)> =
                    g.iter().enumerate().map(|(j, &x)| (j % c, x)).collect();
                self.accumulate(row, contrib);
            }
            Op::Mul(a, b) => {
                let ga: Vec<(usize, f64)> = g
                    .iter()
                    .zip(self.value(b))
                    .map(|(x, y)| x * y)
                    .enumerate()
                    .collect();
                let gb: Vec<(usize, f64)> = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(x, y)| x * y)
                    .enumerate()
                    .collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.shape(a), self.shape(b));
                // dA = G · Bᵀ, dB = Aᵀ · G
                let mut da = vec![0.0; m * k];
                {
                    let bv = self.value(b);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        let darow = &mut da[r * k..(r + 1) * k];
                        for (kk, d) in darow.iter_mut().enumerate() {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            *d = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                }
                let mut db = vec![0.0; k * n];
                {
                    let av = self.value(a);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let aval = av[r * k + kk];
                            if aval == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for (d, x) in dbrow.iter_mut().zip(grow) {
                                *d += aval * x;
                            }
                        }
                    }
                }
                self.accumulate(a, da.into_iter().enumerate());
                self.accumulate(b, db.into_iter().enumerate());
            }
            Op::Gather(x, idx) => {
                let c = self.shape(x).1;
                let contrib: Vec<(usize, f64)> = idx
                    .iter()
                    .enumerate()
                    .map(|(row, &j)| (row * c + j, g[row]))
                    .collect();
                self.accumulate(x, contrib);
            }
            Op::GatherRows(table, idx) => {
                let c = self.shape(table).1;
                let mut contrib = Vec::with_capacity(g.len());
                for (row, &j) in idx.iter().enumerate() {
                    for col in 0..c {
                        contrib.push((j * c + col, g[row * c + col]));
                    }
                }
                self.accumulate(table, contrib);
            }
            Op::Reshape(x) => self.accumulate(x, g.iter().copied().enumerate()),
            Op::Log(x) => {
                let contrib: Vec<(usize, f64)> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(gi, xi)| gi / xi)
                    .enumerate()
                    .collect();
                self.accumulate(x, contrib);
            }
            Op::Exp(x) => {
                let out = &self.nodes[i].data;
                let contrib: Vec<(usize, f64)> =
                    g.iter().zip(out).map(|(gi, yi)| gi * yi).enumerate().collect();
                self.accumulate(x, contrib);
            }
            Op::Tanh(x) => {
                let out = &self.nodes[i].data;
                let contrib: Vec<(usize, f64)> = g
                    .iter()
                    .zip(out)
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .enumerate()
                    .collect();
                self.accumulate(x, contrib);
            }
            Op::LogSoftmax(x) => {
                // dx_j = g_j - softmax_j * Σ_k g_k
                let c = self.shape(x).1;
                let out = &self.nodes[i].data;
                let mut contrib = Vec::with_capacity(g.len());
                for (r, (grow, orow)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for (j, (gj, lj)) in grow.iter().zip(orow).enumerate() {
                        contrib.push((r * c + j, gj - lj.exp() * total));
                    }
                }
                self.accumulate(x, contrib);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(x, (0..n).map(|j| (j, g[0])));
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                let s = g[0] / n as f64;
                self.accumulate(x, (0..n).map(|j| (j, s)));
            }
            Op::Scale(x, s) => self.accumulate(x, g.iter().map(|gi| gi * s).enumerate()),
        }
    }
}

/// `out = a · b` for row-major `a: (m, k)`, `b: (k, n)`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        orow.iter_mut().for_each(|o| *o = 0.0);
        for kk in 0..k {
            let aval = a[r * k + kk];
            if aval == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
}

/// Stabilized log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v = *v - max - lse;
    }
}
