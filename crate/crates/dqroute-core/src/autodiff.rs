//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! All tensors live in a [`Graph`]: the arena records, for each node, the
//! operation that produced it, so creation order is a topological order
//! (inputs always precede outputs). [`Graph::backward`] walks the arena in
//! reverse from the loss node, visiting each node exactly once and
//! accumulating gradients into every node on a path to a trainable leaf.
//!
//! The op set is deliberately small: matrix product, row-broadcast bias,
//! elementwise arithmetic, ReLU/sigmoid/softmax, clamped log, constant
//! powers, per-row gather, and the reductions a small classifier needs.
//! There is no broadcasting beyond what those ops state.

use crate::error::{Error, Result};

/// Floor applied inside every logarithm so degenerate probabilities produce
/// large-but-finite losses instead of infinities.
pub const LOG_FLOOR: f64 = 1e-12;

/// Sigmoid outputs are clamped into `[SIGMOID_FLOOR, 1 - SIGMOID_FLOOR]`,
/// keeping confidence scores strictly inside (0, 1) even for extreme
/// pre-activations where the unclamped value would round to 0.0 or 1.0.
const SIGMOID_FLOOR: f64 = 1e-12;

/// Handle to a tensor stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// out = a @ b, a: [m,k], b: [k,n]
    Matmul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    /// out[i,j] = m[i,j] + bias[j]
    AddRows(Tensor, Tensor),
    /// out[i,j] = v[i] * m[i,j]
    ScaleRows(Tensor, Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    /// row-wise softmax over the last axis
    Softmax(Tensor),
    /// ln(max(x, LOG_FLOOR))
    LogClamped(Tensor),
    /// x^e for a constant exponent
    PowConst(Tensor, f64),
    /// c * x
    Scale(Tensor, f64),
    /// x + c; the constant is applied at construction and is irrelevant to
    /// the gradient
    AddConst(Tensor),
    /// out[i] = m[i, idx[i]]
    GatherRows(Tensor, Vec<usize>),
    /// out[i] = sum_j m[i,j]
    SumRows(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Reshape(Tensor),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    /// Leaf created as trainable; reported with a gradient after backward.
    requires_grad: bool,
    /// Some path from this node reaches a trainable leaf.
    needs_grad: bool,
    op: Op,
}

/// Recorded forward computation plus storage for every intermediate tensor.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
        needs_grad: bool,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            needs_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn insert_leaf(&mut self, data: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Tensor> {
        let expected = numel_of(shape);
        if expected != data.len() {
            return Err(Error::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, trainable, trainable))
    }

    /// Leaf that never receives a gradient (inputs, masks, labels-as-weights).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.insert_leaf(data, shape, false)
    }

    /// Trainable leaf; `backward` populates its gradient.
    pub fn parameter(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.insert_leaf(data, shape, true)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(vec![], vec![v], Op::Leaf, false, false)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.0].data.len()
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.numel(t), 1, "scalar_value on non-scalar tensor");
        self.nodes[t.0].data[0]
    }

    /// Gradient of the last `backward` call, if one reached this node.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    fn needs(&self, t: Tensor) -> bool {
        self.nodes[t.0].needs_grad
    }

    fn two_d(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, n) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for t in 0..k {
                let aik = av[i * k + t];
                if aik != 0.0 {
                    let brow = &bv[t * n..(t + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), false, needs))
    }

    fn elementwise(
        &mut self,
        a: Tensor,
        b: Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, op, false, needs))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Matrix plus row-broadcast bias: out[i,j] = m[i,j] + bias[j].
    pub fn add_rows(&mut self, m: Tensor, bias: Tensor) -> Result<Tensor> {
        let (r, c) = self.two_d(m, "add_rows")?;
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_rows",
                left: self.shape(m).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mv = self.value(m);
        let bv = self.value(bias);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] + bv[j];
            }
        }
        let needs = self.needs(m) || self.needs(bias);
        Ok(self.push(vec![r, c], out, Op::AddRows(m, bias), false, needs))
    }

    /// Per-row scaling: out[i,j] = v[i] * m[i,j].
    pub fn scale_rows(&mut self, v: Tensor, m: Tensor) -> Result<Tensor> {
        let (r, c) = self.two_d(m, "scale_rows")?;
        if self.shape(v) != [r] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape(v).to_vec(),
                right: self.shape(m).to_vec(),
            });
        }
        let vv = self.value(v);
        let mv = self.value(m);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = vv[i] * mv[i * c + j];
            }
        }
        let needs = self.needs(v) || self.needs(m);
        Ok(self.push(vec![r, c], out, Op::ScaleRows(v, m), false, needs))
    }

    fn unary(&mut self, x: Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let out: Vec<f64> = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, out, op, false, needs)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        // f64::max would quietly turn NaN into 0; a NaN input must surface
        // as a NaN output so the trainer's abort check can see it
        self.unary(
            x,
            |v| if v.is_nan() || v > 0.0 { v } else { 0.0 },
            Op::Relu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn log_clamped(&mut self, x: Tensor) -> Tensor {
        // same NaN rule as relu: the floor must not swallow NaN inputs
        self.unary(
            x,
            |v| if v.is_nan() { v } else { v.max(LOG_FLOOR).ln() },
            Op::LogClamped(x),
        )
    }

    pub fn pow_const(&mut self, x: Tensor, e: f64) -> Tensor {
        self.unary(x, |v| v.powf(e), Op::PowConst(x, e))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Tensor, c: f64) -> Tensor {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    /// Row-wise softmax, computed with max-subtraction. Accepts a vector
    /// (treated as one row) or a matrix (softmax per row).
    pub fn softmax(&mut self, x: Tensor) -> Result<Tensor> {
        let (rows, cols) = match self.shape(x) {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    left: other.to_vec(),
                    right: vec![],
                })
            }
        };
        if cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                left: self.shape(x).to_vec(),
                right: vec![],
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &xv[i * cols..(i + 1) * cols];
            softmax_row(row, &mut out[i * cols..(i + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Softmax(x), false, needs))
    }

    /// Per-row column pick: out[i] = m[i, idx[i]].
    pub fn gather_rows(&mut self, m: Tensor, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.two_d(m, "gather_rows")?;
        if idx.len() != r {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: vec![idx.len()],
                right: vec![r],
            });
        }
        for &j in idx {
            if j >= c {
                return Err(Error::IndexOutOfRange { index: j, bound: c });
            }
        }
        let mv = self.value(m);
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| mv[i * c + j])
            .collect();
        let needs = self.needs(m);
        Ok(self.push(vec![r], out, Op::GatherRows(m, idx.to_vec()), false, needs))
    }

    pub fn sum_rows(&mut self, m: Tensor) -> Result<Tensor> {
        let (r, c) = self.two_d(m, "sum_rows")?;
        let mv = self.value(m);
        let out: Vec<f64> = (0..r)
            .map(|i| mv[i * c..(i + 1) * c].iter().sum())
            .collect();
        let needs = self.needs(m);
        Ok(self.push(vec![r], out, Op::SumRows(m), false, needs))
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let total: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![], vec![total], Op::Sum(x), false, needs)
    }

    pub fn mean(&mut self, x: Tensor) -> Tensor {
        let n = self.numel(x).max(1);
        let total: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![], vec![total / n as f64], Op::Mean(x), false, needs)
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel(x) {
            return Err(Error::DataLength {
                expected: numel_of(shape),
                got: self.numel(x),
            });
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), false, needs))
    }

    /// −ln(max(probs[label], ε)) for a probability vector.
    pub fn cross_entropy(&mut self, probs: Tensor, label: usize) -> Result<Tensor> {
        let n = match self.shape(probs) {
            [n] => *n,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    left: other.to_vec(),
                    right: vec![],
                })
            }
        };
        if label >= n {
            return Err(Error::IndexOutOfRange {
                index: label,
                bound: n,
            });
        }
        let row = self.reshape(probs, &[1, n])?;
        let per_row = self.cross_entropy_rows(row, &[label])?;
        self.reshape(per_row, &[])
    }

    /// Per-sample −ln(max(probs[i, labels[i]], ε)) over a batch of
    /// probability rows; returns a vector of length `rows`.
    pub fn cross_entropy_rows(&mut self, probs: Tensor, labels: &[usize]) -> Result<Tensor> {
        let picked = self.gather_rows(probs, labels)?;
        let logs = self.log_clamped(picked);
        Ok(self.scale(logs, -1.0))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-mode pass from a scalar loss. Clears any previous gradients,
    /// then populates `grad` on every node that reaches a trainable leaf;
    /// trainable leaves with no path to the loss report zeros.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out_grad = self.nodes[i].grad.as_ref().unwrap().clone();
            self.backward_op(i, &op, &out_grad);
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    fn acc(&mut self, t: Tensor, contrib: Vec<f64>) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        match &mut self.nodes[t.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_op(&mut self, node_idx: usize, op: &Op, d: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let bv = self.nodes[b.0].data.clone();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = d[i * n + j];
                            if g != 0.0 {
                                for t in 0..k {
                                    da[i * k + t] += g * bv[t * n + j];
                                }
                            }
                        }
                    }
                    self.acc(a, da);
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].data.clone();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for t in 0..k {
                            let ait = av[i * k + t];
                            if ait != 0.0 {
                                for j in 0..n {
                                    db[t * n + j] += ait * d[i * n + j];
                                }
                            }
                        }
                    }
                    self.acc(b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(a, d.to_vec());
                self.acc(b, d.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(a, d.to_vec());
                self.acc(b, d.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = &self.nodes[b.0].data;
                    let da: Vec<f64> = d.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.acc(a, da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].data;
                    let db: Vec<f64> = d.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.acc(b, db);
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let bv = &self.nodes[b.0].data;
                    let da: Vec<f64> = d.iter().zip(bv).map(|(g, y)| g / y).collect();
                    self.acc(a, da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].data;
                    let bv = &self.nodes[b.0].data;
                    let db: Vec<f64> = d
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.acc(b, db);
                }
            }
            Op::AddRows(m, bias) => {
                let (r, c) = (self.shape(m)[0], self.shape(m)[1]);
                self.acc(m, d.to_vec());
                if self.needs(bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += d[i * c + j];
                        }
                    }
                    self.acc(bias, db);
                }
            }
            Op::ScaleRows(v, m) => {
                let (r, c) = (self.shape(m)[0], self.shape(m)[1]);
                if self.needs(v) {
                    let mv = &self.nodes[m.0].data;
                    let mut dv = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            dv[i] += d[i * c + j] * mv[i * c + j];
                        }
                    }
                    self.acc(v, dv);
                }
                if self.needs(m) {
                    let vv = self.nodes[v.0].data.clone();
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] = d[i * c + j] * vv[i];
                        }
                    }
                    self.acc(m, dm);
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].data;
                let dx: Vec<f64> = d
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(x, dx);
            }
            Op::Sigmoid(x) => {
                let sv = &self.nodes[node_idx].data;
                let dx: Vec<f64> = d.iter().zip(sv).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.acc(x, dx);
            }
            Op::Softmax(x) => {
                let pv = &self.nodes[node_idx].data;
                let (rows, cols) = match self.shape(x) {
                    [n] => (1usize, *n),
                    [r, c] => (*r, *c),
                    _ => unreachable!("softmax input checked at construction"),
                };
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    let p = &pv[i * cols..(i + 1) * cols];
                    let g = &d[i * cols..(i + 1) * cols];
                    let dot: f64 = p.iter().zip(g).map(|(pj, gj)| pj * gj).sum();
                    for j in 0..cols {
                        dx[i * cols + j] = p[j] * (g[j] - dot);
                    }
                }
                self.acc(x, dx);
            }
            Op::LogClamped(x) => {
                let xv = &self.nodes[x.0].data;
                let dx: Vec<f64> = d
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > LOG_FLOOR { g / v } else { 0.0 })
                    .collect();
                self.acc(x, dx);
            }
            Op::PowConst(x, e) => {
                let xv = &self.nodes[x.0].data;
                let dx: Vec<f64> = d
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| {
                        if e == 1.0 {
                            *g
                        } else {
                            g * e * v.powf(e - 1.0)
                        }
                    })
                    .collect();
                self.acc(x, dx);
            }
            Op::Scale(x, c) => {
                self.acc(x, d.iter().map(|g| c * g).collect());
            }
            Op::AddConst(x) => {
                self.acc(x, d.to_vec());
            }
            Op::GatherRows(m, ref idx) => {
                let (r, c) = (self.shape(m)[0], self.shape(m)[1]);
                let mut dm = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    dm[i * c + j] += d[i];
                }
                self.acc(m, dm);
            }
            Op::SumRows(m) => {
                let (r, c) = (self.shape(m)[0], self.shape(m)[1]);
                let mut dm = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dm[i * c + j] = d[i];
                    }
                }
                self.acc(m, dm);
            }
            Op::Sum(x) => {
                let n = self.numel(x);
                self.acc(x, vec![d[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.numel(x).max(1);
                self.acc(x, vec![d[0] / n as f64; n]);
            }
            Op::Reshape(x) => {
                self.acc(x, d.to_vec());
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax of a plain slice, outside any graph. Shares the max-subtraction
/// kernel with the graph op.
pub fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_row(row, &mut out);
    out
}
