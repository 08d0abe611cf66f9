//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; row vectors (`1 × n`) stand in for biases and
//! `1 × 1` matrices for scalar losses. A [`Graph`] borrows a [`ParamStore`] so
//! parameters enter the tape as leaves and their gradients can be collected
//! after [`Graph::backward`].

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Named parameter matrices in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` means "never touched".
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { slots: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    /// Adds a constant; gradient passes straight through.
    AddConst(Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        pos_weight: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        denom: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// A single forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Matrix>>,
    train: bool,
    rng: Option<ChaCha8Rng>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            train: false,
            rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn train(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(params);
        g.train = true;
        g.rng = Some(rng);
        g
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 x n bias");
        let out = self.value(a) + r;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).mapv(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let out = self.value(a) * &mask;
        self.push(out, Op::MulConst(a, mask))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let dim = self.value(a).dim();
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let mask = Matrix::from_shape_fn(dim, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.mul_const(a, mask)
    }

    /// Row lookup into `table`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&t.row(r));
        }
        self.push(out, Op::Gather(table, rows.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Matrix::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise softmax. Rows may contain `-inf` entries as long as at least
    /// one entry per row is finite.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            row.map_inplace(|v| {
                *v = (*v - max).exp();
                sum += *v;
            });
            let inv = 1.0 / sum;
            row.map_inplace(|v| *v *= inv);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x))));
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean binary cross-entropy over the rows of an `n × 1` logit column.
    /// Positive targets are weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], pos_weight: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), (targets.len(), 1));
        let n = targets.len() as f64;
        let total: f64 = z
            .column(0)
            .iter()
            .zip(targets)
            .map(|(&zi, &y)| bce_term(zi, y, pos_weight))
            .sum();
        self.push(
            Matrix::from_elem((1, 1), total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
        )
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len());
        let mut probs = z.clone();
        let mut total = 0.0;
        let mut count = 0usize;
        for (mut row, target) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
            if let Some(t) = *target {
                total += lse - row[t];
                count += 1;
            }
            row.mapv_inplace(|v| (v - lse).exp());
        }
        assert!(count > 0, "cross_entropy needs at least one target");
        let denom = count as f64;
        self.push(
            Matrix::from_elem((1, 1), total / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                denom,
            },
        )
    }

    fn acc_grad(&mut self, v: Var, g: Matrix) {
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates from a `1 × 1` output and returns parameter gradients.
    pub fn backward(&mut self, output: Var) -> Grads {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(dy) = self.grads[idx].take() else {
                continue;
            };
            // Take the op out so the borrow checker lets us push grads.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            match &op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    self.acc_grad(*a, da);
                    self.acc_grad(*b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.dot(self.value(*b));
                    let db = dy.t().dot(self.value(*a));
                    self.acc_grad(*a, da);
                    self.acc_grad(*b, db);
                }
                Op::Add(a, b) => {
                    self.acc_grad(*a, dy.clone());
                    self.acc_grad(*b, dy.clone());
                }
                Op::AddRow(a, row) => {
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc_grad(*a, dy.clone());
                    self.acc_grad(*row, dr);
                }
                Op::AddConst(a) => self.acc_grad(*a, dy.clone()),
                Op::Scale(a, f) => self.acc_grad(*a, dy.mapv(|v| v * f)),
                Op::MulConst(a, mask) => self.acc_grad(*a, &dy * mask),
                Op::Gather(table, rows) => {
                    let mut dt = Matrix::zeros(self.value(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut target = dt.row_mut(r);
                        target += &dy.row(i);
                    }
                    self.acc_grad(*table, dt);
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Matrix::zeros(self.value(*a).dim());
                    da.slice_mut(s![.., *start..*end]).assign(&dy);
                    self.acc_grad(*a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let dp = dy.slice(s![.., at..at + w]).to_owned();
                        self.acc_grad(p, dp);
                        at += w;
                    }
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = y * &dy;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &yv| *d -= yv * dot);
                    }
                    self.acc_grad(*a, dx);
                }
                Op::Gelu(a) => {
                    let dx = Zip::from(self.value(*a)).and(&dy).map_collect(|&x, &d| {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let t = tanh(inner);
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                    });
                    self.acc_grad(*a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let dgamma = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &dy * gv;
                    let n = xhat.ncols() as f64;
                    let mut dx = Matrix::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dh = dxhat.row(i);
                        let h = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.dot(&h);
                        let is = inv_std[i];
                        let mut out = dx.row_mut(i);
                        Zip::from(&mut out).and(&dh).and(&h).for_each(|o, &d, &hv| {
                            *o = is / n * (n * d - sum_dh - hv * sum_dh_h);
                        });
                    }
                    self.acc_grad(*x, dx);
                    self.acc_grad(*gamma, dgamma);
                    self.acc_grad(*beta, dbeta);
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    pos_weight,
                } => {
                    let upstream = dy[[0, 0]];
                    let n = targets.len() as f64;
                    let z = self.value(*logits);
                    let mut dz = Matrix::zeros(z.dim());
                    for (i, &y) in targets.iter().enumerate() {
                        let p = sigmoid(z[[i, 0]]);
                        let g = pos_weight * y * (p - 1.0) + (1.0 - y) * p;
                        dz[[i, 0]] = upstream * g / n;
                    }
                    self.acc_grad(*logits, dz);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    denom,
                } => {
                    let upstream = dy[[0, 0]];
                    let mut dz = Matrix::zeros(probs.dim());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let mut row = dz.row_mut(i);
                            row.assign(&probs.row(i));
                            row[t] -= 1.0;
                            row.mapv_inplace(|v| v * upstream / denom);
                        }
                    }
                    self.acc_grad(*logits, dz);
                }
            }
            self.nodes[idx].op = op;
            self.grads[idx] = Some(dy);
        }

        let mut grads = Grads::zeros_like(self.params);
        for (&id, &var) in &self.param_vars {
            grads.slots[id.0] = self.grads[var.0].clone();
        }
        grads
    }
}

/// `tanh` through one `exp`, with a series branch near zero where the
/// quotient loses precision.
fn tanh(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        return x * (1.0 - x * x / 3.0);
    }
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Weighted binary cross-entropy of one logit.
pub fn bce_term(z: f64, y: f64, pos_weight: f64) -> f64 {
    pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z)
}
