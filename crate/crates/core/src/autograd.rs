//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParameterStore`], so building a tape never
//! copies weights. Tapes are single-threaded; independent images get
//! independent tapes and their [`Gradients`] are reduced afterwards.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};

use crate::error::{shape_err, Result};
use crate::nn::params::ParameterStore;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        x: Var,
        index: Vec<usize>,
        weight: Vec<f64>,
    },
    BroadcastRows(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Mix {
        a: Var,
        b: Var,
        rho: Var,
    },
    FocalLoss {
        logits: Var,
        targets: Mat,
        alpha: f64,
        gamma: f64,
    },
    Dot(Var, Mat),
}

struct Node<'s> {
    value: Cow<'s, Mat>,
    op: Op,
}

pub const LN_EPS: f64 = 1e-5;

pub struct Tape<'s> {
    nodes: Vec<Node<'s>>,
    params: HashMap<String, Var>,
    param_order: Vec<(Var, String, bool)>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    fn push(&mut self, value: Cow<'s, Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Mat, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Leaf whose gradient is available from [`Gradients::get`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    pub fn constant_ref(&mut self, value: &'s Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Leaf bound to a named store tensor. Repeated requests for the same
    /// name return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &'s ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf);
        self.params.insert(name.to_string(), v);
        self.param_order.push((v, name.to_string(), p.trainable));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(shape_err("matmul", (ac, bc), (br, bc)));
        }
        let out = self.value(a).dot(self.value(b));
        Ok(self.push_owned(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a) + self.value(b);
        Ok(self.push_owned(out, Op::Add(a, b)))
    }

    /// `a + row`, with `row` (1 x n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(shape_err("add_row", (1, ac), self.shape(row)));
        }
        let out = self.value(a) + self.value(row);
        Ok(self.push_owned(out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a) * self.value(b);
        Ok(self.push_owned(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push_owned(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push_owned(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push_owned(out, Op::Sigmoid(a))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.shape(x);
        if self.shape(gain) != (1, d) {
            return Err(shape_err("layer_norm gain", (1, d), self.shape(gain)));
        }
        if self.shape(bias) != (1, d) {
            return Err(shape_err("layer_norm bias", (1, d), self.shape(bias)));
        }
        let xv = self.value(x);
        let mut xhat = Mat::zeros((rows, d));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        Ok(self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat_cols", (rows, self.shape(p).1), self.shape(p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push_owned(out, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), index);
        self.push_owned(out, Op::GatherRows(a, index.to_vec()))
    }

    /// `out[index[r]] += weight[r] * x[r]` into a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, index: &[usize], weight: &[f64], rows: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((rows, xv.ncols()));
        for (r, (&i, &w)) in index.iter().zip(weight).enumerate() {
            out.row_mut(i).scaled_add(w, &xv.row(r));
        }
        self.push_owned(
            out,
            Op::ScatterRows {
                x,
                index: index.to_vec(),
                weight: weight.to_vec(),
            },
        )
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if ar != 1 {
            return Err(shape_err("broadcast_rows", (1, ac), (ar, ac)));
        }
        let row = self.value(a).row(0).to_owned();
        let out = Mat::from_shape_fn((rows, ac), |(_, c)| row[c]);
        Ok(self.push_owned(out, Op::BroadcastRows(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push_owned(out, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push_owned(out, Op::Transpose(a))
    }

    /// `rho * a + (1 - rho) * b` with a 1 x 1 `rho`.
    pub fn mix(&mut self, a: Var, b: Var, rho: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mix", self.shape(a), self.shape(b)));
        }
        if self.shape(rho) != (1, 1) {
            return Err(shape_err("mix rho", (1, 1), self.shape(rho)));
        }
        let r = self.value(rho)[[0, 0]];
        let out = self.value(a) * r + self.value(b) * (1.0 - r);
        Ok(self.push_owned(out, Op::Mix { a, b, rho }))
    }

    /// Mean sigmoid focal loss over every entry of `logits`.
    pub fn focal_loss(&mut self, logits: Var, targets: &Mat, alpha: f64, gamma: f64) -> Result<Var> {
        if self.shape(logits) != targets.dim() {
            return Err(shape_err("focal_loss", targets.dim(), self.shape(logits)));
        }
        let value = focal_loss_value(self.value(logits), targets, alpha, gamma);
        Ok(self.push_owned(
            Mat::from_elem((1, 1), value),
            Op::FocalLoss {
                logits,
                targets: targets.clone(),
                alpha,
                gamma,
            },
        ))
    }

    /// `sum(a * w)` for a constant `w`; a convenient scalar head.
    pub fn dot_const(&mut self, a: Var, w: Mat) -> Result<Var> {
        if self.shape(a) != w.dim() {
            return Err(shape_err("dot_const", w.dim(), self.shape(a)));
        }
        let v = (self.value(a) * &w).sum();
        Ok(self.push_owned(Mat::from_elem((1, 1), v), Op::Dot(a, w)))
    }

    /// Backpropagates from a 1 x 1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar node");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc_ref(&mut grads, *a, &g);
                    acc_ref(&mut grads, *b, &g);
                }
                Op::AddRow(a, row) => {
                    acc_ref(&mut grads, *a, &g);
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = is / d * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for (r, &src) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterRows { x, index, weight } => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (r, (&i, &w)) in index.iter().zip(weight).enumerate() {
                        gx.row_mut(r).scaled_add(w, &g.row(i));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BroadcastRows(a) => {
                    acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot = g.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Mix { a, b, rho } => {
                    let r = self.value(*rho)[[0, 0]];
                    let diff = self.value(*a) - self.value(*b);
                    let grho = (&g * &diff).sum();
                    acc(&mut grads, *a, &g * r);
                    acc(&mut grads, *b, &g * (1.0 - r));
                    acc(&mut grads, *rho, Mat::from_elem((1, 1), grho));
                }
                Op::FocalLoss {
                    logits,
                    targets,
                    alpha,
                    gamma,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut gl = Mat::zeros(targets.raw_dim());
                    for ((gv, &z), &t) in gl.iter_mut().zip(self.value(*logits)).zip(targets) {
                        *gv = scale * focal_grad(z, t, *alpha, *gamma);
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Dot(a, w) => acc(&mut grads, *a, w * g[[0, 0]]),
            }
            grads[i] = Some(g);
        }

        let params = self
            .param_order
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(v, name, _)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Mat::zeros(self.value(*v).raw_dim()));
                (name.clone(), g)
            })
            .collect();
        Gradients { nodes: grads, params }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn acc_ref(grads: &mut [Option<Mat>], v: Var, g: &Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Gradients of one backward pass: per node, and per trainable parameter name.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: BTreeMap<String, Mat>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_params(self) -> BTreeMap<String, Mat> {
        self.params
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal term for one logit: `-alpha_t (1 - p_t)^gamma ln p_t`.
pub fn focal_term(z: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(z);
    if target > 0.5 {
        // ln p = -softplus(-z)
        alpha * (1.0 - p).powf(gamma) * softplus(-z)
    } else {
        (1.0 - alpha) * p.powf(gamma) * softplus(z)
    }
}

fn focal_grad(z: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(z);
    let q = 1.0 - p;
    if target > 0.5 {
        // d/dz of -alpha q^gamma ln p
        alpha * q.powf(gamma) * (-gamma * p * softplus(-z) - q)
    } else {
        (1.0 - alpha) * p.powf(gamma) * (p + gamma * q * softplus(z))
    }
}

pub fn focal_loss_value(logits: &Mat, targets: &Mat, alpha: f64, gamma: f64) -> f64 {
    let n = logits.len();
    if n == 0 {
        return 0.0;
    }
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| focal_term(z, t, alpha, gamma))
        .sum::<f64>()
        / n as f64
}
