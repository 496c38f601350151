//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are
//! assigned in creation order, which is already a topological order, so
//! [`Graph::backward`] walks the records from the loss node down to zero and
//! visits each one exactly once. Graphs are meant to be rebuilt for every
//! forward pass.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Arguments of `log` are clamped to at least this value.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    NegL2Dist(Var, Var),
    StopGradient,
    StraightThrough(Var),
    SegmentMean(Var, Vec<usize>),
    Diag(Var),
    Standardize { x: Var, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record list for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape if nothing reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::dim(op, format!("axis {axis} invalid for rank-2 tensor")));
    }
    Ok(())
}

/// Iterate the lanes of a rank-2 buffer along `axis`: axis 1 yields rows,
/// axis 0 yields columns. Each lane is a list of flat indices.
fn lanes(rows: usize, cols: usize, axis: usize) -> Vec<Vec<usize>> {
    if axis == 1 {
        (0..rows)
            .map(|i| (0..cols).map(|j| i * cols + j).collect())
            .collect()
    } else {
        (0..cols)
            .map(|j| (0..rows).map(|i| i * cols + j).collect())
            .collect()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = self.value(x).dims2(op)?;
        let (rr, rc) = self.value(row).dims2(op)?;
        if rr != 1 || rc != c {
            return Err(Error::dim(op, format!("row {rr}x{rc} against {r}x{c}")));
        }
        Ok((r, c))
    }

    /// `x[i, j] + row[0, j]` for every row `i`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("add_row", x, row)?;
        let xv = self.value(x).data();
        let rv = self.value(row).data();
        let data = (0..r * c).map(|k| xv[k] + rv[k % c]).collect();
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `x[i, j] * row[0, j]` for every row `i`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("mul_row", x, row)?;
        let xv = self.value(x).data();
        let rv = self.value(row).data();
        let data = (0..r * c).map(|k| xv[k] * rv[k % c]).collect();
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Natural log with the argument clamped to [`LOG_EPS`].
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(LOG_EPS).ln());
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Mean along `axis`, keeping the reduced dimension with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", axis)?;
        let (r, c) = self.value(a).dims2("mean_axis")?;
        let d = self.value(a).data();
        let out = if axis == 0 {
            if r == 0 {
                return Err(Error::Empty("mean over zero rows"));
            }
            let mut m = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    m[j] += d[i * c + j];
                }
            }
            m.iter_mut().for_each(|x| *x /= r as f64);
            Tensor::matrix(1, c, m)?
        } else {
            if c == 0 {
                return Err(Error::Empty("mean over zero columns"));
            }
            let m = (0..r)
                .map(|i| d[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                .collect();
            Tensor::matrix(r, 1, m)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanAxis(a, axis), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", axis)?;
        let (r, c) = self.value(a).dims2("softmax")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for lane in lanes(r, c, axis) {
            let max = lane.iter().map(|&k| d[k]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &k in &lane {
                out[k] = (d[k] - max).exp();
                z += out[k];
            }
            for &k in &lane {
                out[k] /= z;
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis("log_softmax", axis)?;
        let (r, c) = self.value(a).dims2("log_softmax")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for lane in lanes(r, c, axis) {
            let max = lane.iter().map(|&k| d[k]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lane.iter().map(|&k| (d[k] - max).exp()).sum::<f64>().ln();
            for &k in &lane {
                out[k] = d[k] - lse;
            }
        }
        let out = Tensor::matrix(r, c, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// `out[l, v] = -||x_l - e_v||_2` for rows `x_l` of `x` and rows `e_v` of `e`.
    pub fn neg_l2_distance_rows(&mut self, x: Var, e: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2("neg_l2_distance_rows")?;
        let (v, d2) = self.value(e).dims2("neg_l2_distance_rows")?;
        if d != d2 {
            return Err(Error::dim(
                "neg_l2_distance_rows",
                format!("row width {d} vs {d2}"),
            ));
        }
        let xv = self.value(x);
        let ev = self.value(e);
        let mut out = vec![0.0; l * v];
        for i in 0..l {
            let xi = xv.row(i);
            for k in 0..v {
                out[i * v + k] = -squared_distance(xi, ev.row(k)).sqrt();
            }
        }
        let out = Tensor::matrix(l, v, out)?;
        let rg = self.rg(&[x, e]);
        Ok(self.push(out, Op::NegL2Dist(x, e), rg))
    }

    /// Forwards the value of `a` and blocks every gradient into it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Forward value `replacement`, backward identity into `x`.
    ///
    /// Equivalent to `x + stop_gradient(replacement - x)` but the forward
    /// value is `replacement` bit for bit.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor) -> Result<Var> {
        self.value(x).same_shape(&replacement, "straight_through")?;
        let rg = self.rg(&[x]);
        Ok(self.push(replacement, Op::StraightThrough(x), rg))
    }

    /// Mean of the row segments `offsets[s]..offsets[s + 1]`.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2("segment_mean")?;
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != r {
            return Err(Error::dim(
                "segment_mean",
                format!("offsets must run from 0 to {r}"),
            ));
        }
        let n = offsets.len() - 1;
        let d = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi <= lo {
                return Err(Error::Empty("segment_mean over an empty segment"));
            }
            for i in lo..hi {
                for j in 0..c {
                    out[s * c + j] += d[i * c + j];
                }
            }
            let len = (hi - lo) as f64;
            out[s * c..(s + 1) * c].iter_mut().for_each(|v| *v /= len);
        }
        let out = Tensor::matrix(n, c, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SegmentMean(x, offsets.to_vec()), rg))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("diag")?;
        if r != c {
            return Err(Error::dim("diag", format!("{r}x{c} is not square")));
        }
        let d = self.value(a).data();
        let out = Tensor::matrix(r, 1, (0..r).map(|i| d[i * c + i]).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Diag(a), rg))
    }

    /// Column-wise standardization with batch statistics:
    /// `(x - mean) / sqrt(var + eps)`, biased variance.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2("standardize")?;
        if r == 0 {
            return Err(Error::Empty("standardize over zero rows"));
        }
        let (mean, var) = column_moments(self.value(x))?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let d = self.value(x).data();
        let data = (0..r * c)
            .map(|k| (d[k] - mean[k % c]) * inv_std[k % c])
            .collect();
        let out = Tensor::matrix(r, c, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Standardize { x, inv_std }, rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.zip_map(bv, "mul", |x, y| x * y)?);
                acc(*b, g.zip_map(av, "mul", |x, y| x * y)?);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddRow(x, row) => {
                let (r, c) = g.dims2("add_row")?;
                let mut rg = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        rg[j] += g.data()[i * c + j];
                    }
                }
                acc(*x, g.clone());
                acc(*row, Tensor::matrix(1, c, rg)?);
            }
            Op::MulRow(x, row) => {
                let (r, c) = g.dims2("mul_row")?;
                let xv = self.value(*x).data();
                let rv = self.value(*row).data();
                let gd = g.data();
                let mut gx = vec![0.0; r * c];
                let mut gr = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        gx[k] = gd[k] * rv[j];
                        gr[j] += gd[k] * xv[k];
                    }
                }
                acc(*x, Tensor::matrix(r, c, gx)?);
                acc(*row, Tensor::matrix(1, c, gr)?);
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul(&bv.transpose()?)?);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, av.transpose()?.matmul(g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Tanh(a) => acc(*a, g.zip_map(out, "tanh", |gi, y| gi * (1.0 - y * y))?),
            Op::Exp(a) => acc(*a, g.zip_map(out, "exp", |gi, y| gi * y)?),
            Op::Log(a) => {
                let av = self.value(*a);
                acc(
                    *a,
                    g.zip_map(av, "log", |gi, x| if x > LOG_EPS { gi / x } else { 0.0 })?,
                );
            }
            Op::Sum(a) => {
                let gi = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), gi));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.value(*a).shape(), g.item() / n));
            }
            Op::MeanAxis(a, axis) => {
                let (r, c) = self.value(*a).dims2("mean_axis")?;
                let gd = g.data();
                let data = if *axis == 0 {
                    (0..r * c).map(|k| gd[k % c] / r as f64).collect()
                } else {
                    (0..r * c).map(|k| gd[k / c] / c as f64).collect()
                };
                acc(*a, Tensor::matrix(r, c, data)?);
            }
            Op::Softmax(a, axis) => {
                let (r, c) = out.dims2("softmax")?;
                let y = out.data();
                let gd = g.data();
                let mut gx = vec![0.0; r * c];
                for lane in lanes(r, c, *axis) {
                    let dot: f64 = lane.iter().map(|&k| gd[k] * y[k]).sum();
                    for &k in &lane {
                        gx[k] = y[k] * (gd[k] - dot);
                    }
                }
                acc(*a, Tensor::matrix(r, c, gx)?);
            }
            Op::LogSoftmax(a, axis) => {
                let (r, c) = out.dims2("log_softmax")?;
                let y = out.data();
                let gd = g.data();
                let mut gx = vec![0.0; r * c];
                for lane in lanes(r, c, *axis) {
                    let total: f64 = lane.iter().map(|&k| gd[k]).sum();
                    for &k in &lane {
                        gx[k] = gd[k] - y[k].exp() * total;
                    }
                }
                acc(*a, Tensor::matrix(r, c, gx)?);
            }
            Op::NegL2Dist(x, e) => {
                let xv = self.value(*x);
                let ev = self.value(*e);
                let (l, d) = xv.dims2("neg_l2_distance_rows")?;
                let v = ev.rows();
                let gd = g.data();
                let mut gx = vec![0.0; l * d];
                let mut ge = vec![0.0; v * d];
                for i in 0..l {
                    let xi = xv.row(i);
                    for k in 0..v {
                        let dist = -out.data()[i * v + k];
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = gd[i * v + k] / dist;
                        let ek = ev.row(k);
                        for j in 0..d {
                            let diff = xi[j] - ek[j];
                            gx[i * d + j] -= coef * diff;
                            ge[k * d + j] += coef * diff;
                        }
                    }
                }
                acc(*x, Tensor::matrix(l, d, gx)?);
                acc(*e, Tensor::matrix(v, d, ge)?);
            }
            Op::StraightThrough(x) => acc(*x, g.clone()),
            Op::SegmentMean(x, offsets) => {
                let (r, c) = self.value(*x).dims2("segment_mean")?;
                let gd = g.data();
                let mut gx = vec![0.0; r * c];
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let len = (hi - lo) as f64;
                    for i in lo..hi {
                        for j in 0..c {
                            gx[i * c + j] = gd[s * c + j] / len;
                        }
                    }
                }
                acc(*x, Tensor::matrix(r, c, gx)?);
            }
            Op::Diag(a) => {
                let n = g.rows();
                let mut gx = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    gx.data_mut()[i * n + i] = g.data()[i];
                }
                acc(*a, gx);
            }
            Op::Standardize { x, inv_std } => {
                let (r, c) = out.dims2("standardize")?;
                let y = out.data();
                let gd = g.data();
                let mut mean_g = vec![0.0; c];
                let mut mean_gy = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        mean_g[j] += gd[i * c + j];
                        mean_gy[j] += gd[i * c + j] * y[i * c + j];
                    }
                }
                let n = r as f64;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        gx[k] = inv_std[j] * (gd[k] - mean_g[j] / n - y[k] * mean_gy[j] / n);
                    }
                }
                acc(*x, Tensor::matrix(r, c, gx)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-column mean and biased variance of a rank-2 tensor.
pub fn column_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (r, c) = x.dims2("column_moments")?;
    if r == 0 {
        return Err(Error::Empty("column moments of zero rows"));
    }
    let d = x.data();
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            mean[j] += d[i * c + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mut var = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let dv = d[i * c + j] - mean[j];
            var[j] += dv * dv;
        }
    }
    var.iter_mut().for_each(|v| *v /= r as f64);
    Ok((mean, var))
}
