//! Reverse-mode differentiation over coarse tensor ops.
//!
//! Ops evaluate eagerly and record themselves; [`Tape::backward`] replays the
//! record in reverse. A tape lives for one forward/backward pass and is then
//! dropped, so nothing carries over between training steps.

use crate::error::{dim_err, Error, Result};
use crate::nd::func::{self, HALF_LN_2PI};
use crate::nd::tensor::{gemm, MatView, Tensor};
use crate::rng::RngStream;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Swish(Var),
    Softplus(Var),
    LayerNorm { x: Var, gain: Var, xhat: Tensor, inv_std: Vec<f64>, shift: Var },
    Broadcast(Var),
    RepeatRows { a: Var, k: usize },
    GaussianLogLik { x: Tensor, mask: Tensor, mu: Var, sigma: Var },
    MaskedSqErr { x: Tensor, mask: Tensor, mu: Var },
    NormalLogPdf { z: Var, mu: Var, sigma: Var },
    StdNormalLogPdf(Var),
    KlStdNormal { mu: Var, sigma: Var },
    GroupLogMeanExp { a: Var, k: usize, weights: Vec<f64> },
    GroupMean { a: Var, k: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when `v` did not influence the output.
    pub fn take_or_zeros(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return dim_err(format!("{op}: expected a matrix, got shape {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Affine { x, w, b } => self.rg(*x) || self.rg(*w) || self.rg(*b),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Swish(a)
            | Op::Softplus(a)
            | Op::Broadcast(a)
            | Op::RepeatRows { a, .. }
            | Op::StdNormalLogPdf(a)
            | Op::GroupLogMeanExp { a, .. }
            | Op::GroupMean { a, .. }
            | Op::Sum(a)
            | Op::Mean(a) => self.rg(*a),
            Op::LayerNorm { x, gain, shift, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*shift),
            Op::GaussianLogLik { mu, sigma, .. } => self.rg(*mu) || self.rg(*sigma),
            Op::MaskedSqErr { mu, .. } => self.rg(*mu),
            Op::NormalLogPdf { z, mu, sigma } => self.rg(*z) || self.rg(*mu) || self.rg(*sigma),
            Op::KlStdNormal { mu, sigma } => self.rg(*mu) || self.rg(*sigma),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Row-wise `W x_i + b` for `x: [n, d]`, `w: [o, d]`, `b: [o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "affine input")?;
        let (o, d2) = matrix_dims(self.value(w), "affine weight")?;
        if d != d2 {
            return dim_err(format!("affine: input has {d} columns, weight expects {d2}"));
        }
        if self.value(b).len() != o {
            return dim_err(format!("affine: bias length {} != {o}", self.value(b).len()));
        }
        let mut out = vec![0.0; n * o];
        gemm(
            MatView::normal(self.value(x).data(), n, d),
            MatView::transposed(self.value(w).data(), d, o),
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(o) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        self.push(Tensor::from_parts(vec![n, o], out), Op::Affine { x, w, b }, "affine")
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        same_shape(self.value(a), &c, "mul_const")?;
        let data = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_parts(c.shape().to_vec(), data);
        self.push(v, Op::MulConst(a, c), "mul_const")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(func::swish);
        self.push(v, Op::Swish(a), "swish")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(func::softplus);
        self.push(v, Op::Softplus(a), "softplus")
    }

    /// Per-row normalisation with learnable gain and shift of length `h >= 2`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (n, h) = matrix_dims(self.value(x), "layer_norm")?;
        if h < 2 {
            return dim_err(format!("layer_norm needs at least 2 features, got {h}"));
        }
        if self.value(gain).len() != h || self.value(shift).len() != h {
            return dim_err("layer_norm: gain/shift length mismatch");
        }
        let xv = self.value(x).data();
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut xhat = vec![0.0; n * h];
        let mut out = vec![0.0; n * h];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * h..(i + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..h {
                let xh = (row[j] - mean) * inv;
                xhat[i * h + j] = xh;
                out[i * h + j] = xh * g[j] + s[j];
            }
        }
        let xhat = Tensor::from_parts(vec![n, h], xhat);
        self.push(
            Tensor::from_parts(vec![n, h], out),
            Op::LayerNorm { x, gain, xhat, inv_std, shift },
            "layer_norm",
        )
    }

    /// Inverted dropout. Identity when `rng` is `None` or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut RngStream>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(x).shape().to_vec();
        let len = self.value(x).len();
        let mask = (0..len)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, Tensor::from_parts(shape, mask))
    }

    /// Broadcast a scalar (length 1) or a row (length `cols`) to `[rows, cols]`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a).data();
        let data = match src.len() {
            1 => vec![src[0]; rows * cols],
            l if l == cols => {
                let mut d = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    d.extend_from_slice(src);
                }
                d
            }
            l => return dim_err(format!("broadcast: cannot expand length {l} to {cols} columns")),
        };
        self.push(Tensor::from_parts(vec![rows, cols], data), Op::Broadcast(a), "broadcast")
    }

    /// Each row repeated `k` times consecutively: row `i*k + j` is row `i`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::Parameter("repeat_rows: k must be >= 1".into()));
        }
        if k == 1 {
            return Ok(a);
        }
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len() * k);
        for i in 0..t.rows() {
            for _ in 0..k {
                data.extend_from_slice(t.row(i));
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] *= k;
        debug_assert_eq!(data.len(), shape[0] * c);
        self.push(Tensor::from_parts(shape, data), Op::RepeatRows { a, k }, "repeat_rows")
    }

    /// Per-row Gaussian log density over observed cells (mask 1), `[n]`.
    pub fn gaussian_loglik(&mut self, x: Tensor, mask: Tensor, mu: Var, sigma: Var) -> Result<Var> {
        let (n, p) = matrix_dims(&x, "gaussian_loglik")?;
        same_shape(&x, &mask, "gaussian_loglik mask")?;
        same_shape(&x, self.value(mu), "gaussian_loglik mean")?;
        same_shape(&x, self.value(sigma), "gaussian_loglik sigma")?;
        let (m, s) = (self.value(mu).data(), self.value(sigma).data());
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            for j in i * p..(i + 1) * p {
                if mask.data()[j] != 0.0 {
                    let r = (x.data()[j] - m[j]) / s[j];
                    *o += mask.data()[j] * (-0.5 * r * r - s[j].ln() - HALF_LN_2PI);
                }
            }
        }
        self.push(Tensor::vector(out), Op::GaussianLogLik { x, mask, mu, sigma }, "gaussian_loglik")
    }

    /// Per-row masked squared error `Σ mask (x - mu)^2`, `[n]`.
    pub fn masked_sq_err(&mut self, x: Tensor, mask: Tensor, mu: Var) -> Result<Var> {
        let (n, p) = matrix_dims(&x, "masked_sq_err")?;
        same_shape(&x, &mask, "masked_sq_err mask")?;
        same_shape(&x, self.value(mu), "masked_sq_err mean")?;
        let m = self.value(mu).data();
        let out = (0..n)
            .map(|i| {
                (i * p..(i + 1) * p)
                    .map(|j| {
                        let d = x.data()[j] - m[j];
                        mask.data()[j] * d * d
                    })
                    .sum()
            })
            .collect();
        self.push(Tensor::vector(out), Op::MaskedSqErr { x, mask, mu }, "masked_sq_err")
    }

    /// Per-row diagonal Gaussian log density `log N(z; mu, diag(sigma^2))`, `[n]`.
    pub fn normal_log_pdf(&mut self, z: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(z), "normal_log_pdf")?;
        same_shape(self.value(z), self.value(mu), "normal_log_pdf mean")?;
        same_shape(self.value(z), self.value(sigma), "normal_log_pdf sigma")?;
        let (zv, m, s) = (self.value(z).data(), self.value(mu).data(), self.value(sigma).data());
        let out = (0..n)
            .map(|i| {
                let r = i * d..(i + 1) * d;
                func::normal_log_pdf(&zv[r.clone()], &m[r.clone()], &s[r])
            })
            .collect();
        self.push(Tensor::vector(out), Op::NormalLogPdf { z, mu, sigma }, "normal_log_pdf")
    }

    /// Per-row standard normal log density, `[n]`.
    pub fn std_normal_log_pdf(&mut self, z: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(z), "std_normal_log_pdf")?;
        let zv = self.value(z).data();
        let out = (0..n)
            .map(|i| zv[i * d..(i + 1) * d].iter().map(|v| -0.5 * v * v - HALF_LN_2PI).sum())
            .collect();
        self.push(Tensor::vector(out), Op::StdNormalLogPdf(z), "std_normal_log_pdf")
    }

    /// Per-row `KL(N(mu, sigma^2) || N(0, I))`, `[n]`.
    pub fn kl_std_normal(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(mu), "kl_std_normal")?;
        same_shape(self.value(mu), self.value(sigma), "kl_std_normal")?;
        let (m, s) = (self.value(mu).data(), self.value(sigma).data());
        let out = (0..n)
            .map(|i| {
                (i * d..(i + 1) * d)
                    .map(|j| 0.5 * (m[j] * m[j] + s[j] * s[j] - 1.0 - 2.0 * s[j].ln()))
                    .sum()
            })
            .collect();
        self.push(Tensor::vector(out), Op::KlStdNormal { mu, sigma }, "kl_std_normal")
    }

    /// `ln((1/k) Σ_j exp(a[i*k + j]))` for each group of `k` consecutive entries.
    pub fn group_log_mean_exp(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        if k == 0 || !t.len().is_multiple_of(k) {
            return dim_err(format!("group_log_mean_exp: length {} not divisible by {k}", t.len()));
        }
        let mut out = Vec::with_capacity(t.len() / k);
        let mut weights = Vec::with_capacity(t.len());
        for g in t.data().chunks_exact(k) {
            let lse = func::log_sum_exp(g);
            out.push(lse - (k as f64).ln());
            weights.extend(g.iter().map(|v| (v - lse).exp()));
        }
        self.push(Tensor::vector(out), Op::GroupLogMeanExp { a, k, weights }, "group_log_mean_exp")
    }

    /// Mean of each group of `k` consecutive entries.
    pub fn group_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        if k == 0 || !t.len().is_multiple_of(k) {
            return dim_err(format!("group_mean: length {} not divisible by {k}", t.len()));
        }
        if k == 1 {
            return Ok(a);
        }
        let out = t.data().chunks_exact(k).map(|g| g.iter().sum::<f64>() / k as f64).collect();
        self.push(Tensor::vector(out), Op::GroupMean { a, k }, "group_mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return dim_err("mean of empty tensor");
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), "mean")
    }

    /// Gradients of the scalar `out` with respect to every recorded value.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return dim_err(format!("backward needs a scalar, got shape {:?}", self.value(out).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if let Some(t) = g {
                t.ensure_finite("gradient")?;
            }
            if !node.requires_grad {
                *g = None;
            }
        }
        grads.resize_with(self.nodes.len(), || None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(contribution.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out_shape = self.nodes[i].value.shape();
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, o) = (out_shape[0], out_shape[1]);
                let d = self.value(*x).shape()[1];
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d];
                    gemm(MatView::normal(gd, n, o), MatView::normal(self.value(*w).data(), o, d), 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::from_parts(vec![n, d], dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; o * d];
                    gemm(MatView::transposed(gd, o, n), MatView::normal(self.value(*x).data(), n, d), 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::from_parts(vec![o, d], dw));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; o];
                    for row in gd.chunks_exact(o) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(out_shape.to_vec(), d));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(out_shape.to_vec(), d));
                }
            }
            Op::MulConst(a, c) => {
                let d = gd.iter().zip(c.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, Tensor::from_parts(out_shape.to_vec(), d));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Swish(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g * func::swish_grad(*x)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(out_shape.to_vec(), d));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g * func::sigmoid(*x)).collect();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, d));
            }
            Op::LayerNorm { x, gain, xhat, inv_std, shift } => {
                let (n, h) = (out_shape[0], out_shape[1]);
                let gv = self.value(*gain).data();
                let xh = xhat.data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * h];
                    for r in 0..n {
                        let span = r * h..(r + 1) * h;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in span.clone() {
                            let dxh = gd[j] * gv[j - r * h];
                            sum_d += dxh;
                            sum_dx += dxh * xh[j];
                        }
                        let scale = inv_std[r] / h as f64;
                        for j in span {
                            let dxh = gd[j] * gv[j - r * h];
                            dx[j] = scale * (h as f64 * dxh - sum_d - xh[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![n, h], dx));
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; h];
                    for r in 0..n {
                        for j in 0..h {
                            dg[j] += gd[r * h + j] * xh[r * h + j];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::from_parts(shape, dg));
                }
                if self.rg(*shift) {
                    let mut ds = vec![0.0; h];
                    for row in gd.chunks_exact(h) {
                        ds.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    let shape = self.value(*shift).shape().to_vec();
                    self.accumulate(grads, *shift, Tensor::from_parts(shape, ds));
                }
            }
            Op::Broadcast(a) => {
                let src = self.value(*a);
                let cols = out_shape[1];
                let mut d = vec![0.0; src.len()];
                if src.len() == 1 {
                    d[0] = gd.iter().sum();
                } else {
                    for row in gd.chunks_exact(cols) {
                        d.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(src.shape().to_vec(), d));
            }
            Op::RepeatRows { a, k } => {
                let src = self.value(*a);
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                for (r, chunk) in gd.chunks_exact(c * k).enumerate() {
                    let dst = &mut d[r * c..(r + 1) * c];
                    for rep in chunk.chunks_exact(c) {
                        dst.iter_mut().zip(rep).for_each(|(a, v)| *a += v);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(src.shape().to_vec(), d));
            }
            Op::GaussianLogLik { x, mask, mu, sigma } => {
                let p = x.cols();
                let (m, s) = (self.value(*mu).data(), self.value(*sigma).data());
                let mut dmu = vec![0.0; x.len()];
                let mut dsig = vec![0.0; x.len()];
                for (j, (dm, ds)) in dmu.iter_mut().zip(dsig.iter_mut()).enumerate() {
                    let w = mask.data()[j];
                    if w != 0.0 {
                        let r = (x.data()[j] - m[j]) / s[j];
                        let gi = gd[j / p] * w;
                        *dm = gi * r / s[j];
                        *ds = gi * (r * r - 1.0) / s[j];
                    }
                }
                self.accumulate(grads, *mu, Tensor::from_parts(x.shape().to_vec(), dmu));
                self.accumulate(grads, *sigma, Tensor::from_parts(x.shape().to_vec(), dsig));
            }
            Op::MaskedSqErr { x, mask, mu } => {
                let p = x.cols();
                let m = self.value(*mu).data();
                let d = (0..x.len())
                    .map(|j| -2.0 * gd[j / p] * mask.data()[j] * (x.data()[j] - m[j]))
                    .collect();
                self.accumulate(grads, *mu, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::NormalLogPdf { z, mu, sigma } => {
                let shape = self.value(*z).shape().to_vec();
                let d = shape[1];
                let (zv, m, s) = (self.value(*z).data(), self.value(*mu).data(), self.value(*sigma).data());
                let len = zv.len();
                let mut dz = vec![0.0; len];
                let mut dsig = vec![0.0; len];
                for j in 0..len {
                    let r = (zv[j] - m[j]) / s[j];
                    dz[j] = -gd[j / d] * r / s[j];
                    dsig[j] = gd[j / d] * (r * r - 1.0) / s[j];
                }
                let dmu: Vec<f64> = dz.iter().map(|v| -v).collect();
                self.accumulate(grads, *z, Tensor::from_parts(shape.clone(), dz));
                self.accumulate(grads, *mu, Tensor::from_parts(shape.clone(), dmu));
                self.accumulate(grads, *sigma, Tensor::from_parts(shape, dsig));
            }
            Op::StdNormalLogPdf(z) => {
                let t = self.value(*z);
                let d = t.cols();
                let dz = t.data().iter().enumerate().map(|(j, v)| -gd[j / d] * v).collect();
                self.accumulate(grads, *z, Tensor::from_parts(t.shape().to_vec(), dz));
            }
            Op::KlStdNormal { mu, sigma } => {
                let t = self.value(*mu);
                let d = t.cols();
                let s = self.value(*sigma).data();
                let dmu = t.data().iter().enumerate().map(|(j, m)| gd[j / d] * m).collect();
                let dsig = s.iter().enumerate().map(|(j, s)| gd[j / d] * (s - 1.0 / s)).collect();
                self.accumulate(grads, *mu, Tensor::from_parts(t.shape().to_vec(), dmu));
                self.accumulate(grads, *sigma, Tensor::from_parts(t.shape().to_vec(), dsig));
            }
            Op::GroupLogMeanExp { a, k, weights } => {
                let d = weights.iter().enumerate().map(|(j, w)| gd[j / k] * w).collect();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, d));
            }
            Op::GroupMean { a, k } => {
                let len = self.value(*a).len();
                let d = (0..len).map(|j| gd[j / k] / *k as f64).collect();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, d));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = gd[0] / t.len() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::gradcheck::{gradcheck, gradcheck_many};

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_hand_case() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 2, &[1.0, 2.0]));
        let w = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        let x = t.constant(m(1, 2, &[1.0, 1.0]));
        let w = t.constant(m(1, 2, &[2.0, 3.0]));
        let b = t.constant(Tensor::vector(vec![1.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
        assert_eq!(t.value(y).shape(), &[1, 1]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 3, &[1.0, 2.0, 3.0]));
        let w = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(t.affine(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn affine_gradcheck() {
        let mut rng = RngStream::new(1);
        let x = rng.normal_tensor(&[3, 4]);
        let w = rng.normal_tensor(&[5, 4]);
        let b = rng.normal_tensor(&[5]);
        let err = gradcheck_many(&[x, w, b], 1e-5, |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_values() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::full(&[4], 1.0));
        let s = t.constant(Tensor::zeros(&[4]));
        let x = t.constant(m(1, 4, &[3.0; 4]));
        let y = t.layer_norm(x, g, s).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));

        let g = t.constant(Tensor::full(&[2], 1.0));
        let s = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(m(1, 2, &[1.0, -1.0]));
        let y = t.layer_norm(x, g, s).unwrap();
        let want = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((t.value(y).data()[0] - want).abs() < 1e-15);
        assert!((t.value(y).data()[1] + want).abs() < 1e-15);

        let x = t.constant(m(2, 1, &[1.0, 2.0]));
        let g1 = t.constant(Tensor::full(&[1], 1.0));
        let s1 = t.constant(Tensor::zeros(&[1]));
        assert!(matches!(t.layer_norm(x, g1, s1), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = RngStream::new(2);
        let x = rng.normal_tensor(&[2, 8]);
        let g = rng.normal_tensor(&[8]);
        let s = rng.normal_tensor(&[8]);
        let weights = rng.normal_tensor(&[2, 8]);
        let err = gradcheck_many(&[x, g, s], 1e-5, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            // weighted sum so the gradient is not trivially zero
            let y = t.mul_const(y, weights.clone())?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn elementwise_gradchecks() {
        let mut rng = RngStream::new(3);
        let x = rng.normal_tensor(&[3, 3]).map(|v| 3.0 * v);
        let err = gradcheck(&x, 1e-5, |t, v| {
            let a = t.swish(v)?;
            let b = t.softplus(v)?;
            let c = t.mul(a, b)?;
            let c = t.sub(c, v)?;
            let c = t.scale(c, 0.7)?;
            t.mean(c)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn density_ops_gradcheck() {
        let mut rng = RngStream::new(4);
        let z = rng.normal_tensor(&[4, 3]);
        let mu = rng.normal_tensor(&[4, 3]);
        let s = rng.normal_tensor(&[4, 3]);
        let x = rng.normal_tensor(&[4, 3]);
        let mask = Tensor::new(vec![4, 3], (0..12).map(|i| (i % 3 != 1) as u8 as f64).collect()).unwrap();
        let err = gradcheck_many(&[z, mu, s], 1e-5, |t, v| {
            let sig = t.softplus(v[2])?;
            let a = t.normal_log_pdf(v[0], v[1], sig)?;
            let b = t.std_normal_log_pdf(v[0])?;
            let c = t.kl_std_normal(v[1], sig)?;
            let d = t.gaussian_loglik(x.clone(), mask.clone(), v[1], sig)?;
            let e = t.masked_sq_err(x.clone(), mask.clone(), v[0])?;
            let ab = t.add(a, b)?;
            let cd = t.sub(c, d)?;
            let all = t.add(ab, cd)?;
            let all = t.add(all, e)?;
            let l = t.group_log_mean_exp(all, 2)?;
            t.sum(l)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = RngStream::new(5);
        let a = rng.normal_tensor(&[3, 2]);
        let row = rng.normal_tensor(&[2]);
        let sc = rng.normal_tensor(&[1]);
        let w = rng.normal_tensor(&[6, 2]);
        let err = gradcheck_many(&[a, row, sc], 1e-5, |t, v| {
            let r = t.repeat_rows(v[0], 2)?;
            let b = t.broadcast(v[1], 6, 2)?;
            let c = t.broadcast(v[2], 6, 2)?;
            let s = t.add(r, b)?;
            let s = t.mul(s, c)?;
            let s = t.mul_const(s, w.clone())?;
            let rows = t.std_normal_log_pdf(s)?;
            let g = t.group_mean(rows, 3)?;
            t.sum(g)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn group_log_mean_exp_extreme() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, -1000.0]));
        let l = t.group_log_mean_exp(a, 2).unwrap();
        let v = t.value(l).item();
        assert!((v - (0.0 - std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn dropout_behaviour() {
        let mut rng = RngStream::new(9);
        let mut t = Tape::new();
        let x = t.constant(rng.normal_tensor(&[10, 10]));
        assert_eq!(t.dropout(x, 0.0, Some(&mut rng)).unwrap(), x);
        assert_eq!(t.dropout(x, 0.4, None).unwrap(), x);
        assert!(matches!(t.dropout(x, 1.0, Some(&mut rng)), Err(Error::Parameter(_))));

        let mut t = Tape::new();
        let n = 1_000_000;
        let x = t.constant(Tensor::full(&[1000, 1000], 1.0));
        let y = t.dropout(x, 0.3, Some(&mut rng)).unwrap();
        let zeros = t.value(y).data().iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        // binomial sd = sqrt(0.21 / 1e6) ~ 4.6e-4, so 0.002 is > 4 sd
        assert!((frac - 0.3).abs() < 0.002, "{frac}");
        let kept = t.value(y).data().iter().find(|v| **v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.7).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1e308]));
        assert!(matches!(t.scale(a, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![3.0]));
        let s = t.sum(a).unwrap();
        let mut g = t.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.take_or_zeros(b).data(), &[0.0]);
        assert_eq!(g.take_or_zeros(a).data(), &[1.0, 1.0]);
    }
}
