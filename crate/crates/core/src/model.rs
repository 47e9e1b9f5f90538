//! Positional-attention transformer with a single trainable value vector.
//!
//! `F(X) = sum_i sigma(D * sum_j S_ij <v, X_j>)` where `S = rowsoftmax(A / tau)`
//! and `sigma(x) = x^p + nu x`. Gradients are derived by hand; the attention
//! diagonal is frozen and always reports a zero derivative.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::distribution::{fmt17, parse_num, DataPoint, Dataset};
use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `D x D` attention matrix; `a[i][i] == sigma_a` always.
    pub a: Matrix,
    pub v: Vec<f64>,
    pub p: u32,
    pub nu: f64,
    pub tau: f64,
    pub sigma_a: f64,
}

impl ModelParams {
    /// Zero value vector, zero off-diagonal attention.
    pub fn zeros(d: usize, num_patches: usize, p: u32, nu: f64, tau: f64, sigma_a: f64) -> Result<Self> {
        let a = Matrix::from_fn(num_patches, num_patches, |i, j| if i == j { sigma_a } else { 0.0 });
        let params = Self {
            a,
            v: vec![0.0; d],
            p,
            nu,
            tau,
            sigma_a,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn d(&self) -> usize {
        self.v.len()
    }

    pub fn num_patches(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 3 || self.p.is_multiple_of(2) {
            return Err(invalid(format!(
                "activation degree p = {} must be odd and >= 3",
                self.p
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("temperature tau = {} must be positive", self.tau)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(invalid(format!("nu = {} must be >= 0", self.nu)));
        }
        if !self.a.is_square() {
            return Err(Error::Shape("attention matrix must be square".into()));
        }
        for i in 0..self.a.rows() {
            if self.a.get(i, i) != self.sigma_a {
                return Err(invalid(format!("diagonal entry {i} differs from sigma_A")));
            }
        }
        Ok(())
    }

    /// Plain-text params file: header, then `v`, then `A` row-major.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "# patchassoc params v1").ok();
        writeln!(s, "d = {}", self.d()).ok();
        writeln!(s, "D = {}", self.num_patches()).ok();
        writeln!(s, "p = {}", self.p).ok();
        writeln!(s, "nu = {}", fmt17(self.nu)).ok();
        writeln!(s, "tau = {}", fmt17(self.tau)).ok();
        writeln!(s, "sigma_A = {}", fmt17(self.sigma_a)).ok();
        writeln!(s, "---").ok();
        for &x in &self.v {
            writeln!(s, "{}", fmt17(x)).ok();
        }
        for i in 0..self.num_patches() {
            let row: Vec<String> = self.a.row(i).iter().map(|&x| fmt17(x)).collect();
            writeln!(s, "{}", row.join(" ")).ok();
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut header = std::collections::BTreeMap::new();
        let mut values = Vec::new();
        let mut in_body = false;
        for line in input.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if !in_body {
                if t == "---" {
                    in_body = true;
                    continue;
                }
                let (k, v) = t
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("bad header line `{t}`")))?;
                header.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                for tok in t.split_whitespace() {
                    values.push(parse_num::<f64>(tok)?);
                }
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::Parse(format!("missing header key `{k}`")))
        };
        let d: usize = parse_num(get("d")?)?;
        let n: usize = parse_num(get("D")?)?;
        if values.len() != d + n * n {
            return Err(Error::Parse(format!(
                "expected {} values, found {}",
                d + n * n,
                values.len()
            )));
        }
        let a = Matrix::from_vec(n, n, values.split_off(d))?;
        let params = Self {
            a,
            v: values,
            p: parse_num(get("p")?)?,
            nu: parse_num(get("nu")?)?,
            tau: parse_num(get("tau")?)?,
            sigma_a: parse_num(get("sigma_A")?)?,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Row softmax of `a / tau` with row-max subtraction.
pub fn score_matrix(a: &Matrix, tau: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Shape("attention matrix must be square".into()));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("attention matrix has non-finite entries".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(invalid("tau must be positive"));
    }
    let n = a.rows();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        let row = a.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = s.row_mut(i);
        let mut sum = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = ((x - max) / tau).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(s)
}

/// `x^p + nu x`
#[inline]
pub fn activation(x: f64, p: u32, nu: f64) -> f64 {
    x.powi(p as i32) + nu * x
}

/// `p x^(p-1) + nu`
#[inline]
pub fn activation_deriv(x: f64, p: u32, nu: f64) -> f64 {
    f64::from(p) * x.powi(p as i32 - 1) + nu
}

/// Logistic sigmoid, evaluated without overflow.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-y F))`
#[inline]
pub fn logistic_loss(y: f64, f: f64) -> f64 {
    let m = -y * f;
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub scores: Matrix,
    /// Pooled vectors `O_i = sum_j S_ij X_j`, stored contiguously like patches.
    pub pooled: Vec<f64>,
    pub pre_activations: Vec<f64>,
    pub output: f64,
}

fn check_input(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.d() * params.num_patches() {
        return Err(Error::Shape(format!(
            "input has {} entries, model expects d*D = {}",
            x.len(),
            params.d() * params.num_patches()
        )));
    }
    Ok(())
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace> {
    check_input(params, x)?;
    let d = params.d();
    let n = params.num_patches();
    let scores = score_matrix(&params.a, params.tau)?;
    let mut pooled = vec![0.0; n * d];
    for i in 0..n {
        let o = &mut pooled[i * d..(i + 1) * d];
        for (j, patch) in x.chunks_exact(d).enumerate() {
            axpy(scores.get(i, j), patch, o);
        }
    }
    let scale = n as f64;
    let pre_activations: Vec<f64> = pooled.chunks_exact(d).map(|o| scale * dot(&params.v, o)).collect();
    let output = pre_activations
        .iter()
        .map(|&z| activation(z, params.p, params.nu))
        .sum();
    Ok(ForwardTrace {
        scores,
        pooled,
        pre_activations,
        output,
    })
}

/// A model with its score matrix precomputed, for repeated evaluation.
pub struct Predictor<'a> {
    params: &'a ModelParams,
    scores: Matrix,
    proj: Vec<f64>,
    pre: Vec<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a ModelParams) -> Result<Self> {
        let scores = score_matrix(&params.a, params.tau)?;
        let n = params.num_patches();
        Ok(Self {
            params,
            scores,
            proj: vec![0.0; n],
            pre: vec![0.0; n],
        })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    /// Fills `proj` with `<v, X_j>` and `pre` with the pre-activations.
    fn pass(&mut self, x: &[f64]) {
        let d = self.params.d();
        for (u, patch) in self.proj.iter_mut().zip(x.chunks_exact(d)) {
            *u = dot(&self.params.v, patch);
        }
        let scale = self.params.num_patches() as f64;
        for (i, z) in self.pre.iter_mut().enumerate() {
            *z = scale * dot(self.scores.row(i), &self.proj);
        }
    }

    pub fn output(&mut self, x: &[f64]) -> f64 {
        self.pass(x);
        let (p, nu) = (self.params.p, self.params.nu);
        self.pre.iter().map(|&z| activation(z, p, nu)).sum()
    }
}

/// Loss and exact gradients for one sample, accumulated with `weight` into the
/// buffers. `attn_acc` collects `sum c_i u_j` and `row_acc` collects
/// `sum c_i ubar_i`; [`finish_attention_grad`] turns them into `dL/dA`.
struct Accumulator {
    loss: f64,
    grad_v: Vec<f64>,
    attn_acc: Matrix,
    row_acc: Vec<f64>,
    coef: Vec<f64>,
    col_weight: Vec<f64>,
}

impl Accumulator {
    fn new(d: usize, n: usize) -> Self {
        Self {
            loss: 0.0,
            grad_v: vec![0.0; d],
            attn_acc: Matrix::zeros(n, n),
            row_acc: vec![0.0; n],
            coef: vec![0.0; n],
            col_weight: vec![0.0; n],
        }
    }

    fn add(&mut self, pred: &mut Predictor<'_>, x: &[f64], y: f64) {
        let params = pred.params;
        let (p, nu) = (params.p, params.nu);
        let n = params.num_patches();
        let scale = n as f64;
        pred.pass(x);
        let f: f64 = pred.pre.iter().map(|&z| activation(z, p, nu)).sum();
        self.loss += logistic_loss(y, f);
        let outer = -y * sigmoid(-y * f);
        for (c, &z) in self.coef.iter_mut().zip(&pred.pre) {
            *c = outer * scale * activation_deriv(z, p, nu);
        }
        self.col_weight.iter_mut().for_each(|w| *w = 0.0);
        for i in 0..n {
            let c = self.coef[i];
            axpy(c, pred.scores.row(i), &mut self.col_weight);
            axpy(c, &pred.proj, self.attn_acc.row_mut(i));
            self.row_acc[i] += c * pred.pre[i] / scale;
        }
        for (w, patch) in self.col_weight.iter().zip(x.chunks_exact(params.d())) {
            axpy(*w, patch, &mut self.grad_v);
        }
    }

    fn finish(self, scores: &Matrix, tau: f64, count: f64) -> LossAndGrads {
        let n = scores.rows();
        let mut grad_a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let g = scores.get(i, j) * (self.attn_acc.get(i, j) - self.row_acc[i]) / tau;
                    grad_a.set(i, j, g / count);
                }
            }
        }
        LossAndGrads {
            loss: self.loss / count,
            grad_v: self.grad_v.into_iter().map(|g| g / count).collect(),
            grad_a,
        }
    }
}

/// Mean loss and gradients; the diagonal of `grad_a` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grad_v: Vec<f64>,
    pub grad_a: Matrix,
}

/// Loss and gradients for a single sample.
pub fn loss_and_grads(params: &ModelParams, x: &[f64], y: f64) -> Result<LossAndGrads> {
    check_input(params, x)?;
    let mut pred = Predictor::new(params)?;
    let mut acc = Accumulator::new(params.d(), params.num_patches());
    acc.add(&mut pred, x, y);
    Ok(acc.finish(&pred.scores, params.tau, 1.0))
}

pub fn grad_v(params: &ModelParams, x: &[f64], y: f64) -> Result<Vec<f64>> {
    Ok(loss_and_grads(params, x, y)?.grad_v)
}

pub fn grad_a(params: &ModelParams, x: &[f64], y: f64) -> Result<Matrix> {
    Ok(loss_and_grads(params, x, y)?.grad_a)
}

pub fn loss(params: &ModelParams, x: &[f64], y: f64) -> Result<f64> {
    Ok(logistic_loss(y, forward(params, x)?.output))
}

/// Mean loss and gradients over `points`, summed in index order.
pub fn batch_loss_and_grads_points(params: &ModelParams, points: &[DataPoint]) -> Result<LossAndGrads> {
    if points.is_empty() {
        return Err(invalid("cannot average over an empty dataset"));
    }
    let mut pred = Predictor::new(params)?;
    let mut acc = Accumulator::new(params.d(), params.num_patches());
    for pt in points {
        check_input(params, &pt.x)?;
        acc.add(&mut pred, &pt.x, pt.label());
    }
    Ok(acc.finish(&pred.scores, params.tau, points.len() as f64))
}

pub fn batch_loss_and_grads(params: &ModelParams, dataset: &Dataset) -> Result<LossAndGrads> {
    batch_loss_and_grads_points(params, &dataset.points)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_rel_err_v: f64,
    pub max_rel_err_a: f64,
    /// Analytic derivative reported for each frozen diagonal entry.
    pub diagonal: Vec<f64>,
    pub coordinates: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`; the floor is `1e-4` of the
/// largest gradient magnitude, so entries many orders below the rest are
/// judged on an absolute scale.
pub fn finite_diff_check(params: &ModelParams, x: &[f64], y: f64, h: f64) -> Result<GradCheck> {
    if h.is_nan() || h <= 0.0 {
        return Err(invalid("finite-difference step must be positive"));
    }
    let analytic = loss_and_grads(params, x, y)?;
    let n = params.num_patches();
    let mut numeric_v = Vec::with_capacity(params.d());
    let mut work = params.clone();
    for k in 0..params.d() {
        let base = work.v[k];
        work.v[k] = base + h;
        let up = loss(&work, x, y)?;
        work.v[k] = base - h;
        let down = loss(&work, x, y)?;
        work.v[k] = base;
        numeric_v.push((up - down) / (2.0 * h));
    }
    let mut numeric_a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let base = work.a.get(i, j);
            work.a.set(i, j, base + h);
            let up = loss(&work, x, y)?;
            work.a.set(i, j, base - h);
            let down = loss(&work, x, y)?;
            work.a.set(i, j, base);
            numeric_a.set(i, j, (up - down) / (2.0 * h));
        }
    }
    let scale = analytic
        .grad_v
        .iter()
        .chain(analytic.grad_a.as_slice())
        .chain(&numeric_v)
        .chain(numeric_a.as_slice())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-4 * scale).max(f64::MIN_POSITIVE);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(floor);
    let max_rel_err_v = analytic
        .grad_v
        .iter()
        .zip(&numeric_v)
        .map(|(&a, &b)| rel(a, b))
        .fold(0.0, f64::max);
    let mut max_rel_err_a: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                max_rel_err_a = max_rel_err_a.max(rel(analytic.grad_a.get(i, j), numeric_a.get(i, j)));
            }
        }
    }
    Ok(GradCheck {
        max_rel_err: max_rel_err_v.max(max_rel_err_a),
        max_rel_err_v,
        max_rel_err_a,
        diagonal: (0..n).map(|i| analytic.grad_a.get(i, i)).collect(),
        coordinates: params.d() + n * (n - 1),
    })
}
