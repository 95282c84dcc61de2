//! Small differentiable math substrate: dense matrices, tanh MLP blocks with
//! hand-written backward passes, cosine similarity, a clamped arccos, and a
//! central-difference gradient checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp margin applied before `arccos` so its derivative stays bounded.
pub const ARCCOS_EPS: f64 = 1e-7;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension("matrix buffer", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty list gives a 0×`cols`
    /// matrix only through [`Matrix::zeros`]; here it yields 0×0.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dimension("matrix row", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dimension("vstack columns", self.cols, other.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(
                "matrix add",
                self.rows * self.cols,
                other.rows * other.cols,
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Nonlinearity applied between consecutive affine layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map `y = W x + b`, with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Layer {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }
}

/// A stack of affine layers with `activation` between them (never after the
/// last one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Per-layer inputs and pre-activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

/// Gradient container with the same shape as an [`MlpParams`].
pub type MlpGrad = MlpParams;

impl MlpParams {
    /// Seeded init, every entry uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    ///
    /// `dims` lists the widths from input to output, so `[f, d, d]` is two
    /// layers with one hidden layer of width `d`.
    pub fn init_uniform<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "mlp needs at least two non-zero widths, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Matrix::uniform(w[1], w[0], bound, rng);
                let bias = (0..w[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
                Layer { weight, bias }
            })
            .collect();
        Ok(MlpParams { layers, activation })
    }

    pub fn zeros_like(&self) -> MlpGrad {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::dimension("mlp input", self.input_dim(), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&current);
            let next = if idx == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            inputs.push(current);
            pre_activations.push(z);
            current = next;
        }
        Ok((
            current,
            MlpCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without retaining a cache.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    pub fn apply_rows(&self, xs: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(xs.rows(), self.output_dim());
        for (i, x) in xs.iter_rows().enumerate() {
            out.row_mut(i).copy_from_slice(&self.apply(x)?);
        }
        Ok(out)
    }

    /// Reverse pass: returns parameter gradients and the gradient with respect
    /// to the forward input.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
        let mut grad = self.zeros_like();
        let input_grad = self.backward_into(cache, upstream, &mut grad)?;
        Ok((grad, input_grad))
    }

    /// Like [`MlpParams::backward`] but accumulates into an existing gradient.
    pub fn backward_into(
        &self,
        cache: &MlpCache,
        upstream: &[f64],
        grad: &mut MlpGrad,
    ) -> Result<Vec<f64>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::dimension(
                "mlp cache layers",
                self.layers.len(),
                cache.inputs.len(),
            ));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::dimension(
                "mlp upstream gradient",
                self.output_dim(),
                upstream.len(),
            ));
        }
        let mut delta = upstream.to_vec();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let input = &cache.inputs[idx];
            let g = &mut grad.layers[idx];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                for (gw, &x) in g.weight.row_mut(o).iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            let mut input_grad = vec![0.0; layer.input_dim()];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (ig, &w) in input_grad.iter_mut().zip(layer.weight.row(o)) {
                    *ig += d * w;
                }
            }
            if idx > 0 {
                let pre = &cache.pre_activations[idx - 1];
                for (ig, &z) in input_grad.iter_mut().zip(pre) {
                    *ig *= self.activation.derivative(z);
                }
            }
            delta = input_grad;
        }
        Ok(delta)
    }

    /// `self += factor * grad`.
    pub fn add_scaled(&mut self, grad: &MlpGrad, factor: f64) -> Result<()> {
        if grad.layers.len() != self.layers.len() {
            return Err(Error::dimension(
                "mlp gradient layers",
                self.layers.len(),
                grad.layers.len(),
            ));
        }
        for (p, g) in self.layers.iter_mut().zip(&grad.layers) {
            p.weight.add_scaled(&g.weight, factor)?;
            if p.bias.len() != g.bias.len() {
                return Err(Error::dimension("mlp bias", p.bias.len(), g.bias.len()));
            }
            for (b, gb) in p.bias.iter_mut().zip(&g.bias) {
                *b += factor * gb;
            }
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dimension("flat parameters", self.param_count(), flat.len()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Cosine similarity with its gradients with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(Error::dimension("cosine operands", u.len(), v.len()));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    let value = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    let grad_u = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b / (nu * nv) - value * a / (nu * nu))
        .collect();
    let grad_v = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a / (nu * nv) - value * b / (nv * nv))
        .collect();
    Ok(Cosine {
        value,
        grad_u,
        grad_v,
    })
}

/// Unit-normalized copy of every row, with the original norms.
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numeric(format!("row {i} has zero or non-finite norm")));
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Maps a gradient taken with respect to unit-normalized rows back onto the
/// raw rows: `dv = (g - (g·n) n) / ‖v‖`.
pub fn backprop_normalize(unit: &Matrix, norms: &[f64], grad_unit: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(unit.rows(), unit.cols());
    for i in 0..unit.rows() {
        let n = unit.row(i);
        let g = grad_unit.row(i);
        let radial = dot(g, n);
        for ((o, &gk), &nk) in out.row_mut(i).iter_mut().zip(g).zip(n) {
            *o = (gk - radial * nk) / norms[i];
        }
    }
    out
}

/// `arccos` on the input clamped to `[-1 + ε, 1 - ε]`, returning the angle
/// and `d angle / dx = -1/sqrt(1 - x²)` at the clamped point.
pub fn arccos_safe(x: f64) -> Result<(f64, f64)> {
    if x.is_nan() {
        return Err(Error::Numeric("arccos of NaN".into()));
    }
    let c = x.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS);
    Ok((c.acos(), -1.0 / (1.0 - c * c).sqrt()))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Gradients smaller than this are compared on an absolute scale; central
/// differences cannot resolve relative error below it.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `f` around `params`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` where
/// `floor` is the larger of [`GRAD_CHECK_FLOOR`] and the rounding noise of
/// the difference quotient, `8 ε max(|f(params)|, 1) / (step · tolerance)`.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut max_rel_error = 0.0;
    let mut worst_index = None;
    if analytic.len() != params.len() {
        return GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst_index: None,
            tolerance,
            passed: false,
        };
    }
    let mut probe = params.to_vec();
    let noise = 8.0 * f64::EPSILON * f(&probe).abs().max(1.0) / step;
    let floor = GRAD_CHECK_FLOOR.max(noise / tolerance);
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if !rel.is_finite() || rel > max_rel_error {
            max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_error,
        worst_index,
        tolerance,
        passed: max_rel_error <= tolerance,
    }
}
