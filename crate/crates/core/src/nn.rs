//! Layer primitives: linear maps, layer normalization, GELU, dropout and the
//! two-linear MLP branch shared by the mixing layers and the attention tool.
//!
//! Kernels here operate on plain tensors; the `*Unit` types own parameter
//! ids and record their forward pass on a [`Tape`].

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// LayerNorm epsilon used by every normalization unit.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// √(2/π), the scale inside the tanh GELU approximation.
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct LayerNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
    /// At least one slice had all-equal entries.
    pub degenerate: bool,
}

/// Normalizes each last-axis slice with population variance, then applies
/// `gamma` and `beta`.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<LayerNormOut<T>> {
    let n = *x.shape().last().unwrap();
    if gamma.shape() != [n] || beta.shape() != [n] {
        return shape_err(format!(
            "layernorm affine shapes {:?}/{:?} do not match last extent {n}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let nt = T::of(n as f64);
    let rows = x.len() / n;
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    let mut degenerate = false;
    for row in x.data().chunks_exact(n) {
        let mut sum = T::zero();
        for &v in row {
            sum += v;
        }
        let mean = sum / nt;
        let mut ss = T::zero();
        for &v in row {
            let d = v - mean;
            ss += d * d;
        }
        let r = T::one() / (ss / nt + eps).sqrt();
        if row.iter().all(|&v| v == row[0]) {
            degenerate = true;
        }
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let h = (v - mean) * r;
            xhat.push(h);
            y.push(h * g + b);
        }
        rstd.push(r);
    }
    Ok(LayerNormOut { y: Tensor::new(x.shape(), y)?, xhat: Tensor::new(x.shape(), xhat)?, rstd, degenerate })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    rstd: &[T],
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n = gamma.len();
    let nt = T::of(n as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); n];
    for (((g, h), out), &r) in
        dy.data().chunks_exact(n).zip(xhat.data().chunks_exact(n)).zip(dx.chunks_exact_mut(n)).zip(rstd)
    {
        let mut mean_d = T::zero();
        let mut mean_dh = T::zero();
        for k in 0..n {
            dgamma[k] += g[k] * h[k];
            dbeta[k] += g[k];
            dxhat[k] = g[k] * gamma.data()[k];
            mean_d += dxhat[k];
            mean_dh += dxhat[k] * h[k];
        }
        mean_d /= nt;
        mean_dh /= nt;
        for k in 0..n {
            out[k] = r * (dxhat[k] - mean_d - h[k] * mean_dh);
        }
    }
    Ok((Tensor::new(dy.shape(), dx)?, Tensor::new(&[n], dgamma)?, Tensor::new(&[n], dbeta)?))
}

/// Plain-tensor layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(layer_norm_forward(x, gamma, beta, T::of(eps))?.y)
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh_fast())
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`, elementwise.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let k = T::of(GELU_K);
    let c = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let t = (k * (v + c * v * v * v)).tanh_fast();
            let du = k * (T::one() + three * c * v * v);
            g * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
        })
        .collect();
    Tensor::new(x.shape(), data)
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Keep-mask scaled for inverted dropout: entries are `0` with probability
/// `rate`, otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    let keep = T::of(1.0 / (1.0 - rate));
    Tensor::from_fn(shape, |_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
}

/// Plain-tensor dropout. Eval mode and rate 0 return the input unchanged.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, rate: f64, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    x.mul(&dropout_mask(x.shape(), rate, rng)?)
}

/// Mean of `-log softmax(logits)[label]` over the batch, with max-subtraction.
/// Also returns the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = match logits.shape() {
        &[b, k] => (b, k),
        s => return shape_err(format!("logits must be B×K, got {s:?}")),
    };
    if labels.len() != b {
        return shape_err(format!("{} labels for batch of {b}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return shape_err(format!("label {bad} out of range for {k} classes"));
    }
    let mut probs = Vec::with_capacity(b * k);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut z = T::zero();
        for &v in row {
            z += (v - m).exp();
        }
        for &v in row {
            probs.push((v - m).exp() / z);
        }
        total += z.ln() + m - row[label];
    }
    Ok((total / T::of(b as f64), Tensor::new(&[b, k], probs)?))
}

/// How a fresh linear unit fills its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Weight and bias uniform in `±1/√n_in`.
    Uniform,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct LinearUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl LinearUnit {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut draw = |shape: &[usize]| -> Result<Tensor<T>> {
            match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Uniform => Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound))),
            }
        };
        let w = draw(&[n_out, n_in])?;
        let b = draw(&[n_out])?;
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
            n_in,
            n_out,
        })
    }

    pub fn num_params(n_in: usize, n_out: usize) -> usize {
        n_out * n_in + n_out
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.linear(x, w, b)
    }

    /// Same map applied along `axis` instead of the last one.
    pub fn forward_along<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var, axis: usize) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.linear_along(x, w, b, axis)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormUnit {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub n: usize,
    pub eps: f64,
}

impl LayerNormUnit {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, n: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[n])?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[n])?)?,
            n,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn num_params(n: usize) -> usize {
        2 * n
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// `fc2(dropout(gelu(fc1(x))))`: the residual-free branch of a mixing MLP.
#[derive(Debug, Clone)]
pub struct MlpUnit {
    pub fc1: LinearUnit,
    pub fc2: LinearUnit,
    pub dropout: f64,
}

impl MlpUnit {
    /// `fc1: n → hidden`, `fc2: hidden → n`. `fc2_init` lets callers start the
    /// branch at exactly zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n: usize,
        hidden: usize,
        dropout: f64,
        fc2_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        check_dropout_rate(dropout)?;
        let fc1 = LinearUnit::new(store, &format!("{name}.fc1"), n, hidden, Init::Uniform, rng)?;
        let fc2 = LinearUnit::new(store, &format!("{name}.fc2"), hidden, n, fc2_init, rng)?;
        Ok(Self { fc1, fc2, dropout })
    }

    pub fn width(&self) -> usize {
        self.fc1.n_in
    }

    pub fn hidden(&self) -> usize {
        self.fc1.n_out
    }

    pub fn num_params(n: usize, hidden: usize) -> usize {
        LinearUnit::num_params(n, hidden) + LinearUnit::num_params(hidden, n)
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, self.dropout, mode, rng)?;
        self.fc2.forward(tape, store, h)
    }

    /// The branch mixing along `axis`, without moving it to the end.
    pub fn forward_along<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        axis: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.fc1.forward_along(tape, store, x, axis)?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, self.dropout, mode, rng)?;
        self.fc2.forward_along(tape, store, h, axis)
    }
}
