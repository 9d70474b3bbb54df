//! Layer primitives with hand-derived backward passes.
//!
//! Every forward returns whatever the matching backward needs; backwards
//! return input gradients and leave parameter accumulation to the caller
//! (via [`ParamTensor::accumulate`]).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::matrix::{Matrix, Real};
use crate::error::{MaaError, Result};

/// A trainable tensor with its gradient slot.
#[derive(Clone, Debug)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>, decay: bool) -> Self {
        let (r, c) = value.shape();
        ParamTensor {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate(&mut self, g: &Matrix<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns a stable, ordered list of parameters.
pub trait ParamSet<T: Real> {
    fn params(&self) -> Vec<&ParamTensor<T>>;

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

impl<T: Real> ParamSet<T> for Vec<ParamTensor<T>> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.iter_mut().collect()
    }
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Saved statistics from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

/// Row-wise layer norm with biased variance.
pub fn layer_norm<T: Real>(
    x: &Matrix<T>,
    gamma: &Matrix<T>,
    beta: &Matrix<T>,
    eps: f64,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let (n, d) = x.shape();
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(MaaError::shape(
            "layer_norm",
            format!(
                "input {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if d < 2 && n > 0 {
        return Err(MaaError::DegenerateRow { row: 0 });
    }
    let eps = T::of(eps);
    let inv_d = T::one() / T::of(d as f64);
    let mut out = Matrix::zeros(n, d);
    let mut normalized = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let denom = var + eps;
        if denom <= T::zero() {
            return Err(MaaError::DegenerateRow { row: r });
        }
        let istd = T::one() / denom.sqrt();
        inv_std.push(istd);
        let nrow = normalized.row_mut(r);
        for (o, &v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
        let orow = out.row_mut(r);
        for c in 0..d {
            orow[c] = normalized.get(r, c) * gamma.data()[c] + beta.data()[c];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Gradients of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    dy: &Matrix<T>,
    cache: &LayerNormCache<T>,
    gamma: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let (n, d) = dy.shape();
    if cache.normalized.shape() != (n, d) || gamma.shape() != (1, d) {
        return Err(MaaError::shape(
            "layer_norm_backward",
            format!("grad {:?} vs cache {:?}", dy.shape(), cache.normalized.shape()),
        ));
    }
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = Matrix::zeros(n, d);
    let mut dgamma = Matrix::zeros(1, d);
    let mut dbeta = Matrix::zeros(1, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let g = dy.row(r);
        let xhat = cache.normalized.row(r);
        for c in 0..d {
            dgamma.data_mut()[c] += g[c] * xhat[c];
            dbeta.data_mut()[c] += g[c];
            dxhat[c] = g[c] * gamma.data()[c];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(xhat)
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            * inv_d;
        let istd = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = istd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward of a row softmax given its output `p`: `dS = p ⊙ (dP − Σ dP⊙p)`.
pub fn softmax_rows_backward<T: Real>(p: &Matrix<T>, dp: &Matrix<T>) -> Result<Matrix<T>> {
    if p.shape() != dp.shape() {
        return Err(MaaError::shape(
            "softmax_rows_backward",
            format!("{:?} vs {:?}", p.shape(), dp.shape()),
        ));
    }
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let (pr, gr) = (p.row(r), dp.row(r));
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = pr[c] * (gr[c] - dot);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl FromStr for Activation {
    type Err = MaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(MaaError::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        })
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            }
        }
    }

    /// Derivative at the pre-activation value `x`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let c = T::of(SQRT_2_OVER_PI);
                let a = T::of(GELU_CUBIC);
                let inner = c * (x + a * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::of(3.0) * a * x * x);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
            }
        }
    }

    pub fn forward<T: Real>(self, x: &Matrix<T>) -> Matrix<T> {
        x.map(|v| self.apply(v))
    }

    /// `dx = dy ⊙ act'(x)` where `x` is the pre-activation input.
    pub fn backward<T: Real>(self, x: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
        if x.shape() != dy.shape() {
            return Err(MaaError::shape(
                "activation_backward",
                format!("{:?} vs {:?}", x.shape(), dy.shape()),
            ));
        }
        let mut out = dy.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
            *o *= self.derivative(v);
        }
        Ok(out)
    }
}

/// Mean over the rows selected by `mask`, as a `1 x d` matrix.
pub fn masked_mean_pool<T: Real>(z: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
    if mask.len() != z.rows() {
        return Err(MaaError::shape(
            "masked_mean_pool",
            format!("{} mask bits for {} rows", mask.len(), z.rows()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(MaaError::EmptyMask);
    }
    let mut out = Matrix::zeros(1, z.cols());
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (o, &v) in out.data_mut().iter_mut().zip(z.row(r)) {
            *o += v;
        }
    }
    out.scale(T::one() / T::of(count as f64));
    Ok(out)
}

/// Scatters `d_out / k` to every selected row.
pub fn masked_mean_pool_backward<T: Real>(d_out: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(MaaError::EmptyMask);
    }
    if d_out.rows() != 1 {
        return Err(MaaError::shape(
            "masked_mean_pool_backward",
            format!("expected 1 x d gradient, got {:?}", d_out.shape()),
        ));
    }
    let scale = T::one() / T::of(count as f64);
    let mut dz = Matrix::zeros(mask.len(), d_out.cols());
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (o, &g) in dz.row_mut(r).iter_mut().zip(d_out.data()) {
            *o = g * scale;
        }
    }
    Ok(dz)
}
