//! Building blocks shared by the adapter and the encoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numcore::{
    layer_norm, layer_norm_backward, matmul, matmul_at, matmul_bt, LayerNormCache, Matrix,
    ParamTensor, Real,
};

/// Normal(0, std²) truncated to ±2 std by resampling.
pub fn truncated_normal<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Matrix<T> {
    if std == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::of(v);
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// `y = x · W + b` with `W: in × out`; the bias is optional.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: ParamTensor<T>,
    pub bias: Option<ParamTensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let mut lin = Self::without_bias(name, inputs, outputs, std, rng);
        lin.bias = Some(ParamTensor::new(format!("{name}.bias"), Matrix::zeros(1, outputs), false));
        lin
    }

    pub fn without_bias<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: ParamTensor::new(format!("{name}.weight"), truncated_normal(inputs, outputs, std, rng), true),
            bias: None,
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = matmul(x, &self.weight.value)?;
        if let Some(b) = &self.bias {
            y.add_row_broadcast(&b.value)?;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&mut self, x: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
        self.weight.accumulate(&matmul_at(x, dy)?)?;
        if let Some(b) = &mut self.bias {
            b.accumulate(&dy.sum_rows())?;
        }
        matmul_bt(dy, &self.weight.value)
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: ParamTensor<T>,
    pub beta: ParamTensor<T>,
    pub eps: f64,
    /// Test hook: negates the gamma gradient so the gradient oracle has a
    /// known fault to catch.
    pub(crate) sabotage: bool,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: ParamTensor::new(format!("{name}.gamma"), Matrix::filled(1, dim, T::one()), false),
            beta: ParamTensor::new(format!("{name}.beta"), Matrix::zeros(1, dim), false),
            eps,
            sabotage: false,
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, LayerNormCache<T>)> {
        layer_norm(x, &self.gamma.value, &self.beta.value, self.eps)
    }

    pub fn backward(&mut self, dy: &Matrix<T>, cache: &LayerNormCache<T>) -> Result<Matrix<T>> {
        let (dx, mut dgamma, dbeta) = layer_norm_backward(dy, cache, &self.gamma.value)?;
        if self.sabotage {
            dgamma.scale(-T::one());
        }
        self.gamma.accumulate(&dgamma)?;
        self.beta.accumulate(&dbeta)?;
        Ok(dx)
    }

    pub fn params(&self) -> [&ParamTensor<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Inverted dropout mask: entries are 0 or `1 / (1 − p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Matrix<T> {
    let keep = T::of(1.0 / (1.0 - p));
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

pub fn hadamard<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= m;
    }
    out
}

/// Zeroes every row whose mask bit is false.
pub fn zero_masked_rows<T: Real>(x: &mut Matrix<T>, mask: &[bool]) {
    debug_assert_eq!(x.rows(), mask.len());
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            x.row_mut(r).fill(T::zero());
        }
    }
}
