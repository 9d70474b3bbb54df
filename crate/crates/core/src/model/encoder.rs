//! Position-free Transformer encoder layer with hand-written backward pass.
//!
//! Post-LN (default):
//! ```text
//! y1 = LN1(x + MHA(x))
//! y2 = LN2(y1 + FFN(y1))
//! ```
//! Pre-LN:
//! ```text
//! y1 = x + MHA(LN1(x))
//! y2 = y1 + FFN(LN2(y1))
//! ```
//! Keys in padded slots get `−1e9` before the softmax and padded query rows
//! are zeroed at the end of the layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{dropout_mask, hadamard, zero_masked_rows, LayerNorm, Linear};
use crate::error::{MaaError, Result};
use crate::numcore::{
    matmul, matmul_at, matmul_bt, softmax_rows, softmax_rows_backward, Activation, LayerNormCache,
    Matrix, ParamTensor, Real,
};

pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormLayout {
    #[default]
    Post,
    Pre,
}

impl FromStr for NormLayout {
    type Err = MaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "post" => Ok(NormLayout::Post),
            "pre" => Ok(NormLayout::Pre),
            other => Err(MaaError::Config(format!("unknown norm layout `{other}`"))),
        }
    }
}

impl fmt::Display for NormLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormLayout::Post => "post",
            NormLayout::Pre => "pre",
        })
    }
}

/// Geometry of the padded hidden state shared by every layer.
#[derive(Clone, Copy, Debug)]
pub struct SeqLayout<'a> {
    pub size: usize,
    pub seq_len: usize,
    pub mask: &'a [bool],
}

#[derive(Clone, Debug)]
pub struct SelfAttention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

struct HeadCache<T> {
    probs: Matrix<T>,
    /// `probs ⊙ dropout`, the weights actually applied to the values.
    applied: Matrix<T>,
    drop: Option<Matrix<T>>,
}

pub struct AttentionCache<T> {
    input: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    context: Matrix<T>,
    heads: Vec<HeadCache<T>>,
}

fn block<T: Real>(m: &Matrix<T>, row0: usize, rows: usize, col0: usize, cols: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(&m.row(row0 + r)[col0..col0 + cols]);
    }
    out
}

fn put_block<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>, row0: usize, col0: usize) {
    for r in 0..src.rows() {
        dst.row_mut(row0 + r)[col0..col0 + src.cols()].copy_from_slice(src.row(r));
    }
}

impl<T: Real> SelfAttention<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d_model: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        SelfAttention {
            query: Linear::new(&format!("{name}.query"), d_model, d_model, std, rng),
            // a key bias shifts every score in a row equally, so softmax ignores it
            key: Linear::without_bias(&format!("{name}.key"), d_model, d_model, std, rng),
            value: Linear::new(&format!("{name}.value"), d_model, d_model, std, rng),
            output: Linear::new(&format!("{name}.output"), d_model, d_model, std, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        x: &Matrix<T>,
        layout: SeqLayout<'_>,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix<T>, AttentionCache<T>)> {
        let d = x.cols();
        let dh = d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let s = layout.seq_len;
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let mut context = Matrix::zeros(x.rows(), d);
        let mut heads = Vec::with_capacity(layout.size * self.heads);
        for b in 0..layout.size {
            let key_mask = &layout.mask[b * s..(b + 1) * s];
            for h in 0..self.heads {
                let qh = block(&q, b * s, s, h * dh, dh);
                let kh = block(&k, b * s, s, h * dh, dh);
                let vh = block(&v, b * s, s, h * dh, dh);
                let mut scores = matmul_bt(&qh, &kh)?;
                scores.scale(scale);
                for r in 0..s {
                    for (c, &real) in key_mask.iter().enumerate() {
                        if !real {
                            let cur = scores.get(r, c);
                            scores.set(r, c, cur + T::of(MASK_BIAS));
                        }
                    }
                }
                let probs = softmax_rows(&scores);
                let (applied, drop) = match rng.as_deref_mut() {
                    Some(rng) if dropout > 0.0 => {
                        let mask = dropout_mask(s, s, dropout, rng);
                        (hadamard(&probs, &mask), Some(mask))
                    }
                    _ => (probs.clone(), None),
                };
                let ctx = matmul(&applied, &vh)?;
                put_block(&mut context, &ctx, b * s, h * dh);
                heads.push(HeadCache { probs, applied, drop });
            }
        }
        let out = self.output.forward(&context)?;
        Ok((
            out,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                context,
                heads,
            },
        ))
    }

    pub fn backward(&mut self, d_out: &Matrix<T>, cache: &AttentionCache<T>, layout: SeqLayout<'_>) -> Result<Matrix<T>> {
        let d = cache.input.cols();
        let dh = d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let s = layout.seq_len;
        let d_context = self.output.backward(&cache.context, d_out)?;
        let mut dq = Matrix::zeros(cache.q.rows(), d);
        let mut dk = Matrix::zeros(cache.k.rows(), d);
        let mut dv = Matrix::zeros(cache.v.rows(), d);
        for b in 0..layout.size {
            for h in 0..self.heads {
                let hc = &cache.heads[b * self.heads + h];
                let qh = block(&cache.q, b * s, s, h * dh, dh);
                let kh = block(&cache.k, b * s, s, h * dh, dh);
                let vh = block(&cache.v, b * s, s, h * dh, dh);
                let dctx = block(&d_context, b * s, s, h * dh, dh);
                let d_applied = matmul_bt(&dctx, &vh)?;
                put_block(&mut dv, &matmul_at(&hc.applied, &dctx)?, b * s, h * dh);
                let d_probs = match &hc.drop {
                    Some(mask) => hadamard(&d_applied, mask),
                    None => d_applied,
                };
                let mut d_scores = softmax_rows_backward(&hc.probs, &d_probs)?;
                d_scores.scale(scale);
                put_block(&mut dq, &matmul(&d_scores, &kh)?, b * s, h * dh);
                put_block(&mut dk, &matmul_at(&d_scores, &qh)?, b * s, h * dh);
            }
        }
        let mut dx = self.query.backward(&cache.input, &dq)?;
        dx.add_assign(&self.key.backward(&cache.input, &dk)?)?;
        dx.add_assign(&self.value.backward(&cache.input, &dv)?)?;
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        [&self.query, &self.key, &self.value, &self.output]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.output]
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

pub struct FeedForwardCache<T> {
    input: Matrix<T>,
    pre_act: Matrix<T>,
    hidden: Matrix<T>,
    drop: Option<Matrix<T>>,
}

impl<T: Real> FeedForward<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d_model: usize, ff_dim: usize, std: f64, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(&format!("{name}.up"), d_model, ff_dim, std, rng),
            down: Linear::new(&format!("{name}.down"), ff_dim, d_model, std, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Matrix<T>,
        act: Activation,
        dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix<T>, FeedForwardCache<T>)> {
        let pre_act = self.up.forward(x)?;
        let mut hidden = act.forward(&pre_act);
        let drop = match rng {
            Some(rng) if dropout > 0.0 => {
                let mask = dropout_mask(hidden.rows(), hidden.cols(), dropout, rng);
                hidden = hadamard(&hidden, &mask);
                Some(mask)
            }
            _ => None,
        };
        let out = self.down.forward(&hidden)?;
        Ok((
            out,
            FeedForwardCache {
                input: x.clone(),
                pre_act,
                hidden,
                drop,
            },
        ))
    }

    pub fn backward(&mut self, d_out: &Matrix<T>, cache: &FeedForwardCache<T>, act: Activation) -> Result<Matrix<T>> {
        let mut d_hidden = self.down.backward(&cache.hidden, d_out)?;
        if let Some(mask) = &cache.drop {
            d_hidden = hadamard(&d_hidden, mask);
        }
        let d_pre = act.backward(&cache.pre_act, &d_hidden)?;
        self.up.backward(&cache.input, &d_pre)
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        self.up.params().into_iter().chain(self.down.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.up
            .params_mut()
            .into_iter()
            .chain(self.down.params_mut())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<T> {
    pub attention: SelfAttention<T>,
    pub norm1: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub norm2: LayerNorm<T>,
    pub layout: NormLayout,
    pub activation: Activation,
    pub dropout: f64,
}

pub struct EncoderLayerCache<T> {
    attn: AttentionCache<T>,
    ln1: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
    ln2: LayerNormCache<T>,
}

#[allow(clippy::too_many_arguments)]
impl<T: Real> EncoderLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        index: usize,
        d_model: usize,
        ff_dim: usize,
        heads: usize,
        layout: NormLayout,
        activation: Activation,
        dropout: f64,
        eps: f64,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let name = format!("encoder.{index}");
        EncoderLayer {
            attention: SelfAttention::new(&format!("{name}.attn"), d_model, heads, std, rng),
            norm1: LayerNorm::new(&format!("{name}.ln1"), d_model, eps),
            ffn: FeedForward::new(&format!("{name}.ffn"), d_model, ff_dim, std, rng),
            norm2: LayerNorm::new(&format!("{name}.ln2"), d_model, eps),
            layout,
            activation,
            dropout,
        }
    }

    pub fn forward(
        &self,
        x: &Matrix<T>,
        seq: SeqLayout<'_>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix<T>, EncoderLayerCache<T>)> {
        let (mut out, cache) = match self.layout {
            NormLayout::Post => {
                let (a, attn) = self.attention.forward(x, seq, self.dropout, rng.as_deref_mut())?;
                let (y1, ln1) = self.norm1.forward(&x.add(&a)?)?;
                let (f, ffn) = self.ffn.forward(&y1, self.activation, self.dropout, rng)?;
                let (y2, ln2) = self.norm2.forward(&y1.add(&f)?)?;
                (y2, EncoderLayerCache { attn, ln1, ffn, ln2 })
            }
            NormLayout::Pre => {
                let (xn, ln1) = self.norm1.forward(x)?;
                let (a, attn) = self.attention.forward(&xn, seq, self.dropout, rng.as_deref_mut())?;
                let y1 = x.add(&a)?;
                let (yn, ln2) = self.norm2.forward(&y1)?;
                let (f, ffn) = self.ffn.forward(&yn, self.activation, self.dropout, rng)?;
                (y1.add(&f)?, EncoderLayerCache { attn, ln1, ffn, ln2 })
            }
        };
        zero_masked_rows(&mut out, seq.mask);
        Ok((out, cache))
    }

    pub fn backward(&mut self, d_out: &Matrix<T>, cache: &EncoderLayerCache<T>, seq: SeqLayout<'_>) -> Result<Matrix<T>> {
        let mut d = d_out.clone();
        zero_masked_rows(&mut d, seq.mask);
        match self.layout {
            NormLayout::Post => {
                let dr2 = self.norm2.backward(&d, &cache.ln2)?;
                let mut dy1 = self.ffn.backward(&dr2, &cache.ffn, self.activation)?;
                dy1.add_assign(&dr2)?;
                let dr1 = self.norm1.backward(&dy1, &cache.ln1)?;
                let mut dx = self.attention.backward(&dr1, &cache.attn, seq)?;
                dx.add_assign(&dr1)?;
                Ok(dx)
            }
            NormLayout::Pre => {
                let dyn_ = self.ffn.backward(&d, &cache.ffn, self.activation)?;
                let mut dy1 = self.norm2.backward(&dyn_, &cache.ln2)?;
                dy1.add_assign(&d)?;
                let dxn = self.attention.backward(&dy1, &cache.attn, seq)?;
                let mut dx = self.norm1.backward(&dxn, &cache.ln1)?;
                dx.add_assign(&dy1)?;
                Ok(dx)
            }
        }
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut out = self.attention.params();
        out.extend(self.norm1.params());
        out.extend(self.ffn.params());
        out.extend(self.norm2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = self.attention.params_mut();
        out.extend(self.norm1.params_mut());
        out.extend(self.ffn.params_mut());
        out.extend(self.norm2.params_mut());
        out
    }
}
