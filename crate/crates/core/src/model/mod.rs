//! The fusion network: adapters, modality embedding, encoder, pooled
//! classifier and cross-entropy loss.

pub mod adapter;
pub mod encoder;
pub mod layers;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use adapter::{Adapter, AdapterCache, AdapterMode};
pub use encoder::{EncoderLayer, NormLayout, SeqLayout};
pub use layers::{LayerNorm, Linear};

use crate::dataio::{Batch, ModalityInfo};
use crate::error::{MaaError, Result};
use crate::numcore::{
    masked_mean_pool, masked_mean_pool_backward, softmax_rows, Activation, Matrix, ParamSet,
    ParamTensor, Real, DEFAULT_LN_EPS,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub adapter: AdapterMode,
    pub activation: Activation,
    pub norm: NormLayout,
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Modalities the model accepts, in embedding-table order.
    pub modalities: Vec<ModalityInfo>,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(modalities: Vec<ModalityInfo>, num_classes: usize) -> Self {
        ModelConfig {
            d_model: 768,
            ff_dim: 2048,
            heads: 8,
            layers: 2,
            adapter: AdapterMode::Independent,
            activation: Activation::Gelu,
            norm: NormLayout::Post,
            dropout: 0.1,
            ln_eps: DEFAULT_LN_EPS,
            init_std: 0.02,
            modalities,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MaaError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.ff_dim == 0 {
            return bad("ff_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.modalities.is_empty() {
            return bad("model has no modalities".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps >= 0.0 && self.init_std >= 0.0) {
            return bad("ln_eps and init_std must be non-negative".into());
        }
        Ok(())
    }
}

/// Caches from one forward pass, consumed by [`MaaModel::backward`].
pub struct ForwardPass<T> {
    adapter: AdapterCache<T>,
    layers: Vec<encoder::EncoderLayerCache<T>>,
    pooled: Matrix<T>,
    pub logits: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct MaaModel<T> {
    pub config: ModelConfig,
    pub adapter: Adapter<T>,
    /// One row per modality, added to each of its tokens.
    pub modality_embedding: ParamTensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub classifier: Linear<T>,
}

impl<T: Real> MaaModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let adapter = Adapter::new(c.adapter, c.activation, &c.modalities, c.d_model, c.ln_eps, c.init_std, rng)?;
        let modality_embedding = ParamTensor::new(
            "modality_embedding",
            layers::truncated_normal(c.modalities.len(), c.d_model, c.init_std, rng),
            false,
        );
        let layers = (0..c.layers)
            .map(|i| {
                EncoderLayer::new(
                    i, c.d_model, c.ff_dim, c.heads, c.norm, c.activation, c.dropout, c.ln_eps, c.init_std, rng,
                )
            })
            .collect();
        let classifier = Linear::new("classifier", c.d_model, c.num_classes, c.init_std, rng);
        Ok(MaaModel {
            config,
            adapter,
            modality_embedding,
            layers,
            classifier,
        })
    }

    /// Makes every layer norm report a sign-flipped gamma gradient.
    #[doc(hidden)]
    pub fn sabotage_layer_norm_backward(&mut self) {
        for b in &mut self.adapter.blocks {
            b.norm.sabotage = true;
        }
        for l in &mut self.layers {
            l.norm1.sabotage = true;
            l.norm2.sabotage = true;
        }
    }

    /// Adds `table[slot(id)]` to every real token.
    pub fn add_modality_embedding(&self, hidden: &mut Matrix<T>, batch: &Batch) -> Result<()> {
        for r in (0..hidden.rows()).filter(|&r| batch.mask[r]) {
            let slot = self.adapter.slot_of(batch.modality_ids[r])?;
            let row = self.modality_embedding.value.row(slot);
            for (h, &e) in hidden.row_mut(r).iter_mut().zip(row) {
                *h += e;
            }
        }
        Ok(())
    }

    /// Runs the encoder stack on an adapted, embedded hidden state.
    pub fn encode(
        &self,
        mut hidden: Matrix<T>,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Matrix<T>, Vec<encoder::EncoderLayerCache<T>>)> {
        let seq = layout(batch);
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = layer.forward(&hidden, seq, rng.as_deref_mut())?;
            next.check_finite(&format!("encoder.{i}"))?;
            caches.push(cache);
            hidden = next;
        }
        Ok((hidden, caches))
    }

    /// Masked mean per sample, then `z·W + b`. Returns `(pooled, logits)`.
    pub fn pool_and_classify(&self, hidden: &Matrix<T>, batch: &Batch) -> Result<(Matrix<T>, Matrix<T>)> {
        let d = self.config.d_model;
        let s = batch.seq_len;
        let mut pooled = Matrix::zeros(batch.size, d);
        for b in 0..batch.size {
            let z = masked_mean_pool(&hidden.row_block(b * s, s), batch.sample_mask(b))?;
            pooled.row_mut(b).copy_from_slice(z.data());
        }
        let logits = self.classifier.forward(&pooled)?;
        logits.check_finite("classifier")?;
        Ok((pooled, logits))
    }

    /// Full forward pass. Dropout is active only when `rng` is given.
    pub fn forward(&self, batch: &Batch, mut rng: Option<&mut ChaCha8Rng>) -> Result<ForwardPass<T>> {
        self.check_batch(batch)?;
        let (mut hidden, adapter) = self.adapter.forward(batch)?;
        self.add_modality_embedding(&mut hidden, batch)?;
        let (hidden, layers) = self.encode(hidden, batch, rng.as_deref_mut())?;
        let (pooled, logits) = self.pool_and_classify(&hidden, batch)?;
        Ok(ForwardPass {
            adapter,
            layers,
            pooled,
            logits,
        })
    }

    /// Deterministic inference logits.
    pub fn logits(&self, batch: &Batch) -> Result<Matrix<T>> {
        Ok(self.forward(batch, None)?.logits)
    }

    /// Accumulates gradients of the loss whose logit gradient is `d_logits`.
    pub fn backward(&mut self, batch: &Batch, pass: &ForwardPass<T>, d_logits: &Matrix<T>) -> Result<()> {
        let seq = layout(batch);
        let s = batch.seq_len;
        let d_pooled = self.classifier.backward(&pass.pooled, d_logits)?;
        let mut d_hidden = Matrix::zeros(batch.size * s, self.config.d_model);
        for b in 0..batch.size {
            let dz = masked_mean_pool_backward(&Matrix::row_vector(d_pooled.row(b).to_vec()), batch.sample_mask(b))?;
            for r in 0..s {
                d_hidden.row_mut(b * s + r).copy_from_slice(dz.row(r));
            }
        }
        for (layer, cache) in self.layers.iter_mut().zip(&pass.layers).rev() {
            d_hidden = layer.backward(&d_hidden, cache, seq)?;
        }
        let mut d_table = Matrix::zeros(self.config.modalities.len(), self.config.d_model);
        for r in (0..d_hidden.rows()).filter(|&r| batch.mask[r]) {
            let slot = self.adapter.slot_of(batch.modality_ids[r])?;
            for (t, &g) in d_table.row_mut(slot).iter_mut().zip(d_hidden.row(r)) {
                *t += g;
            }
        }
        self.modality_embedding.accumulate(&d_table)?;
        self.adapter.backward(&d_hidden, &pass.adapter)
    }

    /// Forward, mean cross-entropy, backward. Gradients accumulate into the
    /// parameters; zero them first unless accumulation is intended.
    pub fn forward_backward(&mut self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<(T, Matrix<T>)> {
        let pass = self.forward(batch, rng)?;
        let (loss, d_logits) = ce_loss(&pass.logits, &batch.labels)?;
        self.backward(batch, &pass, &d_logits)?;
        Ok((loss, pass.logits))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.labels.len() != batch.size || batch.mask.len() != batch.size * batch.seq_len {
            return Err(MaaError::shape("forward", "batch fields disagree on size"));
        }
        for b in 0..batch.size {
            if batch.real_count(b) == 0 {
                return Err(MaaError::EmptyMask);
            }
        }
        Ok(())
    }
}

fn layout(batch: &Batch) -> SeqLayout<'_> {
    SeqLayout {
        size: batch.size,
        seq_len: batch.seq_len,
        mask: &batch.mask,
    }
}

impl<T: Real> ParamSet<T> for MaaModel<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut out = self.adapter.params();
        out.push(&self.modality_embedding);
        for l in &self.layers {
            out.extend(l.params());
        }
        out.extend(self.classifier.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = self.adapter.params_mut();
        out.push(&mut self.modality_embedding);
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.extend(self.classifier.params_mut());
        out
    }
}

/// Mean over the batch of `−log softmax(logits)[y]`, via log-sum-exp, with
/// `dLogits = (softmax − onehot) / B`.
pub fn ce_loss<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (n, c) = logits.shape();
    if labels.len() != n || n == 0 {
        return Err(MaaError::shape(
            "ce_loss",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = softmax_rows(logits);
    let mut loss = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(MaaError::Label { label: y, classes: c });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv_n);
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(MaaError::NonFinite { op: "ce_loss".into() });
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_uniform_logits_give_ln_c() {
        let (loss, _) = ce_loss(&Matrix::<f64>::zeros(3, 28), &[0, 5, 27]).unwrap();
        assert!((loss - 28f64.ln()).abs() < 1e-12);
        assert!((loss - 3.3322).abs() < 1e-4);
    }

    #[test]
    fn ce_saturated_logit_gives_zero_loss() {
        let mut logits = Matrix::<f64>::zeros(1, 4);
        logits.set(0, 2, 1000.0);
        let (loss, grad) = ce_loss(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ce_hand_value() {
        let logits = Matrix::<f64>::from_rows(&[vec![2.0, 1.0, 0.0]]);
        let (loss, grad) = ce_loss(&logits, &[0]).unwrap();
        // ln(1 + e^-1 + e^-2), evaluated independently to 30 digits
        assert!((loss - 0.407_605_964_444_380_3).abs() < 1e-14);
        assert!(grad.sum().abs() < 1e-15);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        assert!(matches!(
            ce_loss(&Matrix::<f64>::zeros(1, 3), &[3]),
            Err(MaaError::Label { label: 3, classes: 3 })
        ));
    }
}

#[cfg(test)]
mod pipeline_tests;
