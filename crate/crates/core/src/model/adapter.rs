//! Modal difference elimination: each real token goes through
//! `Act(FC(LN(z)))` before fusion.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::layers::{LayerNorm, Linear};
use crate::dataio::{Batch, ModalityId, ModalityInfo};
use crate::error::{MaaError, Result};
use crate::numcore::{Activation, LayerNormCache, Matrix, ParamTensor, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdapterMode {
    /// One LN → FC → Act block per modality.
    #[default]
    Independent,
    /// A stack of M blocks (M = number of modalities) applied to every token.
    Shared,
    /// Tokens pass through unchanged; every modality must already have width D.
    None,
}

impl FromStr for AdapterMode {
    type Err = MaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independent" => Ok(AdapterMode::Independent),
            "shared" => Ok(AdapterMode::Shared),
            "none" => Ok(AdapterMode::None),
            other => Err(MaaError::Config(format!("unknown adapter mode `{other}`"))),
        }
    }
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterMode::Independent => "independent",
            AdapterMode::Shared => "shared",
            AdapterMode::None => "none",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AdapterBlock<T> {
    pub norm: LayerNorm<T>,
    pub fc: Linear<T>,
}

pub struct BlockCache<T> {
    ln: LayerNormCache<T>,
    normalized: Matrix<T>,
    pre_act: Matrix<T>,
}

impl<T: Real> AdapterBlock<T> {
    fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, eps: f64, std: f64, rng: &mut R) -> Self {
        AdapterBlock {
            norm: LayerNorm::new(&format!("{name}.ln"), input, eps),
            fc: Linear::new(&format!("{name}.fc"), input, output, std, rng),
        }
    }

    fn forward(&self, x: &Matrix<T>, act: Activation) -> Result<(Matrix<T>, BlockCache<T>)> {
        let (normalized, ln) = self.norm.forward(x)?;
        let pre_act = self.fc.forward(&normalized)?;
        let out = act.forward(&pre_act);
        Ok((out, BlockCache { ln, normalized, pre_act }))
    }

    fn backward(&mut self, dy: &Matrix<T>, cache: &BlockCache<T>, act: Activation) -> Result<Matrix<T>> {
        let dpre = act.backward(&cache.pre_act, dy)?;
        let dnorm = self.fc.backward(&cache.normalized, &dpre)?;
        self.norm.backward(&dnorm, &cache.ln)
    }
}

#[derive(Clone, Debug)]
pub struct Adapter<T> {
    pub mode: AdapterMode,
    pub activation: Activation,
    pub blocks: Vec<AdapterBlock<T>>,
    modalities: Vec<ModalityInfo>,
    d_model: usize,
}

pub struct AdapterCache<T> {
    /// Per group: the batch rows it covers and one cache per block applied.
    groups: Vec<(Vec<usize>, Vec<BlockCache<T>>)>,
}

impl<T: Real> Adapter<T> {
    pub fn new<R: Rng + ?Sized>(
        mode: AdapterMode,
        activation: Activation,
        modalities: &[ModalityInfo],
        d_model: usize,
        eps: f64,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = match mode {
            AdapterMode::Independent => modalities
                .iter()
                .map(|m| AdapterBlock::new(&format!("adapter.{}", m.id), m.dim, d_model, eps, init_std, rng))
                .collect(),
            AdapterMode::Shared => {
                let input = modalities[0].dim;
                if let Some(m) = modalities.iter().find(|m| m.dim != input) {
                    return Err(MaaError::Config(format!(
                        "shared adapter needs equal input widths, modality {} has {} vs {input}",
                        m.id, m.dim
                    )));
                }
                (0..modalities.len())
                    .map(|i| {
                        let width = if i == 0 { input } else { d_model };
                        AdapterBlock::new(&format!("adapter.shared{i}"), width, d_model, eps, init_std, rng)
                    })
                    .collect()
            }
            AdapterMode::None => {
                if let Some(m) = modalities.iter().find(|m| m.dim != d_model) {
                    return Err(MaaError::Config(format!(
                        "adapter mode none needs D_m = D, modality {} has {} vs {d_model}",
                        m.id, m.dim
                    )));
                }
                Vec::new()
            }
        };
        Ok(Adapter {
            mode,
            activation,
            blocks,
            modalities: modalities.to_vec(),
            d_model,
        })
    }

    pub fn slot_of(&self, id: ModalityId) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.id == id)
            .ok_or(MaaError::UnknownModality(id.0))
    }

    /// Gathers the real tokens of the given rows into an `n × dim` matrix.
    fn gather(batch: &Batch, rows: &[usize], dim: usize) -> Matrix<T> {
        let mut x = Matrix::zeros(rows.len(), dim);
        for (i, &r) in rows.iter().enumerate() {
            for (o, &v) in x.row_mut(i).iter_mut().zip(&batch.tokens.row(r)[..dim]) {
                *o = T::of(v as f64);
            }
        }
        x
    }

    /// Maps every real token to width `D`; masked slots stay zero.
    pub fn forward(&self, batch: &Batch) -> Result<(Matrix<T>, AdapterCache<T>)> {
        let total = batch.size * batch.seq_len;
        let mut groups: Vec<Vec<usize>> = match self.mode {
            AdapterMode::Independent => vec![Vec::new(); self.modalities.len()],
            _ => vec![Vec::new()],
        };
        for r in (0..total).filter(|&r| batch.mask[r]) {
            let slot = self.slot_of(batch.modality_ids[r])?;
            let dim = batch.dim_of(batch.modality_ids[r]).unwrap_or(batch.width);
            if dim != self.modalities[slot].dim {
                return Err(MaaError::shape(
                    "adapt",
                    format!(
                        "modality {} has width {dim} in the batch, model expects {}",
                        self.modalities[slot].id, self.modalities[slot].dim
                    ),
                ));
            }
            let g = if self.mode == AdapterMode::Independent { slot } else { 0 };
            groups[g].push(r);
        }

        let mut out = Matrix::zeros(total, self.d_model);
        let mut caches = Vec::with_capacity(groups.len());
        for (g, rows) in groups.into_iter().enumerate() {
            if rows.is_empty() {
                caches.push((rows, Vec::new()));
                continue;
            }
            let in_dim = match self.mode {
                AdapterMode::Independent => self.modalities[g].dim,
                _ => self.modalities[0].dim,
            };
            let mut h = Self::gather(batch, &rows, in_dim);
            let mut block_caches = Vec::new();
            let blocks: &[AdapterBlock<T>] = match self.mode {
                AdapterMode::Independent => std::slice::from_ref(&self.blocks[g]),
                AdapterMode::Shared => &self.blocks,
                AdapterMode::None => &[],
            };
            for block in blocks {
                let (next, cache) = block.forward(&h, self.activation)?;
                block_caches.push(cache);
                h = next;
            }
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(r).copy_from_slice(h.row(i));
            }
            caches.push((rows, block_caches));
        }
        out.check_finite("adapter")?;
        Ok((out, AdapterCache { groups: caches }))
    }

    /// Accumulates adapter gradients from `d_out` (gradient w.r.t. the
    /// adapter output, `B·S × D`).
    pub fn backward(&mut self, d_out: &Matrix<T>, cache: &AdapterCache<T>) -> Result<()> {
        for (g, (rows, block_caches)) in cache.groups.iter().enumerate() {
            if rows.is_empty() || block_caches.is_empty() {
                continue;
            }
            let mut d = Matrix::zeros(rows.len(), self.d_model);
            for (i, &r) in rows.iter().enumerate() {
                d.row_mut(i).copy_from_slice(d_out.row(r));
            }
            let activation = self.activation;
            let blocks: &mut [AdapterBlock<T>] = match self.mode {
                AdapterMode::Independent => std::slice::from_mut(&mut self.blocks[g]),
                _ => &mut self.blocks,
            };
            for (block, bc) in blocks.iter_mut().zip(block_caches).rev() {
                d = block.backward(&d, bc, activation)?;
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        self.blocks
            .iter()
            .flat_map(|b| b.norm.params().into_iter().chain(b.fc.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.norm.params_mut().into_iter().chain(b.fc.params_mut()))
            .collect()
    }
}
