use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::format::{DatasetHeader, EmbeddingRecord, ModalityId, ModalityInfo};
use crate::error::{MaaError, Result};
use crate::numcore::Matrix;

pub const DEFAULT_MAX_SEQ_LEN: usize = 64;

#[derive(Clone, Debug)]
pub struct CollateOptions {
    pub max_seq_len: usize,
    /// Modalities to keep, in the order their tokens are concatenated.
    /// `None` keeps every header modality in table order.
    pub modalities: Option<Vec<ModalityId>>,
    /// Shuffles the real tokens of each sample (ids travel with them).
    pub permutation_seed: Option<u64>,
    /// Drop trailing text tokens of over-long samples instead of failing.
    pub truncate_text: bool,
}

impl Default for CollateOptions {
    fn default() -> Self {
        CollateOptions {
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            modalities: None,
            permutation_seed: None,
            truncate_text: true,
        }
    }
}

/// Padded batch. Slot `(b, s)` lives in row `b * seq_len + s` of `tokens`;
/// a token of modality m occupies the first `D_m` columns of its row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub width: usize,
    pub tokens: Matrix<f32>,
    pub modality_ids: Vec<ModalityId>,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    /// Modalities that may appear in this batch, with their dimensions.
    pub modalities: Vec<ModalityInfo>,
}

impl Batch {
    #[inline]
    pub fn slot(&self, b: usize, s: usize) -> usize {
        b * self.seq_len + s
    }

    pub fn dim_of(&self, id: ModalityId) -> Option<usize> {
        self.modalities.iter().find(|m| m.id == id).map(|m| m.dim)
    }

    pub fn sample_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn real_count(&self, b: usize) -> usize {
        self.sample_mask(b).iter().filter(|&&m| m).count()
    }

    /// Real tokens of sample `b` with their modality, padding stripped.
    pub fn sample_tokens(&self, b: usize) -> Vec<(ModalityId, Vec<f32>)> {
        (0..self.seq_len)
            .map(|s| self.slot(b, s))
            .filter(|&i| self.mask[i])
            .map(|i| {
                let id = self.modality_ids[i];
                let dim = self.dim_of(id).unwrap_or(self.width);
                (id, self.tokens.row(i)[..dim].to_vec())
            })
            .collect()
    }

    /// Reorders the slots of sample `b`: new slot `s` takes old slot `perm[s]`.
    /// Tokens, modality ids and mask move together.
    pub fn permute_sample(&mut self, b: usize, perm: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.seq_len];
        if perm.len() != self.seq_len
            || perm.iter().any(|&p| p >= self.seq_len || std::mem::replace(&mut seen[p], true))
        {
            return Err(MaaError::Validation(format!(
                "not a permutation of {} slots",
                self.seq_len
            )));
        }
        let base = b * self.seq_len;
        let old_tokens = self.tokens.row_block(base, self.seq_len);
        let old_ids = self.modality_ids[base..base + self.seq_len].to_vec();
        let old_mask = self.mask[base..base + self.seq_len].to_vec();
        for (s, &p) in perm.iter().enumerate() {
            self.tokens.row_mut(base + s).copy_from_slice(old_tokens.row(p));
            self.modality_ids[base + s] = old_ids[p];
            self.mask[base + s] = old_mask[p];
        }
        Ok(())
    }
}

/// Pads records into one batch. Token order is the modality order of
/// `opts.modalities` (header table order by default), each modality's tokens
/// in stored order, unless a permutation seed is given.
pub fn collate(records: &[EmbeddingRecord], header: &DatasetHeader, opts: &CollateOptions) -> Result<Batch> {
    if records.is_empty() {
        return Err(MaaError::Validation("cannot collate an empty batch".into()));
    }
    let selected: Vec<(usize, ModalityInfo)> = match &opts.modalities {
        None => header.modalities.iter().cloned().enumerate().collect(),
        Some(ids) => ids
            .iter()
            .map(|&id| {
                header
                    .modality_index(id)
                    .map(|i| (i, header.modalities[i].clone()))
                    .ok_or(MaaError::UnknownModality(id.0))
            })
            .collect::<Result<_>>()?,
    };
    let width = selected.iter().map(|(_, m)| m.dim).max().unwrap_or(0);

    // (modality id, header slot, token row) per real token, per sample.
    let mut layouts: Vec<Vec<(ModalityId, usize, usize)>> = Vec::with_capacity(records.len());
    for (b, rec) in records.iter().enumerate() {
        if rec.tokens.len() != header.modalities.len() {
            return Err(MaaError::Validation(format!(
                "record `{}` does not match the header",
                rec.id
            )));
        }
        let mut layout: Vec<(ModalityId, usize, usize)> = selected
            .iter()
            .flat_map(|(hi, m)| (0..rec.tokens[*hi].rows()).map(move |r| (m.id, *hi, r)))
            .collect();
        if layout.len() > opts.max_seq_len {
            let text_tokens = layout.iter().filter(|t| t.0 == ModalityId::TEXT).count();
            let excess = layout.len() - opts.max_seq_len;
            if !opts.truncate_text || text_tokens < excess {
                return Err(MaaError::Length {
                    sample: b,
                    len: layout.len(),
                    max: opts.max_seq_len,
                });
            }
            warn!(
                "record `{}`: {} tokens exceed max {}, dropping {excess} trailing text tokens",
                rec.id,
                layout.len(),
                opts.max_seq_len
            );
            let keep_text = text_tokens - excess;
            let mut seen_text = 0;
            layout.retain(|t| {
                if t.0 != ModalityId::TEXT {
                    return true;
                }
                seen_text += 1;
                seen_text <= keep_text
            });
        }
        if layout.is_empty() {
            return Err(MaaError::Validation(format!(
                "record `{}` has no tokens in the selected modalities",
                rec.id
            )));
        }
        if let Some(seed) = opts.permutation_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            layout.shuffle(&mut rng);
        }
        layouts.push(layout);
    }

    let seq_len = layouts.iter().map(Vec::len).max().unwrap_or(0);
    let size = records.len();
    let mut tokens = Matrix::zeros(size * seq_len, width);
    let mut modality_ids = vec![ModalityId(0); size * seq_len];
    let mut mask = vec![false; size * seq_len];
    for (b, layout) in layouts.iter().enumerate() {
        for (s, &(id, hi, r)) in layout.iter().enumerate() {
            let slot = b * seq_len + s;
            let src = records[b].tokens[hi].row(r);
            tokens.row_mut(slot)[..src.len()].copy_from_slice(src);
            modality_ids[slot] = id;
            mask[slot] = true;
        }
        // padding slots inherit the first modality id; they are never read
        let pad_id = layout[0].0;
        for s in layout.len()..seq_len {
            modality_ids[b * seq_len + s] = pad_id;
        }
    }
    Ok(Batch {
        size,
        seq_len,
        width,
        tokens,
        modality_ids,
        mask,
        labels: records.iter().map(|r| r.label).collect(),
        modalities: selected.into_iter().map(|(_, m)| m).collect(),
    })
}
