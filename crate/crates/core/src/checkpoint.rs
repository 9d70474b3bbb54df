//! Checkpoint files: model parameters, optimizer moments and loop position.
//!
//! Layout: the 8-byte magic `MAACKPT1`, a little-endian `u64` header length,
//! a JSON header, then raw little-endian blobs. The header carries the format
//! version, the key-sorted config text, the dataset's class names and
//! modalities, the training position, and a manifest of
//! `{name, rows, cols, offset}` with offsets in elements from the start of
//! the blob section. Blobs are `f32` unless the run used `f64`
//! (`dtype` says which). Optimizer moments are stored as tensors named
//! `adamw.m.<param>` and `adamw.v.<param>`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, TrainConfig};
use crate::dataio::{DatasetHeader, ModalityId, ModalityInfo};
use crate::error::{MaaError, Result};
use crate::model::MaaModel;
use crate::numcore::{Matrix, ParamSet, Real};
use crate::optim::AdamW;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAACKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a training run stands after its last completed epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub step: u64,
    /// Best validation mAP so far; `-1` before any evaluation.
    pub best_map: f64,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            epochs_done: 0,
            step: 0,
            best_map: -1.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ModalityEntry {
    id: u8,
    dim: usize,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: String,
    class_names: Vec<String>,
    modalities: Vec<ModalityEntry>,
    state: TrainState,
    adam_step: Option<u64>,
    tensors: Vec<ManifestEntry>,
}

pub struct Checkpoint<T> {
    pub config: TrainConfig,
    /// Class names and modalities of the dataset the model was built for.
    pub dataset: DatasetHeader,
    pub model: MaaModel<T>,
    pub optimizer: Option<AdamW<T>>,
    pub state: TrainState,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    config: &TrainConfig,
    dataset: &DatasetHeader,
    model: &MaaModel<T>,
    optimizer: Option<&AdamW<T>>,
    state: &TrainState,
) -> Result<()> {
    let params = model.params();
    let mut blobs: Vec<(String, &Matrix<T>)> = params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    if let Some(opt) = optimizer {
        blobs.extend(params.iter().zip(&opt.m).map(|(p, m)| (format!("adamw.m.{}", p.name), m)));
        blobs.extend(params.iter().zip(&opt.v).map(|(p, v)| (format!("adamw.v.{}", p.name), v)));
    }
    let mut offset = 0;
    let tensors = blobs
        .iter()
        .map(|(name, m)| {
            let entry = ManifestEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            };
            offset += m.len();
            entry
        })
        .collect();

    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: T::NAME.to_string(),
        config: config.to_text(),
        class_names: dataset.class_names.clone(),
        modalities: dataset
            .modalities
            .iter()
            .map(|m| ModalityEntry {
                id: m.id.0,
                dim: m.dim,
                name: m.name.clone(),
            })
            .collect(),
        state: *state,
        adam_step: optimizer.map(|o| o.t),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| MaaError::Other(e.to_string()))?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, m) in blobs {
            buf.clear();
            m.data().iter().for_each(|&v| v.write_le(&mut buf));
            w.write_all(&buf)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(MaaError::Format {
            offset: 0,
            detail: "not a checkpoint file".into(),
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or(MaaError::Format {
            offset: 8,
            detail: format!("header length {len} exceeds file"),
        })?;
    let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| MaaError::Format {
        offset: 16,
        detail: format!("bad header: {e}"),
    })?;
    if header.version != CHECKPOINT_VERSION {
        return Err(MaaError::Format {
            offset: 16,
            detail: format!("unsupported checkpoint version {}", header.version),
        });
    }
    Ok((header, end))
}

/// Precision the checkpoint was written in, for dispatching the load.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_header(&bytes)?.0.dtype.parse()
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let (header, body_start) = read_header(&bytes)?;
    if header.dtype != T::NAME {
        return Err(MaaError::Validation(format!(
            "checkpoint holds {} values, loader expects {}",
            header.dtype,
            T::NAME
        )));
    }
    let config = TrainConfig::from_text(&header.config)?;
    let dataset = DatasetHeader::new(
        header.class_names.clone(),
        header
            .modalities
            .iter()
            .map(|m| ModalityInfo {
                id: ModalityId(m.id),
                dim: m.dim,
                name: m.name.clone(),
            })
            .collect(),
    );
    let width = std::mem::size_of::<T>();
    let read_tensor = |entry: &ManifestEntry| -> Result<Matrix<T>> {
        let start = body_start + entry.offset * width;
        let n = entry.rows * entry.cols;
        let end = start + n * width;
        if end > bytes.len() {
            return Err(MaaError::Format {
                offset: bytes.len() as u64,
                detail: format!("tensor {} truncated", entry.name),
            });
        }
        let data = bytes[start..end].chunks_exact(width).map(T::read_le).collect();
        Matrix::from_vec(entry.rows, entry.cols, data)
    };
    let find = |name: &str| {
        header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| MaaError::Validation(format!("checkpoint lacks tensor {name}")))
    };

    // initial values are overwritten below, so the seed is irrelevant
    let mut model = MaaModel::new(config.model_config(&dataset)?, &mut ChaCha8Rng::seed_from_u64(0))?;
    for p in model.params_mut() {
        let value = read_tensor(find(&p.name)?)?;
        if value.shape() != p.value.shape() {
            return Err(MaaError::Validation(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
    }
    let optimizer = match header.adam_step {
        None => None,
        Some(t) => {
            let params = model.params();
            let mut opt = AdamW::new(config.adamw(), &params);
            opt.t = t;
            for (i, p) in params.iter().enumerate() {
                opt.m[i] = read_tensor(find(&format!("adamw.m.{}", p.name))?)?;
                opt.v[i] = read_tensor(find(&format!("adamw.v.{}", p.name))?)?;
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        config,
        dataset,
        model,
        optimizer,
        state: header.state,
    })
}
