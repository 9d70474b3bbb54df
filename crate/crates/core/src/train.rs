//! Seeded training loop, evaluation and the output directory layout.
//!
//! Every random stream is a ChaCha8 generator seeded with
//! `derive_seed(seed, domain, index)`: domain [`SEED_INIT`] with index 0 for
//! parameter initialization, [`SEED_SHUFFLE`] with the epoch index for the
//! sample order, and [`SEED_DROPOUT`] with the global step for dropout
//! masks. Nothing else consumes randomness, so a run resumed from a
//! checkpoint replays exactly.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use crate::config::TrainConfig;
use crate::dataio::{collate, DatasetHeader, EmbeddingRecord};
use crate::error::{MaaError, Result};
use crate::metrics::{append_metrics_csv, map_from_logits, MetricsReport};
use crate::model::MaaModel;
use crate::numcore::{Matrix, ParamSet, Real};
use crate::optim::{clip_grad_norm, lr_at, AdamW};

pub const SEED_INIT: u64 = 1;
pub const SEED_SHUFFLE: u64 = 2;
pub const SEED_DROPOUT: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(seed ^ domain) + index)`.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain).wrapping_add(index))
}

pub fn rng_for(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, index))
}

/// Checks that `other` has the classes and selected modalities the model
/// was built for.
pub fn check_compatible(built_for: &DatasetHeader, other: &DatasetHeader, cfg: &TrainConfig) -> Result<()> {
    if built_for.num_classes() != other.num_classes() {
        return Err(MaaError::Validation(format!(
            "model has {} classes, dataset has {}",
            built_for.num_classes(),
            other.num_classes()
        )));
    }
    for m in cfg.selected_modalities(built_for)? {
        match other.modalities.iter().find(|o| o.id == m.id) {
            None => return Err(MaaError::Validation(format!("dataset lacks modality {}", m.id))),
            Some(o) if o.dim != m.dim => {
                return Err(MaaError::Validation(format!(
                    "modality {} has width {} in the dataset, model expects {}",
                    m.id, o.dim, m.dim
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Deterministic logits for `records`, in record order.
pub fn predict<T: Real>(
    model: &MaaModel<T>,
    header: &DatasetHeader,
    records: &[EmbeddingRecord],
    cfg: &TrainConfig,
) -> Result<Matrix<T>> {
    let opts = cfg.collate_options();
    let mut logits = Matrix::zeros(records.len(), model.config.num_classes);
    for (i, chunk) in records.chunks(cfg.eval_batch_size).enumerate() {
        let batch = collate(chunk, header, &opts)?;
        let out = model.logits(&batch)?;
        for r in 0..chunk.len() {
            logits.row_mut(i * cfg.eval_batch_size + r).copy_from_slice(out.row(r));
        }
    }
    Ok(logits)
}

pub fn evaluate<T: Real>(
    model: &MaaModel<T>,
    header: &DatasetHeader,
    records: &[EmbeddingRecord],
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    map_from_logits(&predict(model, header, records, cfg)?, &labels)
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Metrics over the training logits seen during the epoch (dropout on,
    /// parameters moving).
    pub train: MetricsReport,
    pub val: Option<MetricsReport>,
}

pub struct TrainResult<T> {
    pub model: MaaModel<T>,
    /// Loss of every optimizer step taken by this call.
    pub losses: Vec<f64>,
    pub history: Vec<EpochSummary>,
    pub state: TrainState,
}

pub struct TrainRun<'a> {
    pub config: &'a TrainConfig,
    pub header: &'a DatasetHeader,
    pub train: &'a [EmbeddingRecord],
    pub val: Option<(&'a DatasetHeader, &'a [EmbeddingRecord])>,
    /// Where checkpoints, `metrics.csv` and per-eval reports go.
    pub out_dir: Option<&'a Path>,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<&'a Path>,
    /// Stop after this many epochs in this call (the schedule still spans
    /// `config.epochs`).
    pub epoch_limit: Option<usize>,
}

impl<'a> TrainRun<'a> {
    pub fn new(config: &'a TrainConfig, header: &'a DatasetHeader, train: &'a [EmbeddingRecord]) -> Self {
        TrainRun {
            config,
            header,
            train,
            val: None,
            out_dir: None,
            resume: None,
            epoch_limit: None,
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                MaaError::Validation(format!("{} is locked by another run", dir.display()))
            } else {
                e.into()
            }
        })?;
        Ok(DirLock(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn write_report(dir: &Path, epoch: usize, split: &str, cfg: &TrainConfig, report: &MetricsReport) -> Result<()> {
    let doc = json!({
        "config": cfg.entries(),
        "epoch": epoch,
        "metrics": report.to_json(),
        "split": split,
    });
    let path = dir.join(format!("eval_{split}_epoch{epoch:03}.json"));
    serde_json::to_writer_pretty(File::create(path)?, &doc).map_err(|e| MaaError::Other(e.to_string()))
}

pub fn train<T: Real>(run: &TrainRun<'_>) -> Result<TrainResult<T>> {
    let cfg = run.config;
    cfg.validate()?;
    if run.train.is_empty() {
        return Err(MaaError::Validation("training set is empty".into()));
    }
    let model_cfg = cfg.model_config(run.header)?;
    if let Some((val_header, _)) = run.val {
        check_compatible(run.header, val_header, cfg)?;
    }
    let _lock = run.out_dir.map(DirLock::acquire).transpose()?;
    if let Some(dir) = run.out_dir {
        std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    }

    let (mut model, mut opt, mut state) = match run.resume {
        Some(path) => {
            let ck = load_checkpoint::<T>(path)?;
            if ck.config != *cfg {
                return Err(MaaError::Validation(format!(
                    "{} was written with a different config",
                    path.display()
                )));
            }
            check_compatible(&ck.dataset, run.header, cfg)?;
            let opt = ck
                .optimizer
                .ok_or_else(|| MaaError::Validation(format!("{} has no optimizer state", path.display())))?;
            (ck.model, opt, ck.state)
        }
        None => {
            let model = MaaModel::<T>::new(model_cfg, &mut rng_for(cfg.seed, SEED_INIT, 0))?;
            let opt = AdamW::new(cfg.adamw(), &model.params());
            (model, opt, TrainState::default())
        }
    };

    let steps_per_epoch = run.train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    schedule.validate()?;
    let opts = cfg.collate_options();
    let last_epoch = match run.epoch_limit {
        Some(k) => (state.epochs_done + k).min(cfg.epochs),
        None => cfg.epochs,
    };

    let mut losses = Vec::new();
    let mut history = Vec::new();
    for epoch in state.epochs_done..last_epoch {
        let mut order: Vec<usize> = (0..run.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, SEED_SHUFFLE, epoch as u64));
        let mut epoch_logits = Matrix::<T>::zeros(run.train.len(), model.config.num_classes);
        let mut epoch_labels = Vec::with_capacity(run.train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let records: Vec<EmbeddingRecord> = chunk.iter().map(|&i| run.train[i].clone()).collect();
            let batch = collate(&records, run.header, &opts)?;
            model.zero_grads();
            let mut dropout_rng = rng_for(cfg.seed, SEED_DROPOUT, state.step);
            let rng = (cfg.dropout > 0.0).then_some(&mut dropout_rng);
            let (loss, logits) = model.forward_backward(&batch, rng)?;
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(model.params_mut(), cfg.clip_norm)?;
            }
            opt.step(model.params_mut(), lr_at(state.step, &schedule))?;
            for r in 0..chunk.len() {
                epoch_logits.row_mut(epoch_labels.len()).copy_from_slice(logits.row(r));
                epoch_labels.push(batch.labels[r]);
            }
            losses.push(loss.as_f64());
            state.step += 1;
        }
        state.epochs_done = epoch + 1;

        let train_report = map_from_logits(&epoch_logits, &epoch_labels)?;
        let val_report = run
            .val
            .map(|(h, recs)| evaluate(&model, h, recs, cfg))
            .transpose()?;
        info!(
            "epoch {}/{}: train loss {:.4} acc {:.4}{}",
            epoch + 1,
            cfg.epochs,
            train_report.mean_loss,
            train_report.accuracy,
            val_report
                .as_ref()
                .map(|v| format!(", val loss {:.4} acc {:.4} mAP {:.4}", v.mean_loss, v.accuracy, v.map))
                .unwrap_or_default()
        );

        let improved = val_report.as_ref().is_some_and(|v| v.map > state.best_map);
        if let Some(v) = &val_report {
            state.best_map = state.best_map.max(v.map);
        }
        if let Some(dir) = run.out_dir {
            let csv = dir.join("metrics.csv");
            append_metrics_csv(&csv, epoch + 1, "train", &train_report)?;
            if let Some(v) = &val_report {
                append_metrics_csv(&csv, epoch + 1, "val", v)?;
                write_report(dir, epoch + 1, "val", cfg, v)?;
            }
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), cfg, run.header, &model, None, &state)?;
            }
            save_checkpoint(&dir.join("last.ckpt"), cfg, run.header, &model, Some(&opt), &state)?;
        }
        history.push(EpochSummary {
            epoch: epoch + 1,
            train: train_report,
            val: val_report,
        });
    }
    Ok(TrainResult {
        model,
        losses,
        history,
        state,
    })
}
