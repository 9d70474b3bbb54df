//! Training configuration as flat `key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are an
//! error. [`TrainConfig::to_text`] writes every key in sorted order, and that
//! text is what checkpoints and reports embed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::{CollateOptions, DatasetHeader, ModalityId, DEFAULT_MAX_SEQ_LEN};
use crate::error::{MaaError, Result};
use crate::model::{AdapterMode, ModelConfig, NormLayout};
use crate::numcore::{Activation, DEFAULT_LN_EPS};
use crate::optim::{AdamWConfig, ScheduleConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = MaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(MaaError::Config(format!("unknown precision `{other}`"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub adapter_mode: AdapterMode,
    pub activation: Activation,
    pub norm_layout: NormLayout,
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    /// `None` uses every modality in the dataset header.
    pub modalities: Option<Vec<ModalityId>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_epochs: f64,
    pub t0_epochs: f64,
    pub t_mult: u64,
    pub eta_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub max_seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_model: 768,
            ff_dim: 2048,
            heads: 8,
            layers: 2,
            adapter_mode: AdapterMode::Independent,
            activation: Activation::Gelu,
            norm_layout: NormLayout::Post,
            dropout: 0.1,
            ln_eps: DEFAULT_LN_EPS,
            init_std: 0.02,
            modalities: None,
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_epochs: 1.0,
            t0_epochs: 10.0,
            t_mult: 2,
            eta_min: 0.0,
            epochs: 50,
            batch_size: 8,
            eval_batch_size: 64,
            seed: 0,
            precision: Precision::F32,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| MaaError::Config(format!("bad value `{value}` for `{key}`")))
}

pub fn parse_modalities(value: &str) -> Result<Option<Vec<ModalityId>>> {
    if value.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    let list = value
        .split([',', '+'])
        .map(|s| s.trim().parse::<ModalityId>())
        .collect::<Result<Vec<_>>>()
        .map_err(|_| MaaError::Config(format!("bad modality list `{value}`")))?;
    if list.is_empty() {
        return Err(MaaError::Config("empty modality list".into()));
    }
    Ok(Some(list))
}

pub fn format_modalities(list: &Option<Vec<ModalityId>>) -> String {
    match list {
        None => "all".into(),
        Some(ids) => ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d_model" => self.d_model = parse(key, v)?,
            "ff_dim" => self.ff_dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "adapter_mode" => self.adapter_mode = v.parse()?,
            "activation" => self.activation = parse(key, v)?,
            "norm_layout" => self.norm_layout = v.parse()?,
            "dropout" => self.dropout = parse(key, v)?,
            "ln_eps" => self.ln_eps = parse(key, v)?,
            "init_std" => self.init_std = parse(key, v)?,
            "modalities" => self.modalities = parse_modalities(v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "t0_epochs" => self.t0_epochs = parse(key, v)?,
            "t_mult" => self.t_mult = parse(key, v)?,
            "eta_min" => self.eta_min = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "max_seq_len" => self.max_seq_len = parse(key, v)?,
            other => return Err(MaaError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("d_model", self.d_model.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("adapter_mode", self.adapter_mode.to_string()),
            ("activation", self.activation.to_string()),
            ("norm_layout", self.norm_layout.to_string()),
            ("dropout", self.dropout.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("init_std", self.init_std.to_string()),
            ("modalities", format_modalities(&self.modalities)),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("t0_epochs", self.t0_epochs.to_string()),
            ("t_mult", self.t_mult.to_string()),
            ("eta_min", self.eta_min.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
        ])
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MaaError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MaaError::Config(m.into()));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        if !(self.warmup_epochs >= 0.0 && self.t0_epochs > 0.0) {
            return bad("warmup_epochs must be >= 0 and t0_epochs > 0");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// Header modalities selected by this config, in header order.
    pub fn selected_modalities(&self, header: &DatasetHeader) -> Result<Vec<crate::dataio::ModalityInfo>> {
        match &self.modalities {
            None => Ok(header.modalities.clone()),
            Some(ids) => {
                for id in ids {
                    if header.modality_index(*id).is_none() {
                        return Err(MaaError::Validation(format!("dataset has no modality {id}")));
                    }
                }
                Ok(header.modalities.iter().filter(|m| ids.contains(&m.id)).cloned().collect())
            }
        }
    }

    pub fn model_config(&self, header: &DatasetHeader) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.d_model,
            ff_dim: self.ff_dim,
            heads: self.heads,
            layers: self.layers,
            adapter: self.adapter_mode,
            activation: self.activation,
            norm: self.norm_layout,
            dropout: self.dropout,
            ln_eps: self.ln_eps,
            init_std: self.init_std,
            modalities: self.selected_modalities(header)?,
            num_classes: header.num_classes(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn collate_options(&self) -> CollateOptions {
        CollateOptions {
            max_seq_len: self.max_seq_len,
            modalities: self.modalities.clone(),
            ..CollateOptions::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Converts epoch-denominated schedule lengths to optimizer steps.
    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleConfig {
        let steps = |epochs: f64| (epochs * steps_per_epoch as f64).round() as u64;
        ScheduleConfig {
            base_lr: self.lr,
            warmup_steps: steps(self.warmup_epochs),
            t0: steps(self.t0_epochs).max(1),
            t_mult: self.t_mult.max(1),
            eta_min: self.eta_min,
        }
    }
}
