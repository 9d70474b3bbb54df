//! Ablation runs: one config key varies, everything else (seed, budget,
//! data) stays fixed, and each cell is scored on a held-out split.

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Precision, TrainConfig};
use crate::dataio::{DatasetHeader, EmbeddingRecord};
use crate::error::{MaaError, Result};
use crate::numcore::{ParamSet, Real};
use crate::train::{evaluate, train, TrainRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Modalities,
    AdapterMode,
    Layers,
}

impl AblationAxis {
    /// The config key this axis varies.
    pub fn key(self) -> &'static str {
        match self {
            AblationAxis::Modalities => "modalities",
            AblationAxis::AdapterMode => "adapter_mode",
            AblationAxis::Layers => "layers",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Modalities => &["G", "G+L", "G+L+T"],
            AblationAxis::AdapterMode => &["none", "shared", "independent"],
            AblationAxis::Layers => &["0", "2"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for AblationAxis {
    type Err = MaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modalities" => Ok(AblationAxis::Modalities),
            "adapter_mode" | "adapter-mode" | "adapter" => Ok(AblationAxis::AdapterMode),
            "layers" => Ok(AblationAxis::Layers),
            other => Err(MaaError::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub base: TrainConfig,
}

impl AblationPlan {
    pub fn new(axis: AblationAxis, base: TrainConfig) -> Self {
        AblationPlan {
            axis,
            values: axis.default_values(),
            base,
        }
    }

    /// Resolved config for each cell, in plan order.
    pub fn cell_configs(&self) -> Result<Vec<TrainConfig>> {
        if self.values.is_empty() {
            return Err(MaaError::Config("ablation plan has no values".into()));
        }
        self.values
            .iter()
            .map(|v| {
                let mut cfg = self.base.clone();
                cfg.set(self.axis.key(), v)?;
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub value: String,
    pub map: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub params: usize,
}

fn run_cell<T: Real>(
    cfg: &TrainConfig,
    header: &DatasetHeader,
    train_set: &[EmbeddingRecord],
    test_set: &[EmbeddingRecord],
) -> Result<(f64, f64, f64, usize)> {
    let result = train::<T>(&TrainRun::new(cfg, header, train_set))?;
    let report = evaluate(&result.model, header, test_set, cfg)?;
    Ok((report.map, report.accuracy, report.mean_loss, result.model.param_count()))
}

/// Trains every cell from the same seed and scores the final model on
/// `test_set`. Cells run concurrently when `parallel` is set; results do not
/// depend on it.
pub fn run_ablation(
    plan: &AblationPlan,
    header: &DatasetHeader,
    train_set: &[EmbeddingRecord],
    test_set: &[EmbeddingRecord],
    parallel: bool,
) -> Result<Vec<AblationCell>> {
    let configs = plan.cell_configs()?;
    let cell = |(value, cfg): (&String, &TrainConfig)| -> Result<AblationCell> {
        let (map, accuracy, loss, params) = match cfg.precision {
            Precision::F32 => run_cell::<f32>(cfg, header, train_set, test_set)?,
            Precision::F64 => run_cell::<f64>(cfg, header, train_set, test_set)?,
        };
        info!("{} = {value}: mAP {map:.4}, accuracy {accuracy:.4}", plan.axis);
        Ok(AblationCell {
            value: value.clone(),
            map,
            accuracy,
            loss,
            params,
        })
    };
    if parallel {
        plan.values.par_iter().zip(&configs).map(cell).collect()
    } else {
        plan.values.iter().zip(&configs).map(cell).collect()
    }
}

pub fn write_ablation_csv(path: &Path, axis: AblationAxis, cells: &[AblationCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let to_err = |e: csv::Error| MaaError::Other(format!("writing {}: {e}", path.display()));
    w.write_record(["axis", "value", "map", "accuracy", "loss", "params"]).map_err(to_err)?;
    for c in cells {
        w.write_record([
            axis.key().to_string(),
            c.value.clone(),
            c.map.to_string(),
            c.accuracy.to_string(),
            c.loss.to_string(),
            c.params.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned plain-text table, one row per cell.
pub fn format_table(axis: AblationAxis, cells: &[AblationCell]) -> String {
    let width = cells.iter().map(|c| c.value.len()).chain([axis.key().len()]).max().unwrap_or(0);
    let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>10}\n", axis.key(), "mAP", "accuracy", "params");
    for c in cells {
        out += &format!(
            "{:<width$}  {:>8.4}  {:>8.4}  {:>10}\n",
            c.value, c.map, c.accuracy, c.params
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_vary_one_key() {
        let plan = AblationPlan::new(AblationAxis::Layers, TrainConfig::default());
        let cfgs = plan.cell_configs().unwrap();
        assert_eq!(cfgs.iter().map(|c| c.layers).collect::<Vec<_>>(), vec![0, 2]);
        let mut a = cfgs[0].clone();
        a.layers = 2;
        assert_eq!(a, cfgs[1]);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut plan = AblationPlan::new(AblationAxis::AdapterMode, TrainConfig::default());
        plan.values = vec!["sideways".into()];
        assert!(matches!(plan.cell_configs(), Err(MaaError::Config(_))));
    }

    #[test]
    fn table_is_aligned() {
        let cells = vec![
            AblationCell {
                value: "G".into(),
                map: 0.5,
                accuracy: 0.25,
                loss: 1.0,
                params: 10,
            },
            AblationCell {
                value: "G+L+T".into(),
                map: 0.75,
                accuracy: 0.5,
                loss: 0.5,
                params: 1000,
            },
        ];
        let table = format_table(AblationAxis::Modalities, &cells);
        let lines: Vec<_> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[2].starts_with("G+L+T"));
    }
}
