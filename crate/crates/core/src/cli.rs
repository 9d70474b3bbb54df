//! Command-line interface: `gen`, `train`, `eval`, `gradcheck`, `ablate`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::ablate::{format_table, run_ablation, write_ablation_csv, AblationAxis, AblationPlan};
use crate::checkpoint::{checkpoint_precision, load_checkpoint};
use crate::config::{Precision, TrainConfig};
use crate::dataio::{
    collate, gen_synthetic, load_dataset, write_dataset, CollateOptions, DatasetHeader, EmbeddingRecord,
    InteractionSpec, ModalityId, ModalityInfo, ModalitySpec, SyntheticSpec,
};
use crate::error::{MaaError, Result};
use crate::metrics::MetricsReport;
use crate::model::{layers::truncated_normal, AdapterMode, MaaModel, ModelConfig};
use crate::numcore::{finite_diff_gradcheck, GradcheckConfig, GradcheckReport, Real};
use crate::train::{check_compatible, evaluate, train, TrainRun};

#[derive(Parser, Debug)]
#[command(name = "maa", version, about = "Modality-agnostic adapter fusion over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    Gen(GenArgs),
    /// Train a model, logging per-epoch metrics and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train one model per value of a config key and tabulate test scores.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a held-out split with this many samples per class.
    #[arg(long, requires = "holdout_out")]
    pub holdout_per_class: Option<usize>,
    #[arg(long)]
    pub holdout_out: Option<PathBuf>,
    /// Token widths for G, L, T.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64, 64])]
    pub dims: Vec<usize>,
    /// Tokens per sample for G, L, T.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 4])]
    pub tokens: Vec<usize>,
    /// Fraction of prototype-carrying dimensions for G, L, T.
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.3, 0.6])]
    pub informativeness: Vec<f64>,
    /// Probability that a sample lacks each of G, L, T.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.0, 0.0])]
    pub dropout: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub prototype_std: f64,
    /// Multiplier applied to every text token.
    #[arg(long, default_value_t = 1.0)]
    pub text_scale: f64,
    /// `FIRST,SECOND,K`: label is recoverable only from the prototype pair
    /// of two modalities, e.g. `G,T,4`.
    #[arg(long)]
    pub interaction: Option<String>,
}

/// Config file plus per-key overrides shared by `train` and `ablate`.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub adapter_mode: Option<String>,
    /// Comma- or plus-separated modality list (`G,L`), or `all`.
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// `f32` or `f64`.
    #[arg(long)]
    pub precision: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        let named: [(&str, Option<String>); 12] = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("d_model", self.d_model.map(|v| v.to_string())),
            ("ff_dim", self.ff_dim.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("adapter_mode", self.adapter_mode.clone()),
            ("modalities", self.modalities.clone()),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("precision", self.precision.clone()),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| MaaError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the report here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Adapter modes to check; all of independent and shared by default.
    #[arg(long)]
    pub adapter_mode: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Weight init std; at the training default of 0.02 most gradients sit
    /// near finite-difference roundoff.
    #[arg(long, default_value_t = 0.2)]
    pub init_std: f64,
    /// Flip the sign of every layer-norm gamma gradient (fault injection).
    #[arg(long)]
    pub break_layer_norm: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// `modalities`, `adapter_mode` or `layers`.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values; the axis defaults otherwise.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train cells concurrently.
    #[arg(long)]
    pub parallel: bool,
}

fn modality_ids() -> [ModalityId; 3] {
    [ModalityId::GLOBAL, ModalityId::LOCAL, ModalityId::TEXT]
}

fn per_modality<V: Copy>(name: &str, values: &[V]) -> Result<[V; 3]> {
    values
        .try_into()
        .map_err(|_| MaaError::Config(format!("--{name} needs 3 values (G,L,T), got {}", values.len())))
}

impl GenArgs {
    pub fn spec(&self) -> Result<SyntheticSpec> {
        let dims = per_modality("dims", &self.dims)?;
        let tokens = per_modality("tokens", &self.tokens)?;
        let info = per_modality("informativeness", &self.informativeness)?;
        let dropout = per_modality("dropout", &self.dropout)?;
        let modalities = modality_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let mut m = ModalitySpec::new(id, dims[i], tokens[i], info[i], self.noise);
                m.dropout = dropout[i];
                if id == ModalityId::TEXT {
                    m.scale = self.text_scale;
                }
                m
            })
            .collect();
        let mut spec = SyntheticSpec::new(self.classes, self.per_class, modalities, self.seed);
        spec.prototype_std = self.prototype_std;
        spec.holdout_per_class = self.holdout_per_class.unwrap_or(0);
        if let Some(text) = &self.interaction {
            spec.interaction = Some(parse_interaction(text)?);
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_interaction(text: &str) -> Result<InteractionSpec> {
    let bad = || MaaError::Config(format!("--interaction expects FIRST,SECOND,K, got `{text}`"));
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [first, second, k] = parts[..] else {
        return Err(bad());
    };
    Ok(InteractionSpec {
        first: first.parse().map_err(|_| bad())?,
        second: second.parse().map_err(|_| bad())?,
        prototypes: k.parse().map_err(|_| bad())?,
    })
}

fn describe(header: &DatasetHeader, records: usize) -> String {
    let mods: Vec<String> = header
        .modalities
        .iter()
        .map(|m| format!("{}({}, d={})", m.id, m.name, m.dim))
        .collect();
    format!("{records} records, {} classes, modalities {}", header.num_classes(), mods.join(" "))
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec = args.spec()?;
    let data = gen_synthetic(&spec)?;
    write_dataset(&args.out, &data.header, &data.train)?;
    println!("{}: {}", args.out.display(), describe(&data.header, data.train.len()));
    if let Some(path) = &args.holdout_out {
        write_dataset(path, &data.header, &data.holdout)?;
        println!("{}: {}", path.display(), describe(&data.header, data.holdout.len()));
    }
    Ok(())
}

fn print_config(cfg: &TrainConfig) {
    println!("# resolved config");
    print!("{}", cfg.to_text());
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let (header, records) = load_dataset(&args.train)?;
    let (val_header, val_records) = load_dataset(&args.val)?;
    print_config(&cfg);
    let run = TrainRun {
        val: Some((&val_header, &val_records)),
        out_dir: Some(&args.out),
        resume: args.resume.as_deref(),
        ..TrainRun::new(&cfg, &header, &records)
    };
    let state = match cfg.precision {
        Precision::F32 => train::<f32>(&run)?.state,
        Precision::F64 => train::<f64>(&run)?.state,
    };
    println!(
        "trained {} epochs ({} steps); best val mAP {:.4}; checkpoints in {}",
        state.epochs_done,
        state.step,
        state.best_map,
        args.out.display()
    );
    Ok(())
}

fn eval_with<T: Real>(checkpoint: &Path, header: &DatasetHeader, records: &[EmbeddingRecord]) -> Result<(TrainConfig, MetricsReport)> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    check_compatible(&ck.dataset, header, &ck.config)?;
    let report = evaluate(&ck.model, header, records, &ck.config)?;
    Ok((ck.config, report))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let (header, records) = load_dataset(&args.data)?;
    if records.is_empty() {
        return Err(MaaError::Validation(format!("{} has no records", args.data.display())));
    }
    let (cfg, report) = match checkpoint_precision(&args.checkpoint)? {
        Precision::F32 => eval_with::<f32>(&args.checkpoint, &header, &records)?,
        Precision::F64 => eval_with::<f64>(&args.checkpoint, &header, &records)?,
    };
    let doc = json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "config": cfg.entries(),
        "data": args.data.display().to_string(),
        "metrics": report.to_json(),
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| MaaError::Other(e.to_string()))?;
    println!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, text + "\n")?;
    }
    Ok(report)
}

/// Model and batch used by `gradcheck`: D=16, 2 heads, C=3, all three
/// modalities, one sample lacking text.
pub fn gradcheck_setup(
    mode: AdapterMode,
    layers: usize,
    init_std: f64,
    seed: u64,
) -> Result<(MaaModel<f64>, crate::dataio::Batch)> {
    let dims = if mode == AdapterMode::Independent { [5, 6, 7] } else { [6, 6, 6] };
    let modalities: Vec<ModalityInfo> = modality_ids()
        .into_iter()
        .zip(dims)
        .map(|(id, dim)| ModalityInfo {
            id,
            dim,
            name: id.default_name(),
        })
        .collect();
    let mut cfg = ModelConfig::new(modalities.clone(), 3);
    cfg.d_model = 16;
    cfg.ff_dim = 24;
    cfg.heads = 2;
    cfg.layers = layers;
    cfg.adapter = mode;
    cfg.init_std = init_std;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let header = DatasetHeader::new(vec!["a".into(), "b".into(), "c".into()], modalities);
    let counts = [[1, 2, 2], [1, 3, 0], [1, 1, 1]];
    let records: Vec<EmbeddingRecord> = counts
        .iter()
        .enumerate()
        .map(|(i, c)| EmbeddingRecord {
            id: format!("g{i}"),
            label: i,
            tokens: header
                .modalities
                .iter()
                .zip(c)
                .map(|(m, &n)| truncated_normal(n, m.dim, 1.0, &mut rng))
                .collect(),
        })
        .collect();
    let batch = collate(&records, &header, &CollateOptions::default())?;
    Ok((MaaModel::new(cfg, &mut rng)?, batch))
}

/// Runs the gradient oracle for each requested adapter mode. Dropout is
/// active with a mask that is re-seeded identically for every evaluation.
pub fn run_gradcheck(args: &GradcheckArgs) -> Result<Vec<(AdapterMode, GradcheckReport)>> {
    let modes = match &args.adapter_mode {
        Some(m) => vec![m.parse::<AdapterMode>()?],
        None => vec![AdapterMode::Independent, AdapterMode::Shared],
    };
    let cfg = GradcheckConfig {
        tol: args.tol,
        seed: args.seed,
        ..GradcheckConfig::default()
    };
    modes
        .into_iter()
        .map(|mode| {
            let (mut model, batch) = gradcheck_setup(mode, args.layers, args.init_std, args.seed)?;
            if args.break_layer_norm {
                model.sabotage_layer_norm_backward();
            }
            let report = finite_diff_gradcheck(
                &mut model,
                |m: &mut MaaModel<f64>| {
                    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x5eed);
                    m.forward_backward(&batch, Some(&mut rng)).map(|(loss, _)| loss)
                },
                &cfg,
            )?;
            Ok((mode, report))
        })
        .collect()
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let mut ok = true;
    for (mode, report) in run_gradcheck(args)? {
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "adapter {mode}: max_rel_err {:.3e} (tol {:.0e}), worst {} [{verdict}]",
            report.max_rel_err, report.tol, report.worst_param
        );
        ok &= report.passed();
    }
    Ok(ok)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.config.resolve()?;
    let axis: AblationAxis = args.axis.parse()?;
    let mut plan = AblationPlan::new(axis, base);
    if let Some(values) = &args.values {
        plan.values = values.clone();
    }
    let (header, train_set) = load_dataset(&args.train)?;
    let (test_header, test_set) = load_dataset(&args.test)?;
    for cfg in plan.cell_configs()? {
        check_compatible(&header, &test_header, &cfg)?;
    }
    print_config(&plan.base);
    let cells = run_ablation(&plan, &header, &train_set, &test_set, args.parallel)?;
    std::fs::create_dir_all(&args.out)?;
    write_ablation_csv(&args.out.join("ablation.csv"), axis, &cells)?;
    let table = format_table(axis, &cells);
    std::fs::write(args.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Exit code: 0 success, 1 runtime failure, 2 usage or validation error.
pub fn run(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
