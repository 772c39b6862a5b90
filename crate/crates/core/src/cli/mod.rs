//! Commands behind the `convse` binary: synthetic data generation, the two
//! training stages, evaluation and hyperparameter sweeps.
//!
//! A training run directory holds `config.txt` (resolved configuration),
//! `loss_curve.tsv` (`epoch<TAB>loss<TAB>val_rsum` per epoch),
//! `checkpoint.cvse` (selected parameters) and `report.txt`.

pub mod config;
pub mod trainer;

pub use config::{OptimizerKind, Stage, TrainConfig};
pub use trainer::{train_network, EpochRecord, TrainOutcome};

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{synth_generate, DataError, DatasetPaths, PairedDataset, Split, SynthConfig};
use crate::eval::{evaluate, evaluate_folds, fold_average, render_table, EvalError, RetrievalReport};
use crate::losses::LossError;
use crate::model::{init_from_base, init_identity_heads, init_network, EmbeddingNetwork, ModelError, NetworkConfig};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointError, TrainingMeta};
use crate::numerics::Rng;
use crate::optim::OptimError;

pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_CURVE_FILE: &str = "loss_curve.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cvse";
pub const REPORT_FILE: &str = "report.txt";

/// RNG streams for parameter initialization.
pub const BASE_INIT_STREAM: u64 = 100;
pub const HEAD_INIT_STREAM: u64 = 101;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("numeric failure in epoch {epoch}, batch {batch}: {what}")]
    NonFinite { epoch: usize, batch: usize, what: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl RunError {
    pub const EXIT_OTHER: i32 = 1;
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_DATA: i32 = 3;
    pub const EXIT_NUMERIC: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Optim(_) => Self::EXIT_CONFIG,
            RunError::Eval(EvalError::FoldTooLarge { .. }) => Self::EXIT_CONFIG,
            RunError::Data(_) | RunError::Checkpoint(_) | RunError::Eval(EvalError::Data(_)) => Self::EXIT_DATA,
            RunError::Eval(EvalError::EmptySplit(_)) => Self::EXIT_DATA,
            RunError::NonFinite { .. } | RunError::Loss(LossError::NonFinite(_)) => Self::EXIT_NUMERIC,
            _ => Self::EXIT_OTHER,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|e| RunError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), RunError> {
    fs::create_dir_all(path).map_err(|e| RunError::io(path, e))
}

/// Writes a synthetic dataset into `out_dir` using the standard file names.
pub fn cmd_gen_synth(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetPaths, RunError> {
    cfg.validate()?;
    if out_dir.exists() && !out_dir.is_dir() {
        return Err(RunError::Config(format!(
            "{} exists and is not a directory",
            out_dir.display()
        )));
    }
    let ds = synth_generate(cfg)?;
    create_dir(out_dir)?;
    let paths = DatasetPaths::in_dir(out_dir);
    ds.write(&paths)?;
    Ok(paths)
}

fn check_dims(net: &EmbeddingNetwork, ds: &PairedDataset) -> Result<(), RunError> {
    let cfg = net.config();
    for (what, expected, found) in [
        ("image feature dimension", cfg.image_dim, ds.images().dim()),
        ("caption feature dimension", cfg.text_dim, ds.captions().dim()),
    ] {
        if expected != found {
            return Err(DataError::DimMismatch {
                what: what.into(),
                expected,
                found,
            }
            .into());
        }
    }
    Ok(())
}

/// Dataset checks shared by both stages, run before any output is written.
fn load_training_data(cfg: &TrainConfig) -> Result<PairedDataset, RunError> {
    let ds = PairedDataset::load(&cfg.dataset_paths()?)?;
    let pairs = ds.split_pairs(Split::Train).len();
    if pairs == 0 {
        return Err(DataError::EmptySplit(Split::Train).into());
    }
    if pairs < cfg.batch {
        return Err(DataError::SplitSmallerThanBatch {
            split: Split::Train,
            pairs,
            batch: cfg.batch,
        }
        .into());
    }
    Ok(ds)
}

/// Paths of a finished training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
}

fn run_stage(net: EmbeddingNetwork, ds: &PairedDataset, cfg: &TrainConfig) -> Result<RunArtifacts, RunError> {
    let dir = cfg.out_dir()?.to_path_buf();
    create_dir(&dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.render())?;
    let curve_path = dir.join(LOSS_CURVE_FILE);
    let mut curve = fs::File::create(&curve_path).map_err(|e| RunError::io(&curve_path, e))?;

    let outcome = train_network(net, ds, cfg, &mut |r| {
        let val = r.val.map_or("nan".to_string(), |v| format!("{:?}", v.rsum));
        writeln!(curve, "{}\t{:?}\t{val}", r.epoch, r.loss).map_err(|e| RunError::io(&curve_path, e))
    })?;

    let checkpoint = dir.join(CHECKPOINT_FILE);
    let meta = TrainingMeta {
        epoch: outcome.selected_epoch,
        seed: cfg.seed,
        loss: cfg.loss.as_str().into(),
    };
    save_checkpoint(&outcome.network, &meta, &checkpoint)?;

    let report = dir.join(REPORT_FILE);
    write_file(&report, stage_report(cfg, &outcome, ds)?)?;
    Ok(RunArtifacts {
        dir,
        checkpoint,
        report,
    })
}

fn prefixed(prefix: &str, r: &RetrievalReport) -> String {
    r.to_key_values().lines().map(|l| format!("{prefix}.{l}\n")).collect()
}

fn stage_report(cfg: &TrainConfig, outcome: &TrainOutcome, ds: &PairedDataset) -> Result<String, RunError> {
    let mut out = String::new();
    let _ = writeln!(out, "stage={}", cfg.stage.as_str());
    let _ = writeln!(out, "loss={}", cfg.loss);
    let _ = writeln!(out, "selected_epoch={}", outcome.selected_epoch);
    let mut rows = Vec::new();
    if let Some(r) = outcome.initial_val {
        out.push_str(&prefixed("initial_val", &r));
        rows.push(("initial val".to_string(), r));
    }
    if let Some(r) = outcome.history[outcome.selected_epoch - 1].val {
        out.push_str(&prefixed("val", &r));
        rows.push(("val".to_string(), r));
    }
    if !ds.split_images(Split::Test).is_empty() {
        let r = evaluate(&outcome.network, ds, Split::Test)?;
        out.push_str(&prefixed("test", &r));
        rows.push(("test".to_string(), r));
    }
    out.push('\n');
    out.push_str(&render_table(&rows));
    Ok(out)
}

/// Trains the headless base network. Returns the run directory contents.
pub fn cmd_train_base(cfg: &TrainConfig) -> Result<RunArtifacts, RunError> {
    if cfg.stage != Stage::Base {
        return Err(RunError::Config("train-base needs a base-stage config".into()));
    }
    cfg.validate()?;
    let ds = load_training_data(cfg)?;
    let net_cfg = NetworkConfig {
        base_dim: cfg.base_dim,
        ..NetworkConfig::base(ds.images().dim(), ds.captions().dim())
    };
    let net = init_network(net_cfg, &mut Rng::stream(cfg.seed, BASE_INIT_STREAM))?;
    run_stage(net, &ds, cfg)
}

/// Loads a headless checkpoint, attaches projection heads and trains the
/// whole network with the contrastive loss.
pub fn cmd_train_contrastive(cfg: &TrainConfig) -> Result<RunArtifacts, RunError> {
    if cfg.stage != Stage::Contrastive {
        return Err(RunError::Config(
            "train-contrastive needs a contrastive-stage config".into(),
        ));
    }
    cfg.validate()?;
    let base_path = cfg.base_checkpoint.as_deref().expect("validated");
    let (base, _) = load_checkpoint(base_path)?;
    if base.has_heads() {
        return Err(RunError::Config(format!(
            "{} already has projection heads; train-contrastive needs a base checkpoint",
            base_path.display()
        )));
    }
    if base.config().base_dim != cfg.base_dim {
        return Err(RunError::Config(format!(
            "base checkpoint has base_dim {}, config says {}",
            base.config().base_dim,
            cfg.base_dim
        )));
    }
    let ds = load_training_data(cfg)?;
    check_dims(&base, &ds)?;
    let net = if cfg.identity_heads {
        init_identity_heads(&base)?
    } else {
        init_from_base(&base, cfg.head_config(), &mut Rng::stream(cfg.seed, HEAD_INIT_STREAM))?
    };
    run_stage(net, &ds, cfg)
}

/// Reports of one evaluation: a single report, or one per fold plus their
/// average.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub folds: Vec<RetrievalReport>,
    pub report: RetrievalReport,
}

impl EvalOutput {
    pub fn render(&self) -> String {
        let mut rows: Vec<(String, RetrievalReport)> = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("fold {}", i + 1), *r))
            .collect();
        let label = if self.folds.is_empty() { "all" } else { "average" };
        rows.push((label.to_string(), self.report));
        let mut out = render_table(&rows);
        out.push('\n');
        for (i, r) in self.folds.iter().enumerate() {
            out.push_str(&prefixed(&format!("fold{}", i + 1), r));
        }
        out.push_str(&self.report.to_key_values());
        out
    }
}

/// Scores a checkpoint on `split`, optionally in consecutive folds of
/// `fold_size` images.
pub fn cmd_eval(
    checkpoint: &Path,
    paths: &DatasetPaths,
    split: Split,
    fold_size: Option<usize>,
) -> Result<EvalOutput, RunError> {
    let (net, _) = load_checkpoint(checkpoint)?;
    let ds = PairedDataset::load(paths)?;
    check_dims(&net, &ds)?;
    match fold_size {
        None => Ok(EvalOutput {
            folds: Vec::new(),
            report: evaluate(&net, &ds, split)?,
        }),
        Some(size) => {
            let folds = evaluate_folds(&net, &ds, split, size)?;
            let report = fold_average(&folds)?;
            Ok(EvalOutput { folds, report })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Tau,
    Dim,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Dim => "dim",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Tau => vec![0.05, 0.1, 0.5, 1.0],
            SweepParam::Dim => vec![64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0],
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "dim" => Ok(SweepParam::Dim),
            _ => Err(format!("unknown sweep parameter {s:?} (expected tau or dim)")),
        }
    }
}

/// One contrastive run per value of `param`, all with the same seed and
/// base checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Contrastive-stage template. Its `out` is the sweep directory and its
    /// `base_checkpoint`, when unset, is produced by a base run inside it.
    pub base: TrainConfig,
    /// Base-stage settings used when no base checkpoint is given.
    pub base_stage: TrainConfig,
    pub parallel: bool,
}

impl SweepConfig {
    pub fn new(param: SweepParam, base: TrainConfig, base_stage: TrainConfig) -> Self {
        Self {
            param,
            values: param.default_values(),
            base,
            base_stage,
            parallel: false,
        }
    }

    fn run_config(&self, value: f64, base_checkpoint: &Path) -> Result<TrainConfig, RunError> {
        let mut cfg = self.base.clone();
        match self.param {
            SweepParam::Tau => cfg.tau = value,
            SweepParam::Dim => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(RunError::Config(format!(
                        "dim sweep value {value} is not a positive integer"
                    )));
                }
                cfg.dim = value as usize;
            }
        }
        cfg.base_checkpoint = Some(base_checkpoint.to_path_buf());
        cfg.out = Some(self.sweep_dir()?.join(format!("{}_{value}", self.param.as_str())));
        Ok(cfg)
    }

    fn sweep_dir(&self) -> Result<&Path, RunError> {
        self.base.out_dir()
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.values.is_empty() {
            return Err(RunError::Config("sweep value list is empty".into()));
        }
        let placeholder = Path::new("base.cvse");
        for &v in &self.values {
            self.run_config(v, placeholder)?.validate()?;
        }
        if self.base.base_checkpoint.is_none() {
            let mut b = self.base_stage.clone();
            b.out = Some(self.sweep_dir()?.join("base"));
            b.validate()?;
        }
        Ok(())
    }
}

/// Sweep results, one row per value in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<(f64, RetrievalReport)>,
    pub table: String,
}

/// Runs the sweep and writes `sweep.txt` into the sweep directory. Rows
/// report the test split of each selected checkpoint.
pub fn cmd_sweep(sweep: &SweepConfig) -> Result<SweepOutput, RunError> {
    sweep.validate()?;
    let dir = sweep.sweep_dir()?.to_path_buf();
    let base_checkpoint = match &sweep.base.base_checkpoint {
        Some(p) => p.clone(),
        None => {
            let mut b = sweep.base_stage.clone();
            b.out = Some(dir.join("base"));
            cmd_train_base(&b)?.checkpoint
        }
    };
    let configs = sweep
        .values
        .iter()
        .map(|&v| sweep.run_config(v, &base_checkpoint))
        .collect::<Result<Vec<_>, _>>()?;
    let run = |cfg: &TrainConfig| -> Result<RetrievalReport, RunError> {
        let artifacts = cmd_train_contrastive(cfg)?;
        Ok(cmd_eval(&artifacts.checkpoint, &cfg.dataset_paths()?, Split::Test, None)?.report)
    };
    let reports: Vec<RetrievalReport> = if sweep.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        configs.iter().map(run).collect::<Result<Vec<_>, _>>()?
    };
    let rows: Vec<(f64, RetrievalReport)> = sweep.values.iter().copied().zip(reports).collect();
    let labelled: Vec<(String, RetrievalReport)> = rows
        .iter()
        .map(|(v, r)| (format!("{}={v}", sweep.param.as_str()), *r))
        .collect();
    let table = render_table(&labelled);
    write_file(&dir.join("sweep.txt"), &table)?;
    Ok(SweepOutput { rows, table })
}
