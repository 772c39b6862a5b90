//! Run configuration: stage defaults, flat `key = value` files and flag
//! overrides, and the resolved echo written into every run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::RunError;
use crate::data::DatasetPaths;
use crate::losses::{LossConfig, LossKind};
use crate::model::{HeadConfig, DEFAULT_BASE_DIM, DEFAULT_HIDDEN_DIM, DEFAULT_JOINT_DIM};
use crate::optim::LrSchedule;

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_EPOCHS: usize = 30;
pub const BASE_BATCH: usize = 128;
pub const CONTRASTIVE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Base,
    Contrastive,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Contrastive => "contrastive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent; diagnostic only.
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

/// Everything one training stage needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub loss: LossKind,
    pub alpha: f64,
    pub tau: f64,
    /// Joint embedding size `d` (projection head output).
    pub dim: usize,
    pub hidden: usize,
    pub base_dim: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub freeze_base: bool,
    pub mask_same_image: bool,
    /// Start the heads as exact identity maps instead of random weights.
    pub identity_heads: bool,
    pub images: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Keys accepted in config files and echoed into run directories, in echo
/// order. `data` is also accepted and expands to the four dataset paths.
pub const CONFIG_KEYS: [&str; 20] = [
    "stage",
    "loss",
    "alpha",
    "tau",
    "dim",
    "hidden",
    "base_dim",
    "batch",
    "epochs",
    "lr",
    "seed",
    "optimizer",
    "freeze_base",
    "mask_same_image",
    "identity_heads",
    "images",
    "captions",
    "pairs",
    "splits",
    "base_checkpoint",
];

fn parse_bool(key: &str, value: &str) -> Result<bool, RunError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(RunError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, RunError> {
    value
        .parse()
        .map_err(|_| RunError::Config(format!("{key}: cannot parse {value:?}")))
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    /// Defaults for `stage`: MH, batch 128 and 2e-4 dropping to 2e-5 at
    /// epoch 15 for the base stage; CMN, batch 256 and a constant 2e-5 for
    /// the contrastive stage.
    pub fn defaults(stage: Stage) -> Self {
        let (loss, batch, lr) = match stage {
            Stage::Base => (LossKind::Mh, BASE_BATCH, LrSchedule::base_default()),
            Stage::Contrastive => (LossKind::Cmn, CONTRASTIVE_BATCH, LrSchedule::contrastive_default()),
        };
        Self {
            stage,
            loss,
            alpha: DEFAULT_MARGIN,
            tau: DEFAULT_TEMPERATURE,
            dim: DEFAULT_JOINT_DIM,
            hidden: DEFAULT_HIDDEN_DIM,
            base_dim: DEFAULT_BASE_DIM,
            batch,
            epochs: DEFAULT_EPOCHS,
            lr,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            freeze_base: false,
            mask_same_image: false,
            identity_heads: false,
            images: None,
            captions: None,
            pairs: None,
            splits: None,
            base_checkpoint: None,
            out: None,
        }
    }

    /// Sets one key. The `stage` key is echoed but may not change the stage.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RunError> {
        let value = value.trim();
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "stage" => {
                if value != self.stage.as_str() {
                    return Err(RunError::Config(format!(
                        "config is for stage {value:?} but the command runs {:?}",
                        self.stage.as_str()
                    )));
                }
            }
            "loss" => self.loss = value.parse().map_err(RunError::Config)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "base_dim" => self.base_dim = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.lr = LrSchedule::parse(value).map_err(|e| RunError::Config(format!("lr: {e}")))?,
            "seed" => self.seed = parse_num(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => {
                        return Err(RunError::Config(format!(
                            "optimizer: expected adam or sgd, got {value:?}"
                        )))
                    }
                }
            }
            "freeze_base" => self.freeze_base = parse_bool(key, value)?,
            "mask_same_image" => self.mask_same_image = parse_bool(key, value)?,
            "identity_heads" => self.identity_heads = parse_bool(key, value)?,
            "images" => self.images = path(),
            "captions" => self.captions = path(),
            "pairs" => self.pairs = path(),
            "splits" => self.splits = path(),
            "data" => {
                let d = DatasetPaths::in_dir(Path::new(value));
                self.images = Some(d.images);
                self.captions = Some(d.captions);
                self.pairs = Some(d.pairs);
                self.splits = Some(d.splits);
            }
            "base_checkpoint" => self.base_checkpoint = path(),
            "out" => self.out = path(),
            _ => return Err(RunError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), RunError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| RunError::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| RunError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Stage defaults, then the config file, then flag overrides.
    pub fn resolve(stage: Stage, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, RunError> {
        let mut cfg = Self::defaults(stage);
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Value of `key` as it appears in the echo.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "stage" => self.stage.as_str().into(),
            "loss" => self.loss.as_str().into(),
            "alpha" => format!("{:?}", self.alpha),
            "tau" => format!("{:?}", self.tau),
            "dim" => self.dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "base_dim" => self.base_dim.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.render(),
            "seed" => self.seed.to_string(),
            "optimizer" => self.optimizer.as_str().into(),
            "freeze_base" => self.freeze_base.to_string(),
            "mask_same_image" => self.mask_same_image.to_string(),
            "identity_heads" => self.identity_heads.to_string(),
            "images" => opt_path(&self.images),
            "captions" => opt_path(&self.captions),
            "pairs" => opt_path(&self.pairs),
            "splits" => opt_path(&self.splits),
            "base_checkpoint" => opt_path(&self.base_checkpoint),
            _ => return None,
        })
    }

    /// Every resolved key, one `key = value` line each. Parsing the echo with
    /// [`apply_text`](Self::apply_text) reproduces the configuration except
    /// for the output directory.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn loss_config(&self) -> Result<LossConfig, RunError> {
        let mut cfg = LossConfig::new(self.loss, self.alpha, self.tau).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.mask_same_image = self.mask_same_image;
        Ok(cfg)
    }

    pub fn head_config(&self) -> HeadConfig {
        if self.identity_heads {
            HeadConfig {
                hidden_dim: 2 * self.base_dim,
                out_dim: self.base_dim,
            }
        } else {
            HeadConfig {
                hidden_dim: self.hidden,
                out_dim: self.dim,
            }
        }
    }

    pub fn dataset_paths(&self) -> Result<DatasetPaths, RunError> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| RunError::Config(format!("missing dataset path `{key}` (or `data`)")))
        };
        Ok(DatasetPaths {
            images: need(&self.images, "images")?,
            captions: need(&self.captions, "captions")?,
            pairs: need(&self.pairs, "pairs")?,
            splits: need(&self.splits, "splits")?,
        })
    }

    pub fn out_dir(&self) -> Result<&Path, RunError> {
        self.out
            .as_deref()
            .ok_or_else(|| RunError::Config("missing output directory `out`".into()))
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<(), RunError> {
        let loss = self.loss_config()?;
        if self.batch < loss.kind.min_batch().max(2) {
            return Err(RunError::Config(format!(
                "batch {} is too small for {} (needs >= {})",
                self.batch,
                loss.kind,
                loss.kind.min_batch().max(2)
            )));
        }
        if self.epochs == 0 {
            return Err(RunError::Config("epochs must be >= 1".into()));
        }
        for (name, v) in [("dim", self.dim), ("hidden", self.hidden), ("base_dim", self.base_dim)] {
            if v == 0 {
                return Err(RunError::Config(format!("{name} must be >= 1")));
            }
        }
        self.dataset_paths()?;
        self.out_dir()?;
        match self.stage {
            Stage::Base => {
                if self.freeze_base {
                    return Err(RunError::Config(
                        "freeze_base would freeze every parameter of the base stage".into(),
                    ));
                }
            }
            Stage::Contrastive => {
                if self.base_checkpoint.is_none() {
                    return Err(RunError::Config("missing `base_checkpoint`".into()));
                }
            }
        }
        Ok(())
    }
}
