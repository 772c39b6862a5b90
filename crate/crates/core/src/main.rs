use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use convse::cli::{
    cmd_eval, cmd_gen_synth, cmd_sweep, cmd_train_base, cmd_train_contrastive, RunError, Stage, SweepConfig,
    SweepParam, TrainConfig,
};
use convse::data::{DatasetPaths, Split, SynthConfig};

#[derive(Parser)]
#[command(name = "convse", version, about = "Train and evaluate joint image-text embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    GenSynth(GenSynthArgs),
    /// Train the headless base network with a hinge loss.
    TrainBase(TrainArgs),
    /// Attach projection heads to a base checkpoint and train contrastively.
    TrainContrastive(TrainArgs),
    /// Score a checkpoint with R@1/5/10 in both directions.
    Eval(EvalArgs),
    /// One contrastive run per temperature or embedding size.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    latent: usize,
    #[arg(long, default_value_t = 64)]
    image_dim: usize,
    #[arg(long, default_value_t = 48)]
    text_dim: usize,
    #[arg(long, default_value_t = 1000)]
    images: usize,
    #[arg(long, default_value_t = 5)]
    captions_per_image: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding images.fvt, captions.fvt, pairs.tsv and splits.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
}

impl DataArgs {
    fn push(&self, o: &mut Vec<(String, String)>) {
        let mut put = |k: &str, v: &Option<PathBuf>| {
            if let Some(v) = v {
                o.push((k.into(), v.display().to_string()));
            }
        };
        put("data", &self.data);
        put("images", &self.images);
        put("captions", &self.captions);
        put("pairs", &self.pairs);
        put("splits", &self.splits);
    }

    fn resolve(&self) -> Result<DatasetPaths, RunError> {
        let mut cfg = TrainConfig::defaults(Stage::Base);
        let mut o = Vec::new();
        self.push(&mut o);
        for (k, v) in &o {
            cfg.set(k, v)?;
        }
        cfg.dataset_paths()
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Flat `key = value` file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// SH, MH, CSN, CMN_TILDE, CMN or MVN.
    #[arg(long)]
    loss: Option<String>,
    /// Hinge margin.
    #[arg(long)]
    alpha: Option<f64>,
    /// Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Joint embedding size.
    #[arg(long)]
    dim: Option<usize>,
    /// Projection head hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    base_dim: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `rate` or `epoch:rate,epoch:rate,...`.
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Keep the base layers fixed during contrastive training.
    #[arg(long)]
    freeze_base: bool,
    /// Exclude other captions of the anchor's image from its negatives.
    #[arg(long)]
    mask_same_image: bool,
    /// Start the projection heads as identity maps.
    #[arg(long)]
    identity_heads: bool,
    #[command(flatten)]
    paths: DataArgs,
    /// Base checkpoint for the contrastive stage.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.into(), v));
            }
        };
        put("loss", self.loss.clone());
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("tau", self.tau.map(|v| v.to_string()));
        put("dim", self.dim.map(|v| v.to_string()));
        put("hidden", self.hidden.map(|v| v.to_string()));
        put("base_dim", self.base_dim.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("lr", self.lr.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("optimizer", self.optimizer.clone());
        put("freeze_base", self.freeze_base.then(|| "true".into()));
        put("mask_same_image", self.mask_same_image.then(|| "true".into()));
        put("identity_heads", self.identity_heads.then(|| "true".into()));
        put("base_checkpoint", self.base.as_ref().map(|p| p.display().to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        self.paths.push(&mut o);
        o
    }

    fn resolve(&self, stage: Stage) -> Result<TrainConfig, RunError> {
        TrainConfig::resolve(stage, self.config.as_deref(), &self.overrides())
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    paths: DataArgs,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Average over consecutive folds of `--fold-size` images.
    #[arg(long)]
    folds: bool,
    #[arg(long, default_value_t = 1000)]
    fold_size: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// tau or dim.
    #[arg(long)]
    param: SweepParam,
    /// Comma-separated values; defaults to the standard grid for `--param`.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Run the sweep points on separate threads.
    #[arg(long)]
    parallel: bool,
    /// Epochs of the base run trained when `--base` is not given.
    #[arg(long)]
    base_epochs: Option<usize>,
    /// Config file for that base run.
    #[arg(long)]
    base_config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

fn print_report(path: &Path) -> Result<(), RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::GenSynth(a) => {
            let cfg = SynthConfig {
                latent_dim: a.latent,
                image_dim: a.image_dim,
                text_dim: a.text_dim,
                images: a.images,
                captions_per_image: a.captions_per_image,
                noise: a.noise,
                seed: a.seed,
            };
            let paths = cmd_gen_synth(&cfg, &a.out)?;
            println!("wrote {}", paths.images.display());
            println!("wrote {}", paths.captions.display());
            println!("wrote {}", paths.pairs.display());
            println!("wrote {}", paths.splits.display());
        }
        Command::TrainBase(a) => {
            let cfg = a.resolve(Stage::Base)?;
            let run = cmd_train_base(&cfg)?;
            print_report(&run.report)?;
            println!("checkpoint: {}", run.checkpoint.display());
        }
        Command::TrainContrastive(a) => {
            let cfg = a.resolve(Stage::Contrastive)?;
            let run = cmd_train_contrastive(&cfg)?;
            print_report(&run.report)?;
            println!("checkpoint: {}", run.checkpoint.display());
        }
        Command::Eval(a) => {
            let folds = a.folds.then_some(a.fold_size);
            let out = cmd_eval(&a.checkpoint, &a.paths.resolve()?, a.split, folds)?;
            print!("{}", out.render());
        }
        Command::Sweep(a) => {
            let template = a.train.resolve(Stage::Contrastive)?;
            let mut base_overrides = Vec::new();
            base_overrides.push(("seed".to_string(), template.seed.to_string()));
            base_overrides.push(("base_dim".to_string(), template.base_dim.to_string()));
            if let Some(e) = a.base_epochs {
                base_overrides.push(("epochs".to_string(), e.to_string()));
            }
            a.train.paths.push(&mut base_overrides);
            let mut base_stage = TrainConfig::resolve(Stage::Base, a.base_config.as_deref(), &base_overrides)?;
            for (k, v) in [
                ("images", &template.images),
                ("captions", &template.captions),
                ("pairs", &template.pairs),
                ("splits", &template.splits),
            ] {
                if let Some(p) = v {
                    base_stage.set(k, &p.display().to_string())?;
                }
            }
            let mut sweep = SweepConfig::new(a.param, template, base_stage);
            if !a.values.is_empty() {
                sweep.values = a.values;
            }
            sweep.parallel = a.parallel;
            print!("{}", cmd_sweep(&sweep)?.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
