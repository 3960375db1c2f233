//! Command-line front end: `train`, `eval`, `ablate`, `curves`.

mod config;

pub use config::{AblateSection, DataSource, OutputSection, RunConfig};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::DataError;
use crate::model::{load_checkpoint, peek_dtype, CheckpointError};
use crate::numerics::{Dtype, Real};
use crate::trainer::{
    curves_csv, epoch_log_path, evaluate_params, run_ablation, train_run, write_ablation_csv, Precision, RunOptions,
    TrainError, Variant,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("checkpoint does not match the config: {0}")]
    Mismatch(String),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { field, message } => CliError::Config { field, message },
            other => CliError::Train(other),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Fixed,
    Fast,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Fixed => Precision::Fixed,
            PrecisionArg::Fast => Precision::Fast,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "htcn", version, about = "Tri-stream contrastive deep clustering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the commands that read a run config.
#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// run config (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// dataset file or directory, replacing `data.path`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// output directory, replacing `output.dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// replaces `train.seed` (for `ablate`, the seed list)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the run directory.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// continue from the newest checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint's cluster assignments on the configured data.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every ablation variant for every seed and write `ablation.csv`.
    Ablate {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Convert a run's epoch log into `curves.csv`.
    Curves {
        /// run directory
        #[arg(long)]
        out: PathBuf,
    },
}

pub const CONFIG_COPY: &str = "config.toml";
pub const EVAL_JSON: &str = "eval.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const CURVES_CSV: &str = "curves.csv";

impl ConfigArgs {
    /// The config file with command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(p) = &self.data {
            cfg.data.set_path(p.clone())?;
        }
        if let Some(d) = &self.out {
            cfg.output.dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.ablate.seeds = vec![s];
        }
        if let Some(p) = self.precision {
            cfg.train.precision = p.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command, writing human-readable results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train { args, resume } => cmd_train(&args.resolve()?, resume, out),
        Command::Eval { args, checkpoint } => cmd_eval(&args.resolve()?, &checkpoint, out),
        Command::Ablate { args } => cmd_ablate(&args.resolve()?, out),
        Command::Curves { out: dir } => cmd_curves(&dir, out),
    }
}

fn say(out: &mut dyn Write, line: String) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn cmd_train(cfg: &RunConfig, resume: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = &cfg.output.dir;
    let data = cfg.data.load(cfg.train.model.backbone.input_resolution)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(&dir.join(CONFIG_COPY), cfg.to_toml().as_bytes())?;
    let opts = RunOptions {
        out_dir: Some(dir.clone()),
        resume,
        stop_after: None,
    };
    let records = match cfg.train.precision {
        Precision::Fixed => train_run::<f64>(&cfg.train, &data, &opts)?.records,
        Precision::Fast => train_run::<f32>(&cfg.train, &data, &opts)?.records,
    };
    match records.last() {
        Some(r) => say(out, format!("epoch {} nmi {} acc {} ari {}", r.epoch, r.nmi, r.acc, r.ari)),
        None => say(out, "no epochs run".into()),
    }
}

fn eval_with<T: Real>(cfg: &RunConfig, bytes: &[u8], path: &Path) -> Result<crate::trainer::Evaluation, CliError> {
    let params = load_checkpoint::<T>(bytes).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    let (have, want) = (&params.arch, &cfg.train.model);
    if have.clusters != want.clusters {
        return Err(CliError::Mismatch(format!(
            "checkpoint has {} clusters, config has {}",
            have.clusters, want.clusters
        )));
    }
    if have.backbone.input_resolution != want.backbone.input_resolution {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects {0}x{0} inputs, config has {1}x{1}",
            have.backbone.input_resolution, want.backbone.input_resolution
        )));
    }
    if have != want {
        return Err(CliError::Mismatch("model architectures differ".into()));
    }
    let data = cfg.data.load(want.backbone.input_resolution)?;
    Ok(evaluate_params(&params, &cfg.train, &data)?)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = fs::read(checkpoint).map_err(|e| io_err(checkpoint, e))?;
    let dtype = peek_dtype(&bytes).map_err(|source| CliError::Checkpoint {
        path: checkpoint.to_path_buf(),
        source,
    })?;
    // the checkpoint's own precision wins over the config's
    let ev = match dtype {
        Dtype::F64 => eval_with::<f64>(cfg, &bytes, checkpoint)?,
        Dtype::F32 => eval_with::<f32>(cfg, &bytes, checkpoint)?,
    };
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let json = serde_json::to_string_pretty(&ev).expect("evaluation serializes");
    write(&dir.join(EVAL_JSON), json.as_bytes())?;
    say(out, format!("nmi {} acc {} ari {}", ev.nmi, ev.acc, ev.ari))
}

pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let data = cfg.data.load(cfg.train.model.backbone.input_resolution)?;
    let seeds = &cfg.ablate.seeds;
    let rows = match cfg.train.precision {
        Precision::Fixed => run_ablation::<f64>(&cfg.train, &data, seeds, &Variant::TABLE)?,
        Precision::Fast => run_ablation::<f32>(&cfg.train, &data, seeds, &Variant::TABLE)?,
    };
    let mut csv = Vec::new();
    write_ablation_csv(&rows, &mut csv).map_err(|e| io_err(Path::new(ABLATION_CSV), e))?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(&dir.join(ABLATION_CSV), &csv)?;
    out.write_all(&csv).map_err(|e| io_err(Path::new("<stdout>"), e))
}

pub fn cmd_curves(dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let log = epoch_log_path(dir);
    let text = fs::read_to_string(&log).map_err(|e| io_err(&log, e))?;
    let csv = curves_csv(&text)?;
    let path = dir.join(CURVES_CSV);
    write(&path, csv.as_bytes())?;
    say(out, format!("wrote {}", path.display()))
}
