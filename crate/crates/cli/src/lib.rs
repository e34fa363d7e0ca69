//! Command-line experiments: dataset generation, training, refinement,
//! evaluation and the perturbation and encoding studies.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use error::{CliError, Result};

use clap::{Args, Parser, Subcommand};
use config::Config;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "photoreg", version, about = "Photometric pose regression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset into the output directory.
    GenScene {
        #[command(flatten)]
        common: Common,
    },
    /// Train the radiance field on a dataset's training split.
    TrainField {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a field checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Train the pose regressor on ground-truth poses.
    TrainRegressor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Start from a regressor checkpoint instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune a regressor on the photometric and pose losses.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        regressor: PathBuf,
    },
    /// Fine-tune a regressor photometrically on the unlabeled split.
    RefineUnlabeled {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        regressor: PathBuf,
    },
    /// Pose errors of predictions against a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// A regressor checkpoint, a pose file, or a directory holding one.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Render one dataset pose with a trained field.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pose_index: usize,
    },
    /// Error rate of the photometric loss under pose perturbations.
    PerturbStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Anchor frame; defaults to the first test frame.
        #[arg(long)]
        frame: Option<usize>,
    },
    /// Fixed full, fixed half and coarse-to-fine encodings on co-visible views.
    EncodingAblation {
        #[command(flatten)]
        common: Common,
    },
}

/// Runs one parsed command and returns the bytes of its result JSON.
pub fn execute(command: &Command) -> Result<Vec<u8>> {
    let common = match command {
        Command::GenScene { common }
        | Command::TrainField { common, .. }
        | Command::TrainRegressor { common, .. }
        | Command::Refine { common, .. }
        | Command::RefineUnlabeled { common, .. }
        | Command::Eval { common, .. }
        | Command::Render { common, .. }
        | Command::PerturbStudy { common, .. }
        | Command::EncodingAblation { common } => common,
    };
    let config = Config::load(common.config.as_deref())?;
    let out = &common.out;
    match command {
        Command::GenScene { .. } => commands::gen_scene(&config, out),
        Command::TrainField {
            data, resume, stop_after, ..
        } => commands::train_field(&config, data, out, resume.as_deref(), *stop_after),
        Command::TrainRegressor { data, init, .. } => commands::train_regressor_cmd(&config, data, out, init.as_deref()),
        Command::Refine { data, field, regressor, .. } => commands::refine_cmd(&config, data, field, regressor, out, false),
        Command::RefineUnlabeled { data, field, regressor, .. } => commands::refine_cmd(&config, data, field, regressor, out, true),
        Command::Eval { pred, data, split, .. } => commands::eval_cmd(&config, pred, data, split.as_deref(), out),
        Command::Render {
            field, data, pose_index, ..
        } => commands::render_cmd(&config, field, data, *pose_index, out),
        Command::PerturbStudy { field, data, frame, .. } => commands::perturb_cmd(&config, field, data, *frame, out),
        Command::EncodingAblation { .. } => commands::ablation_cmd(&config, out),
    }
}

/// Sizes the global thread pool from `PHOTOREG_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PHOTOREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PHOTOREG_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))
}
