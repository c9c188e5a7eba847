//! Command-line front end: dataset generation, sync-expert pretraining,
//! training, sampling, streaming, evaluation and checkpoint inspection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ColorChoice, Parser, Subcommand};

/// Audio-driven facial motion generation with a multi-stream transformer.
///
/// Settings come from built-in defaults, then `--config`, then each
/// `--set`, then command flags. Run `motiondit defaults` for every key.
#[derive(Parser, Debug)]
#[command(name = "motiondit", version, about, long_about = None)]
pub struct Cli {
    /// Plain-text `section.key=value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Seed for the command's random stream (data, pretrain, train or
    /// sampler seed depending on the command) [default: from config, 0].
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run data-parallel sections on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,

    /// Replace the contents of a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic oracle dataset.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset spec file (`key=value` lines of the `data` section).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Pretrain the audio-lip sync expert on a dataset.
    PretrainAlse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Epochs [default: pretrain.epochs = 30].
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the motion model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Architecture variant: c2f, no_c2f, caba or maf [default: model.variant = c2f].
        #[arg(long)]
        variant: Option<String>,
        /// Frozen sync-expert checkpoint enabling the gated sync loss [default: train.alse, none].
        #[arg(long)]
        alse: Option<PathBuf>,
        /// Model checkpoint to continue from; its architecture replaces the
        /// `model` section [default: fresh initialisation].
        #[arg(long)]
        init: Option<PathBuf>,
        /// Epochs [default: train.epochs = 10].
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate motion for one audio feature file.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Audio features (AFEA file).
        #[arg(long)]
        audio: PathBuf,
        /// Clip metadata file providing identity keypoints and emotion.
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gen: GenArgs,
        /// Also write the motion as text, one frame per line.
        #[arg(long)]
        text: bool,
    },
    /// Generate motion chunk by chunk from a directory of AFEA files.
    Stream {
        #[arg(long)]
        model: PathBuf,
        /// Directory of AFEA chunks, consumed in lexicographic order.
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gen: GenArgs,
        /// Frames per chunk [default: sampler.chunk_frames = 100].
        #[arg(long)]
        chunk_frames: Option<usize>,
    },
    /// Score generated (or ground-truth) motion on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model checkpoint; required unless `--ground-truth`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Score the dataset's own motion instead of generated motion.
        #[arg(long)]
        ground_truth: bool,
        /// Clips to score: val, train or all.
        #[arg(long, default_value = "val")]
        split: String,
        /// Sync-expert checkpoint for the mean sync loss column.
        #[arg(long)]
        alse: Option<PathBuf>,
        /// Window length and stride in frames.
        #[arg(long, default_value_t = 80)]
        window: usize,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Print a checkpoint manifest or a summary of a data file or directory.
    Inspect { path: PathBuf },
    /// Print the full default configuration.
    Defaults,
}

/// Sampler flags shared by the generating commands.
#[derive(clap::Args, Debug, Default)]
pub struct GenArgs {
    /// Euler steps [default: sampler.steps = 10].
    #[arg(long)]
    steps: Option<usize>,
    /// Audio guidance scale [default: sampler.cfg_audio = 0].
    #[arg(long)]
    cfg_audio: Option<f64>,
    /// Emotion guidance scale [default: sampler.cfg_emotion = 0].
    #[arg(long)]
    cfg_emotion: Option<f64>,
    /// Identity guidance scale [default: sampler.cfg_identity = 0].
    #[arg(long)]
    cfg_identity: Option<f64>,
    /// Normalisation statistics [default: stats.norm next to the model].
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Motion file whose first frame guides generation [default: neutral
    /// pose for streaming, no guide for sampling].
    #[arg(long)]
    guide: Option<PathBuf>,
    /// Emotion label overriding the metadata file.
    #[arg(long)]
    emotion: Option<usize>,
}

/// A failure reported as `ERROR:<kind>:<message>`.
#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

impl From<motiondit::Error> for CliError {
    fn from(e: motiondit::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

fn no_color() -> bool {
    std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty())
}

fn main() -> ExitCode {
    let color = if no_color() { ColorChoice::Never } else { ColorChoice::Auto };
    let cmd = <Cli as clap::CommandFactory>::command().color(color);
    let cli = match cmd.try_get_matches().and_then(|m| <Cli as clap::FromArgMatches>::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("ERROR:usage:{first}");
            return ExitCode::from(2);
        }
    };

    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let mut logger = env_logger::Builder::new();
    logger.filter_level(level).parse_default_env().format_timestamp(None);
    if no_color() {
        logger.write_style(env_logger::WriteStyle::Never);
    }
    logger.init();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR:{}:{}", e.kind, e.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
