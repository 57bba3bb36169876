//! `keyopt`: keypoint selection and pose-simulation driver.

// Negated comparisons deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use config::{RunConfig, SampleMethod, SearchMode};
use error::CliError;
use output::Output;

const DEFAULT_OUT: &str = "keyopt-out";
const THREADS_ENV: &str = "KEYOPT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "keyopt", version, about = "Keypoint selection by vote-distribution similarity and dispersion")]
struct Cli {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the configured objects and write them as PLY files.
    Synth,
    /// Sample a keypoint set.
    Sample {
        #[arg(long, value_enum)]
        method: Option<SampleMethod>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Gradient descent on keypoint coordinates.
    Optimize {
        /// Initial keypoints JSON; sampled per the config when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Bounding-box corner enumeration or RANSAC-style search.
    Search {
        #[arg(long, value_enum)]
        mode: Option<SearchMode>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        object: Option<String>,
    },
    /// Train the graph encoder on the configured objects.
    TrainEncoder {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pose-simulation experiment over noise levels.
    Eval {
        /// Extra keypoints JSON evaluated as method "keypoints".
        #[arg(long)]
        keypoints: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Per-keypoint vote histograms and pairwise W1 as CSV.
    HistExport {
        #[arg(long)]
        keypoints: Option<PathBuf>,
        #[arg(long)]
        object: Option<String>,
        #[arg(long)]
        bins: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Sample { .. } => "sample",
            Command::Optimize { .. } => "optimize",
            Command::Search { .. } => "search",
            Command::TrainEncoder { .. } => "train-encoder",
            Command::Eval { .. } => "eval",
            Command::HistExport { .. } => "hist-export",
        }
    }

    fn apply_overrides(&self, cfg: &mut RunConfig) {
        match self {
            Command::Synth => {}
            Command::Sample { method, n } => {
                if let Some(m) = method {
                    cfg.sample.method = *m;
                }
                cfg.n_keypoints = n.or(cfg.n_keypoints);
            }
            Command::Optimize { n, steps, lr, .. } => {
                cfg.n_keypoints = n.or(cfg.n_keypoints);
                cfg.optimize.steps = steps.unwrap_or(cfg.optimize.steps);
                cfg.optimize.lr = lr.unwrap_or(cfg.optimize.lr);
            }
            Command::Search { mode, n, iterations, object } => {
                cfg.search.mode = mode.unwrap_or(cfg.search.mode);
                cfg.n_keypoints = n.or(cfg.n_keypoints);
                cfg.search.iterations = iterations.unwrap_or(cfg.search.iterations);
                if object.is_some() {
                    cfg.search.object = object.clone();
                }
            }
            Command::TrainEncoder { epochs } => cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs),
            Command::Eval { trials, .. } => cfg.eval.trials = trials.unwrap_or(cfg.eval.trials),
            Command::HistExport { object, bins, .. } => {
                if object.is_some() {
                    cfg.hist.object = object.clone();
                }
                cfg.hist.bins = bins.unwrap_or(cfg.hist.bins);
            }
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<String, CliError> {
    let Some(config_path) = &cli.config else {
        let usage = Cli::command().render_usage();
        return Err(CliError::Validation(format!("--config <path> is required\n\n{usage}")));
    };
    configure_threads()?;
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cli.command.apply_overrides(&mut cfg);
    cfg.validate()?;

    let dir = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut out = Output::create(&dir)?;
    let summary = match &cli.command {
        Command::Synth => commands::synth(&cfg, &mut out),
        Command::Sample { .. } => commands::sample(&cfg, &mut out),
        Command::Optimize { init, .. } => commands::optimize(&cfg, init.as_deref(), &mut out),
        Command::Search { .. } => commands::search(&cfg, &mut out),
        Command::TrainEncoder { .. } => commands::train_encoder(&cfg, &mut out),
        Command::Eval { keypoints, .. } => commands::eval(&cfg, keypoints.as_deref(), &mut out),
        Command::HistExport { keypoints, .. } => commands::hist_export(&cfg, keypoints.as_deref(), &mut out),
    }?;
    let dir = out.dir().display().to_string();
    out.finish(cli.command.name(), &cfg.hash())?;
    Ok(format!("{summary} -> {dir}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
