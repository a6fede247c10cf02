use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttbnn_cli::commands::{self, Overrides, PredictInput};
use ttbnn_cli::{CliError, ExperimentConfig};
use ttbnn_core::ThresholdPolicy;

#[derive(Parser)]
#[command(
    name = "ttbnn",
    version,
    about = "Low-rank Bayesian tensor-train networks"
)]
struct Cli {
    /// Worker threads for particle-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (MAP warm start, then SVGD unless trainer = "map").
    Train(TrainArgs),
    /// Accuracy and test log-likelihood of an archive.
    Evaluate {
        archive: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Only the first N test examples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Prune ranks from the posterior-mean scale vectors.
    Compress {
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tau: TauArgs,
        /// Random probe rows used to report the output deviation (0 disables).
        #[arg(long, default_value_t = 256)]
        probe: usize,
    },
    /// Predictive distribution of one input, as CSV.
    Predict {
        archive: PathBuf,
        /// Row of the test split.
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        index: Option<usize>,
        /// File with the input values.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Ranks, parameter counts and scale-vector histograms of an archive.
    Inspect { archive: PathBuf },
}

#[derive(Args)]
struct TauArgs {
    #[arg(long, default_value_t = ThresholdPolicy::default().rel)]
    tau_rel: f64,
    #[arg(long, default_value_t = ThresholdPolicy::default().abs)]
    tau_abs: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment file; defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Only the first N training examples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    tau_rel: Option<f64>,
    #[arg(long)]
    tau_abs: Option<f64>,
}

fn train(args: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Overrides {
        seed: args.seed,
        particles: args.particles,
        iterations: args.iterations,
        out: args.out,
        tau_rel: args.tau_rel,
        tau_abs: args.tau_abs,
    }
    .apply(&mut cfg);
    if let Some(d) = args.data_dir {
        cfg.data.dir = d;
    }
    if let Some(n) = args.limit {
        cfg.data.train_limit = Some(n);
    }
    commands::cmd_train(&cfg, out).map(|_| ())
}

fn policy(t: &TauArgs) -> Result<ThresholdPolicy, CliError> {
    ThresholdPolicy::new(t.tau_rel, t.tau_abs).map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let stdout = std::io::stdout();
    let out = &mut stdout.lock();
    let dir = |d: &Option<PathBuf>| d.as_deref().map(Path::to_path_buf);
    match cli.command {
        Command::Train(args) => train(args, out),
        Command::Evaluate {
            archive,
            data_dir,
            limit,
        } => commands::cmd_evaluate(&archive, dir(&data_dir).as_deref(), limit, out).map(|_| ()),
        Command::Compress {
            archive,
            out: dest,
            tau,
            probe,
        } => commands::cmd_compress(&archive, &dest, &policy(&tau)?, probe, out).map(|_| ()),
        Command::Predict {
            archive,
            index,
            input,
            data_dir,
        } => {
            let which = match (index, input) {
                (Some(i), None) => PredictInput::Index(i),
                (None, Some(p)) => PredictInput::File(p),
                _ => {
                    return Err(CliError::Usage(
                        "give exactly one of --index or --input".into(),
                    ))
                }
            };
            commands::cmd_predict(&archive, &which, dir(&data_dir).as_deref(), out).map(|_| ())
        }
        Command::Inspect { archive } => commands::cmd_inspect(&archive, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ttbnn: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
