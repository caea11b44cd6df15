use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dtm_core::Error;

mod commands;
mod config;
mod output;

use config::{MethodChoice, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "dtm",
    version,
    about = "Deep transformation models for binary outcomes from volumes and tabular data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Base seed; overrides `seed`, `synth.seed` and `embed.tsne.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Explanation method for `explain`.
    #[arg(long, global = true, value_enum)]
    method: Option<MethodChoice>,

    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted lesion signal.
    Synth,
    /// Fit one ensemble per variant on the whole dataset.
    Train,
    /// k-fold cross-validation with pooled test metrics.
    Crossval,
    /// Explanation maps from a trained ensemble.
    Explain,
    /// t-SNE similarity map of explanation maps.
    Embed,
    /// Consolidated markdown report of a run directory.
    Report,
}

/// 1 usage/config, 2 data, 3 numeric.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Network(_)
        | Error::Shape { .. }
        | Error::MissingModality { .. }
        | Error::UnsupportedVariant { .. }
        | Error::Stratification(_) => 1,
        Error::Tensor(_)
        | Error::DegenerateData(_)
        | Error::Encoding { .. }
        | Error::Format { .. }
        | Error::Parse { .. }
        | Error::Io { .. }
        | Error::Csv(_) => 2,
        Error::Numeric(_) | Error::UndefinedMetric(_) | Error::BootstrapUnstable { .. } | Error::TapeState => 3,
    }
}

fn run(cli: Cli) -> dtm_core::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        method: cli.method,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, cli.force),
        Command::Train => commands::train(&cfg, cli.force),
        Command::Crossval => commands::crossval(&cfg, cli.force),
        Command::Explain => commands::explain(&cfg, cli.force),
        Command::Embed => commands::embed(&cfg, cli.force),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
