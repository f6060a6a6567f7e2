use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harmonize_cli::{commands, with_workers, CliResult, Overrides, RunConfig};
use harmonize_core::Direction;

#[derive(Parser)]
#[command(name = "harmonize", version, about = "Diffusion-model contrast harmonization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    direction: Option<Direction>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overriding `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the phantom cohort into `paths.data_dir`.
    GenPhantoms,
    /// Split the cohort into subject-level folds.
    SplitFolds,
    /// Train one direction on a fold's training subjects.
    Train(FoldArg),
    /// Translate a fold's test subjects with its checkpoint.
    Translate(FoldArg),
    /// Score a fold's test subjects.
    Evaluate(FoldArg),
    /// Aggregate fold metrics.
    Report,
}

#[derive(Args)]
struct FoldArg {
    #[arg(long)]
    fold: usize,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    cfg.apply(&Overrides {
        direction: cli.common.direction,
        seed: cli.common.seed,
        workers: cli.common.workers,
        out_dir: cli.common.out,
    });
    with_workers(cfg.workers, || match cli.command {
        Command::GenPhantoms => commands::gen_phantoms(&cfg).map(drop),
        Command::SplitFolds => commands::split_folds(&cfg).map(drop),
        Command::Train(f) => commands::train(&cfg, f.fold).map(drop),
        Command::Translate(f) => commands::translate(&cfg, f.fold).map(drop),
        Command::Evaluate(f) => commands::evaluate(&cfg, f.fold).map(drop),
        Command::Report => commands::report(&cfg).map(drop),
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
