use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use quoteflow::pipeline::{run_from_path, Stage};

/// Quote matching, influence networks and causal impact estimation.
#[derive(Debug, Parser)]
#[command(name = "quoteflow", version)]
struct Cli {
    /// Stage to run; `all` runs every stage in order.
    #[arg(value_enum)]
    stage: Stage,
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Rerun even when cached artifacts are up to date.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = panic::catch_unwind(|| run_from_path(cli.stage, &cli.config, cli.force));
    match outcome {
        Ok(Ok(summary)) => {
            log::info!(
                "{} stage(s) run, {} cached",
                summary.executed.len(),
                summary.cached.len()
            );
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            log::error!("{e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
