use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fluid_qbdrap::cli;
use fluid_qbdrap::config::RunConfig;

#[derive(Parser)]
#[command(name = "fluid-qbdrap", version, about = "QBD-RAP approximation of bounded fluid queues")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    config: PathBuf,
    /// Override a config leaf, e.g. `--set scheme.K=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the distribution, the model and the starting point.
    Validate(Common),
    /// Assemble the generator and dump its structure.
    Build(Common),
    /// Transient distribution at the configured times.
    Transient(Common),
    /// Stationary distribution.
    Stationary(Common),
    /// Run the verification suites.
    Verify(Common),
    /// Compare against simulated paths.
    Compare(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let (common, cmd): (&Common, fn(&RunConfig) -> i32) = match &args.command {
        Command::Validate(c) => (c, cli::cmd_validate),
        Command::Build(c) => (c, cli::cmd_build),
        Command::Transient(c) => (c, cli::cmd_transient),
        Command::Stationary(c) => (c, cli::cmd_stationary),
        Command::Verify(c) => (c, cli::cmd_verify),
        Command::Compare(c) => (c, cli::cmd_compare),
    };
    let code = match RunConfig::load(&common.config, &common.overrides) {
        Ok(cfg) => cmd(&cfg),
        Err(e) => {
            eprintln!("error: {}", cli::describe(&e));
            cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
