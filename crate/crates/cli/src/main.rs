use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fbsde_tool::config::{parse_config_with, Overrides, DEFAULTS_HELP};
use fbsde_tool::run::{run, Outcome};

/// Decoupling-field Picard solver for drift-less FBSDEs.
///
/// Exit status: 0 when every check passes, 1 when a check fails (or warns
/// under --strict), 2 for configuration errors, 3 for solver or I/O errors.
#[derive(Debug, Parser)]
#[command(name = "fbsde", version, after_help = DEFAULTS_HELP)]
struct Args {
    /// solve | verify | bench | audit (overrides `command` in the config)
    command: Option<String>,
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Catalogue problem name (overrides `problem`)
    #[arg(long)]
    problem: Option<String>,
    /// Monte Carlo seed (overrides `mc.seed`, default 42)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write paths.csv
    #[arg(long)]
    emit_paths: bool,
    /// Write a field snapshot after every iteration
    #[arg(long)]
    emit_fields: bool,
    /// Treat warnings as failing checks
    #[arg(long)]
    strict: bool,
}

/// A run that never reached the summary stage.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn execute(args: Args) -> Result<Outcome, Failure> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Failure {
            code: 2,
            message: format!("cannot read {}: {e}", path.display()),
        })?,
        None => String::new(),
    };
    let over = Overrides {
        command: args.command,
        problem: args.problem,
        seed: args.seed,
        output_dir: args.out,
        emit_paths: args.emit_paths,
        emit_fields: args.emit_fields,
        strict: args.strict,
    };
    let cfg = parse_config_with(&text, &over).map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })?;
    run(&cfg).map_err(|e| Failure {
        code: 3,
        message: e.to_string(),
    })
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("artifacts: {}", outcome.output_dir.display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
