//! `dsde-lab`: JSON configs in, CSV tables and JSON reports out.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use commands::{Failure, Run};
use config::RunConfig;
use output::{write_json, OutDir};

const EXIT_VALIDATION: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "dsde-lab", version, about = "Solvers and checks for doubly stochastic forward-backward equations with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the monotonicity, boundary and Lipschitz inequalities.
    Check(RunArgs),
    /// Regression solve of a decoupled backward equation.
    SolveBdsdep(RunArgs),
    /// Continuation solve of a coupled system.
    SolveFbdsdep(RunArgs),
    /// Evaluate u(t, x) by Monte Carlo and compare with finite differences.
    FeynmanKac(RunArgs),
    /// Distance of perturbed solutions from the baseline.
    Continuity(RunArgs),
    /// Quadratic Hamiltonian system against its deterministic reduction.
    Hamiltonian(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Self::Check(a)
            | Self::SolveBdsdep(a)
            | Self::SolveFbdsdep(a)
            | Self::FeynmanKac(a)
            | Self::Continuity(a)
            | Self::Hamiltonian(a) => a,
        }
    }
}

fn report_error(report: &Value) {
    eprintln!("{}", serde_json::to_string(report).unwrap_or_default());
}

/// Problems found before the output directory is known go to stderr only.
fn early_failure(kind: &str, message: String, position: Option<(usize, usize)>) -> ExitCode {
    let mut report = json!({ "status": "error", "kind": kind, "message": message, "exit_code": EXIT_VALIDATION });
    if let Some((line, column)) = position {
        report["line"] = json!(line);
        report["column"] = json!(column);
    }
    report_error(&report);
    ExitCode::from(EXIT_VALIDATION)
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("DSDE_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DSDE_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load_config(path: &Path) -> Result<RunConfig, ExitCode> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| early_failure("config", format!("cannot read {}: {e}", path.display()), None))?;
    RunConfig::parse(&text).map_err(|e| early_failure("config", e.to_string(), Some((e.line(), e.column()))))
}

fn execute(command: &Command, run: &Run<'_>) -> commands::Outcome {
    match command {
        Command::Check(_) => run.check(),
        Command::SolveBdsdep(_) => run.solve_bdsdep(),
        Command::SolveFbdsdep(_) => run.solve_fbdsdep(),
        Command::FeynmanKac(_) => run.feynman_kac(),
        Command::Continuity(_) => run.continuity(),
        Command::Hamiltonian(_) => run.hamiltonian(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(message) = configure_threads() {
        return early_failure("environment", message, None);
    }
    let args = cli.command.args();
    let cfg = match load_config(&args.config) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    let out = match OutDir::create(cfg.output_dir(args.out.as_deref())) {
        Ok(out) => out,
        Err(e) => return early_failure("io", format!("cannot create output directory: {e}"), None),
    };
    let run = Run {
        cfg: &cfg,
        seed: args.seed.unwrap_or(cfg.seed),
        seed_override: args.seed,
        out: &out,
    };
    let outcome = cfg.validate().map_err(Failure::Validation).and_then(|()| execute(&cli.command, &run));
    match outcome {
        Ok(summary) => match write_json(&out.file("summary.json"), &summary) {
            Ok(()) => {
                println!("{}", serde_json::to_string(&summary).unwrap_or_default());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&out, Failure::Io(e)),
        },
        Err(failure) => fail(&out, failure),
    }
}

fn fail(out: &OutDir, failure: Failure) -> ExitCode {
    let report = failure.report();
    if let Err(e) = write_json(&out.file("error.json"), &report) {
        eprintln!("could not write error report: {e}");
    }
    report_error(&report);
    ExitCode::from(failure.exit_code())
}
