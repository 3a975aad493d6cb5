//! `stk`: plant, label, build-bench, locate, edit, eval and sweep.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format, 3 internal invariant.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use steerkit::Error;

use config::{need, RunConfig};
use manifest::Recorder;

#[derive(Debug, Parser)]
#[command(
    name = "stk",
    version,
    about = "Locate and steer paraphrase-consistency components"
)]
struct Cli {
    /// Worker threads for probing and evaluation; never changes outputs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommandArgs {
    /// JSON file with settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted checkpoint, optionally with synthetic pairs and a benchmark.
    Plant(CommandArgs),
    /// Label pairs by comparing greedy answers.
    Label(CommandArgs),
    /// Enumerate, label and balance training pairs; select test prompts.
    BuildBench(CommandArgs),
    /// Probe every component and rank by locate accuracy.
    Locate(CommandArgs),
    /// Build an edit plan from a probe report.
    Edit(CommandArgs),
    /// Evaluate template accuracy or answer similarity.
    Eval(CommandArgs),
    /// Sweep k, alpha, or run the ablations.
    Sweep(CommandArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) => match e.root() {
                Error::Range(_) => 1,
                Error::Construction(_) | Error::Shape(_) => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let (name, args) = match &cli.command {
        Command::Plant(a) => ("plant", a),
        Command::Label(a) => ("label", a),
        Command::BuildBench(a) => ("build-bench", a),
        Command::Locate(a) => ("locate", a),
        Command::Edit(a) => ("edit", a),
        Command::Eval(a) => ("eval", a),
        Command::Sweep(a) => ("sweep", a),
    };
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?.overlay(&args.run),
        None => args.run.clone(),
    };
    let seed = cfg.resolve_seed()?;
    let out = need(&cfg.out, "out")?.clone();
    let mut rec = Recorder::default();
    let work = |rec: &mut Recorder| match &cli.command {
        Command::Plant(_) => commands::plant(&cfg, seed, rec),
        Command::Label(_) => commands::label(&cfg, rec),
        Command::BuildBench(_) => commands::build_bench(&cfg, seed, rec),
        Command::Locate(_) => commands::locate(&cfg, seed, rec),
        Command::Edit(_) => commands::edit(&cfg, seed, rec),
        Command::Eval(_) => commands::eval(&cfg, rec),
        Command::Sweep(_) => commands::sweep(&cfg, seed, rec),
    };
    match cli.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(jobs) => steerkit::par::with_jobs(jobs, || work(&mut rec))?,
        None => work(&mut rec)?,
    }
    rec.finish(name, seed, &cfg, &out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(manifest) => {
            eprintln!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("stk: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
