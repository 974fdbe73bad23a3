//! Command-line frontend for the safetext toolkit.
//!
//! Every subcommand reads one JSON run configuration (defaults apply for
//! anything omitted), writes its artifacts under `--out`, and drops the
//! fully resolved configuration plus input-file hashes next to them, so an
//! output directory is always self-describing and reproducible.
//!
//! Exit codes: 0 success, 1 input/configuration errors (including bad
//! flags), 2 runtime/numerical errors.

mod commands;
mod config;

use clap::{ArgAction, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "safetext",
    version,
    about = "Desk-scale text-encoder safety alignment experiments"
)]
pub(crate) struct Cli {
    #[command(subcommand)]
    pub(crate) command: Cmd,
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub(crate) config: Option<PathBuf>,
    /// Directory this run's artifacts are written to.
    #[arg(long, global = true, value_name = "DIR")]
    pub(crate) out: Option<PathBuf>,
    /// Dotted-path config override, e.g. `--set align.lambda=0.4` or
    /// `--set lambda_grid=[0,0.2,0.8]`. Repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", action = ArgAction::Append)]
    pub(crate) set: Vec<String>,
    /// Global seed; every component's seed stream is derived from it.
    #[arg(long, global = true)]
    pub(crate) seed: Option<u64>,
    /// Worker threads for sweep cells (fallback: SAFETEXT_THREADS, then the
    /// config's `threads` field, then 1).
    #[arg(long, global = true)]
    pub(crate) threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub(crate) enum Cmd {
    /// Parse a raw JSONL corpus, filter by safety thresholds, sample splits.
    Ingest,
    /// Train the aligned encoder; writes both checkpoints and the history.
    Train,
    /// Probe-based evaluation of an aligned encoder against its original.
    Eval,
    /// Lambda or hyperparameter sweep over alignment runs.
    Sweep,
    /// Direction-only vs magnitude-only perturbation sensitivity table.
    Perturb,
    /// Concept-vector jailbreak attack against an aligned encoder.
    Attack,
    /// Train the linear safety probe and report held-out accuracy.
    Probe,
    /// Summarize artifacts already present in the output directory.
    Report,
}

impl Cmd {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Cmd::Ingest => "ingest",
            Cmd::Train => "train",
            Cmd::Eval => "eval",
            Cmd::Sweep => "sweep",
            Cmd::Perturb => "perturb",
            Cmd::Attack => "attack",
            Cmd::Probe => "probe",
            Cmd::Report => "report",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; only genuine usage errors
            // should exit non-zero.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
