//! `bspo-lab`: runs the exact property suites, RL variants, evaluation and
//! reports from one scenario file.

mod artifacts;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bspo_core::rl_engine::Variant;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "bspo-lab", version, about = "Behavior-supported policy optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the operator and policy-iteration property suites.
    Prove(ProveArgs),
    /// Train one or all variants and write run logs, checkpoints and a manifest.
    Run(RunArgs),
    /// Win-rate matrix and Elo ratings of policy checkpoints under the gold reward.
    Eval(EvalArgs),
    /// Summarize run logs from a `run` output directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ProveArgs {
    /// Comma-separated substrings of suite names.
    #[arg(long)]
    filter: Option<String>,
    /// Adds a constant to supported operator entries (self-test of the suites).
    #[arg(long, hide = true)]
    inject_bias: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VariantChoice {
    All,
    One(Variant),
}

fn parse_variant(s: &str) -> Result<VariantChoice, String> {
    if s == "all" {
        return Ok(VariantChoice::All);
    }
    Variant::parse(s).map(VariantChoice::One).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant `{s}`; expected one of {} or all", names.join(", "))
    })
}

#[derive(Debug, Args)]
struct ScenarioArg {
    /// Scenario TOML file; the bundled standard scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long, value_parser = parse_variant)]
    variant: VariantChoice,
    /// Run this seed only instead of the scenario's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Checkpoint files or directories holding `*.policy.json` files.
    #[arg(long, num_args = 1.., value_delimiter = ',', required_unless_present = "responses")]
    checkpoints: Vec<PathBuf>,
    /// Recompute from responses cached by an earlier eval instead of sampling.
    #[arg(long, conflicts_with = "checkpoints")]
    responses: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory of a `run` command.
    #[arg(long)]
    runs: PathBuf,
    /// Directory for summary.csv; printed only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("BSPO_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("BSPO_LAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")))
}

/// The command line minus the output directory, so a manifest does not
/// depend on where its directory was written.
fn recorded_args(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            out.push(a);
        }
    }
    out
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let args = recorded_args(std::env::args().skip(1));
    match cli.command {
        Command::Prove(a) => commands::prove(a.filter.as_deref(), a.inject_bias),
        Command::Run(a) => commands::run(a.scenario.scenario.as_deref(), a.variant, a.seed, &a.out, &args),
        Command::Eval(a) => commands::eval(
            a.scenario.scenario.as_deref(),
            &a.checkpoints,
            a.responses.as_deref(),
            &a.out,
            &args,
        ),
        Command::Report(a) => commands::report(&a.runs, a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
