//! `chartwit`: command-line front end for the chartwit-core toolkit.
//!
//! Two ways in:
//!
//! - `chartwit --config run.json` runs the whole staged pipeline (ingest,
//!   tangent, search, freeze, replay, controls, bridge, reentry) and writes
//!   one report per stage plus a closing summary into the run directory.
//! - Each stage also exists as a subcommand over explicit files, so a run
//!   can be driven, inspected, or re-checked piecewise.
//!
//! Exit codes: 0 success; 2 validation failure or bad arguments; 3 refusal
//! (`hash_mismatch`, `denominator_mismatch`, or `freeze_violation`, printed
//! as `refusal: <code>` on stderr); 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chartwit_core::{Error, Result};

mod args;
mod cmd;
mod config;
mod envelope;
mod pipeline;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "chartwit", version, about = "tangent-chart witness toolkit")]
struct Cli {
    /// Run configuration (JSON). Without a subcommand this runs the full
    /// pipeline; with one it supplies tuning defaults (policy, chart rank,
    /// resampling sizes, seed).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (report file, or the run directory for a pipeline).
    /// Subcommands print their report to stdout when this is absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for resampling loops; 0 keeps the library default.
    /// Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Describe an activation table: sites, conditions, digests.
    Ingest(cmd::ingest::IngestArgs),
    /// Pair on/off rows by id and write their difference table.
    Contrast(cmd::contrast::ContrastArgs),
    /// Fit tangent charts at one site or at every site in a table.
    Tangent(cmd::tangent::TangentArgs),
    /// Gate a candidate chart against a frozen one (q and nu).
    Witness(cmd::witness::WitnessArgs),
    /// Coupling statistics between positive and negative scores.
    Couple(cmd::couple::CoupleArgs),
    /// Run a matched control battery against a frozen selection.
    Controls(cmd::controls::ControlsArgs),
    /// Enumerate a band and rank candidate sites by witness support.
    Search(cmd::search::SearchArgs),
    /// Pin a selected candidate into a replayable manifest.
    Freeze(cmd::freeze::FreezeArgs),
    /// Re-run a frozen analysis; refuses on any drift from the manifest.
    Replay(cmd::replay::ReplayArgs),
    /// Held-out fold protocol on a frozen atlas lane.
    Bridge(cmd::bridge::BridgeArgs),
    /// Per-row re-entry diagnostics against a frozen atlas.
    Reentry(cmd::reentry::ReentryArgs),
    /// Generate a synthetic dataset with a known expected outcome.
    Synth(cmd::synth::SynthArgs),
    /// Check files offline: formats, denominators, alias coverage.
    Validate(cmd::validate::ValidateArgs),
    /// Re-check and print a finished run's summary.
    Report(cmd::report::ReportArgs),
}

/// Shared command context: resolved config, effective seed, output path.
pub struct Ctx {
    pub config: RunConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<u8> {
    if cli.threads > 0 {
        // Only the worker count changes; fold and resampling results are
        // combined in index order, so outputs stay identical.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }

    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(config.seed);
    config.seed = seed;
    let ctx = Ctx {
        config,
        seed,
        out: cli.out,
    };

    match &cli.command {
        None => {
            if cli.config.is_none() {
                return Err(Error::InvalidArgument(
                    "nothing to do: pass --config for a pipeline run or name a subcommand \
                     (see --help)"
                        .into(),
                ));
            }
            pipeline::run(&ctx)
        }
        Some(Command::Ingest(a)) => cmd::ingest::run(&ctx, a),
        Some(Command::Contrast(a)) => cmd::contrast::run(&ctx, a),
        Some(Command::Tangent(a)) => cmd::tangent::run(&ctx, a),
        Some(Command::Witness(a)) => cmd::witness::run(&ctx, a),
        Some(Command::Couple(a)) => cmd::couple::run(&ctx, a),
        Some(Command::Controls(a)) => cmd::controls::run(&ctx, a),
        Some(Command::Search(a)) => cmd::search::run(&ctx, a),
        Some(Command::Freeze(a)) => cmd::freeze::run(&ctx, a),
        Some(Command::Replay(a)) => cmd::replay::run(&ctx, a),
        Some(Command::Bridge(a)) => cmd::bridge::run(&ctx, a),
        Some(Command::Reentry(a)) => cmd::reentry::run(&ctx, a),
        Some(Command::Synth(a)) => cmd::synth::run(&ctx, a),
        Some(Command::Validate(a)) => cmd::validate::run(&ctx, a),
        Some(Command::Report(a)) => cmd::report::run(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if let Some(code) = e.refusal_code() {
                eprintln!("refusal: {code}");
                eprintln!("{e}");
                ExitCode::from(3)
            } else {
                eprintln!("error: {e}");
                ExitCode::from(if e.is_io() { 4 } else { 2 })
            }
        }
    }
}
