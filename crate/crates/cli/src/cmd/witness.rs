//! `chartwit witness`: gate a candidate chart against a frozen reference.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::stats::{substream_rng, STREAM_SURROGATE};
use chartwit_core::{
    estimate_tangent, gate_witness, witness_nu_against_chart, witness_nu_between, witness_q,
    ActivationTable, DatasetManifest, Error, Result,
};

use crate::args::TableArgs;
use crate::envelope::{read_chart, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct WitnessArgs {
    /// Frozen reference chart (tangent report or bare chart JSON).
    #[arg(long)]
    pub frozen: PathBuf,
    /// Candidate chart; omitted, one is refitted on the candidate table.
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    /// Candidate points the q metrics are computed on.
    #[command(flatten)]
    #[serde(flatten)]
    pub table: TableArgs,
    /// Source points for two-sample occupancy metrics; omitted, the frozen
    /// chart's Gaussian surrogate is the reference (the replay case).
    #[arg(long, requires = "source_meta")]
    pub source_acts: Option<PathBuf>,
    #[arg(long, requires = "source_acts")]
    pub source_meta: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: &WitnessArgs) -> Result<u8> {
    let frozen = read_chart(&args.frozen)?;
    let table = args.table.read()?;
    let candidate = match &args.candidate {
        Some(p) => read_chart(p)?,
        None => {
            let site = table.meta.first().map(|m| m.site()).ok_or(Error::EmptyInput {
                what: "candidate rows".into(),
            })?;
            estimate_tangent(&table.data, site, &ctx.config.chart)?
        }
    };

    let q = witness_q(&frozen, &candidate, &table.data)?;
    let nu = match (&args.source_acts, &args.source_meta) {
        (Some(a), Some(m)) => {
            let source = ActivationTable::read(a, m)?;
            witness_nu_between(&frozen, &source.data, &table.data)?
        }
        _ => {
            let mut rng = substream_rng(ctx.seed, STREAM_SURROGATE);
            witness_nu_against_chart(&frozen, &table.data, &mut rng)?
        }
    };
    let report = gate_witness(q, nu, &ctx.config.policy);

    let mut paths = vec![args.frozen.clone()];
    paths.extend(args.table.paths());
    if let Some(p) = &args.candidate {
        paths.push(p.clone());
    }
    if let (Some(a), Some(m)) = (&args.source_acts, &args.source_meta) {
        paths.push(a.clone());
        paths.push(m.clone());
    }
    let inputs = DatasetManifest::freeze(&paths)?;

    let config = json!({"args": args, "policy": ctx.config.policy, "chart": ctx.config.chart});
    Envelope::new("witness", ctx.seed, config, Some(inputs), report)?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
