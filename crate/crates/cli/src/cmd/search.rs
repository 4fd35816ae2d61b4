//! `chartwit search`: enumerate a candidate band on the discovery table and
//! rank sites by witness support against the source family.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::{
    enumerate_band, rank_candidates, score_candidates, ConditionAliasMap, DatasetManifest,
    Result, SearchConfig, Span, Surface,
};

use crate::args::{parse_span, parse_surface, TableArgs};
use crate::envelope::{read_charts, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    /// Discovery table the band is scored on.
    #[command(flatten)]
    #[serde(flatten)]
    pub table: TableArgs,
    #[arg(long)]
    pub aliases: PathBuf,
    /// Source-family charts (tangent report or bare chart array).
    #[arg(long)]
    pub family: PathBuf,
    /// Band layers, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<u32>,
    /// Band spans, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_span, required = true)]
    pub spans: Vec<Span>,
    #[arg(long, value_parser = parse_surface, default_value = "delta")]
    pub surface: Surface,
}

pub fn run(ctx: &Ctx, args: &SearchArgs) -> Result<u8> {
    let table = args.table.read()?;
    let aliases = ConditionAliasMap::read(&args.aliases)?;
    let family = read_charts(&args.family)?;
    let band = enumerate_band(&args.layers, &args.spans, args.surface)?;

    let search_config = SearchConfig {
        chart: ctx.config.chart,
        policy: ctx.config.policy,
        seed: ctx.seed,
    };
    let mut candidates = score_candidates(&band, &table, &aliases, &family, &search_config)?;
    rank_candidates(&mut candidates);

    let mut paths = args.table.paths();
    paths.push(args.aliases.clone());
    paths.push(args.family.clone());
    let inputs = DatasetManifest::freeze(&paths)?;

    let config = json!({"args": args, "chart": ctx.config.chart, "policy": ctx.config.policy});
    let result = json!({
        "band": band,
        "selected": candidates[0],
        "candidates": candidates,
    });
    Envelope::new("search", ctx.seed, config, Some(inputs), result)?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
