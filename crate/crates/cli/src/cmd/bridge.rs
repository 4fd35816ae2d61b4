//! `chartwit bridge`: the held-out fold protocol. Either recompute folds
//! from a table and a frozen atlas, or aggregate an existing fold file.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::{json, Value};

use chartwit_core::{
    aggregate_folds, run_folds, ActivationTable, ConditionAliasMap, DatasetManifest, Error,
    FoldConfig, FoldResult, Result, Site, Span, Surface,
};

use crate::args::{parse_span, parse_surface};
use crate::envelope::{read_atlas, read_json, unwrap_report, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct BridgeArgs {
    /// Fold-results JSON (bare array or a bridge report); aggregates these
    /// instead of recomputing folds.
    #[arg(long, conflicts_with_all = ["acts", "meta", "aliases", "atlas", "layer", "span"])]
    pub folds: Option<PathBuf>,
    #[arg(long, required_unless_present = "folds")]
    pub acts: Option<PathBuf>,
    #[arg(long, required_unless_present = "folds")]
    pub meta: Option<PathBuf>,
    #[arg(long, required_unless_present = "folds")]
    pub aliases: Option<PathBuf>,
    /// Frozen atlas JSON, or a freeze manifest (one-chart atlas).
    #[arg(long, required_unless_present = "folds")]
    pub atlas: Option<PathBuf>,
    /// Lane site the folds are scored in.
    #[arg(long, required_unless_present = "folds")]
    pub layer: Option<u32>,
    #[arg(long, value_parser = parse_span, required_unless_present = "folds")]
    pub span: Option<Span>,
    #[arg(long, value_parser = parse_surface, default_value = "delta")]
    pub surface: Surface,
    /// Fold groups that must appear even when absent from the data.
    #[arg(long, value_delimiter = ',')]
    pub expected_groups: Vec<String>,
}

fn read_folds(path: &PathBuf) -> Result<Vec<FoldResult>> {
    let v = unwrap_report(read_json(path)?);
    let folds = match v.get("folds") {
        Some(f @ Value::Array(_)) => f.clone(),
        _ => v,
    };
    serde_json::from_value(folds).map_err(|e| Error::json(path, e))
}

pub fn run(ctx: &Ctx, args: &BridgeArgs) -> Result<u8> {
    let (folds, input_paths) = match &args.folds {
        Some(path) => (read_folds(path)?, vec![path.clone()]),
        None => {
            let acts = args.acts.clone().expect("clap enforces --acts");
            let meta = args.meta.clone().expect("clap enforces --meta");
            let aliases_path = args.aliases.clone().expect("clap enforces --aliases");
            let atlas_path = args.atlas.clone().expect("clap enforces --atlas");
            let table = ActivationTable::read(&acts, &meta)?;
            let aliases = ConditionAliasMap::read(&aliases_path)?;
            let atlas = read_atlas(&atlas_path)?;
            let lane = Site::new(
                args.layer.expect("clap enforces --layer"),
                args.span.expect("clap enforces --span"),
                args.surface,
            );
            let fold_config = FoldConfig {
                policy: ctx.config.policy,
                chart: ctx.config.chart,
                seed: ctx.seed,
                expected_groups: args.expected_groups.clone(),
            };
            let folds = run_folds(&atlas, &table, lane, &aliases, &fold_config)?;
            (folds, vec![acts, meta, aliases_path, atlas_path])
        }
    };

    let summary = aggregate_folds(&folds, &ctx.config.bootstrap, ctx.seed)?;
    let inputs = DatasetManifest::freeze(&input_paths)?;
    let config = json!({
        "args": args,
        "bootstrap": ctx.config.bootstrap,
        "policy": ctx.config.policy,
        "chart": ctx.config.chart,
    });
    let result = json!({"folds": folds, "summary": summary});
    Envelope::new("bridge", ctx.seed, config, Some(inputs), result)?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
