//! `chartwit ingest`: load an activation table, check it, and report what
//! is inside.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::{resolve_conditions, ConditionAliasMap, DatasetManifest, Result, Site};

use crate::args::TableArgs;
use crate::envelope::{to_value, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub table: TableArgs,
    /// Alias map; when given, every condition tag must resolve through it.
    #[arg(long)]
    pub aliases: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: &IngestArgs) -> Result<u8> {
    let table = args.table.read()?;

    let mut sites: BTreeMap<Site, usize> = BTreeMap::new();
    let mut tags: BTreeMap<String, usize> = BTreeMap::new();
    for m in &table.meta {
        *sites.entry(m.site()).or_insert(0) += 1;
        *tags.entry(m.condition_tag.clone()).or_insert(0) += 1;
    }
    let conditions = match &args.aliases {
        Some(p) => {
            let aliases = ConditionAliasMap::read(p)?;
            Some(to_value(resolve_conditions(&table, &aliases)?.counts)?)
        }
        None => None,
    };

    let mut paths = args.table.paths();
    if let Some(p) = &args.aliases {
        paths.push(p.clone());
    }
    let inputs = DatasetManifest::freeze(&paths)?;

    let result = json!({
        "n_rows": table.n_rows(),
        "dim": table.dim(),
        "sites": sites
            .iter()
            .map(|(s, n)| {
                json!({
                    "layer": s.layer,
                    "span": s.span,
                    "surface": s.surface,
                    "n_rows": n,
                })
            })
            .collect::<Vec<_>>(),
        "condition_tags": tags,
        "conditions": conditions,
    });
    Envelope::new("ingest", ctx.seed, args, Some(inputs), result)?.emit(ctx.out.as_deref())?;
    Ok(0)
}
