//! `chartwit freeze`: pin a selected candidate — inputs, denominators,
//! thresholds, and seeds — into a manifest that replay will hold it to.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::{json, Value};

use chartwit_core::dataset::read_metadata;
use chartwit_core::freeze::match_source_chart;
use chartwit_core::{
    condition_groups, freeze, ActivationTable, CandidateScore, ConditionAliasMap,
    DatasetManifest, Error, FreezeInputs, Result, Site,
};

use crate::envelope::{read_charts, read_json, unwrap_report, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct FreezeArgs {
    /// Search report whose selected candidate and band get frozen.
    #[arg(long)]
    pub search: PathBuf,
    /// Source-family charts the candidate was witnessed against.
    #[arg(long)]
    pub family: PathBuf,
    /// Discovery metadata (JSONL); every row id in it is locked out of
    /// replay.
    #[arg(long)]
    pub discovery_meta: PathBuf,
    /// Confirmatory table pinned (content-hashed) into the manifest.
    #[arg(long)]
    pub confirmatory_acts: PathBuf,
    #[arg(long)]
    pub confirmatory_meta: PathBuf,
    #[arg(long)]
    pub aliases: PathBuf,
    /// Declared denominators; default: realised counts at the frozen site.
    #[arg(long)]
    pub declared_pos: Option<usize>,
    #[arg(long)]
    pub declared_neg: Option<usize>,
    /// Directory relative pinned paths resolve against. Keeping pinned paths
    /// relative keeps the manifest valid when the directory moves.
    #[arg(long, default_value = ".")]
    pub base_dir: PathBuf,
}

/// Takes the band and selected candidate out of a search report. A bare
/// candidate object is accepted too; its own site then forms the band.
fn read_search(path: &Path) -> Result<(Vec<Site>, CandidateScore)> {
    let v = unwrap_report(read_json(path)?);
    let selected_value = if let Some(sel) = v.get("selected") {
        sel.clone()
    } else {
        v.clone()
    };
    let selected: CandidateScore =
        serde_json::from_value(selected_value).map_err(|e| Error::json(path, e))?;
    let band: Vec<Site> = match v.get("band") {
        Some(b @ Value::Array(_)) => {
            serde_json::from_value(b.clone()).map_err(|e| Error::json(path, e))?
        }
        _ => vec![selected.site],
    };
    Ok((band, selected))
}

fn against_base(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

pub fn run(ctx: &Ctx, args: &FreezeArgs) -> Result<u8> {
    let out = ctx.out.clone().ok_or_else(|| {
        Error::InvalidArgument("freeze needs --out <manifest.json> to store the manifest".into())
    })?;

    let (band, selected) = read_search(&args.search)?;
    let family = read_charts(&args.family)?;
    let (source_chart_index, _) = match_source_chart(&family, selected.site)?;

    let discovery_row_ids: Vec<String> = read_metadata(&args.discovery_meta)?
        .into_iter()
        .map(|m| m.row_id)
        .collect();

    let conf_acts = against_base(&args.base_dir, &args.confirmatory_acts);
    let conf_meta = against_base(&args.base_dir, &args.confirmatory_meta);
    let confirmatory = ActivationTable::read(&conf_acts, &conf_meta)?;
    let confirmatory_row_ids: Vec<String> =
        confirmatory.meta.iter().map(|m| m.row_id.clone()).collect();

    let aliases = ConditionAliasMap::read(&args.aliases)?;
    let (declared_pos, declared_neg) = match (args.declared_pos, args.declared_neg) {
        (Some(p), Some(n)) => (p, n),
        _ => {
            let rows = confirmatory.rows_at_site(selected.site);
            if rows.is_empty() {
                return Err(Error::NoRowsAtSite {
                    site: selected.site.to_string(),
                });
            }
            let groups = condition_groups(&confirmatory.subset(&rows), &aliases)?;
            (
                args.declared_pos.unwrap_or(groups.n_pos()),
                args.declared_neg.unwrap_or(groups.n_neg()),
            )
        }
    };

    let manifest = freeze(FreezeInputs {
        band,
        selected,
        source_family: family,
        source_chart_index,
        discovery_row_ids,
        confirmatory_row_ids,
        declared_pos,
        declared_neg,
        aliases,
        policy: ctx.config.policy,
        chart_config: ctx.config.chart,
        coupling: ctx.config.coupling,
        witness_chart_mode: ctx.config.witness_chart_mode,
        seed: ctx.seed,
        base_dir: args.base_dir.clone(),
        confirmatory_activations: args.confirmatory_acts.clone(),
        confirmatory_metadata: args.confirmatory_meta.clone(),
        extra_files: vec![args.aliases.clone()],
    })?;
    manifest.write(&out)?;

    let inputs = DatasetManifest::freeze(&[
        args.search.clone(),
        args.family.clone(),
        args.discovery_meta.clone(),
        conf_acts,
        conf_meta,
        args.aliases.clone(),
    ])?;
    let config = json!({
        "args": args,
        "policy": ctx.config.policy,
        "chart": ctx.config.chart,
        "coupling": ctx.config.coupling,
        "witness_chart_mode": ctx.config.witness_chart_mode,
    });
    let result = json!({
        "manifest": out,
        "source_family_hash": manifest.source_family_hash,
        "site": manifest.selected.site,
        "declared_pos": manifest.declared_pos,
        "declared_neg": manifest.declared_neg,
        "n_discovery_ids": manifest.discovery_row_ids.len(),
        "pinned_files": manifest.dataset_manifest,
    });
    // The manifest itself went to --out; the summary goes to stdout.
    Envelope::new("freeze", ctx.seed, config, Some(inputs), result)?.emit(None)?;
    Ok(0)
}
