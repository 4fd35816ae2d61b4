//! `chartwit controls`: run a matched control battery against a frozen
//! selection and gate the observed coupling against it.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::{
    axis_scores, condition_groups, control_percentile, couple, coupling_positive,
    run_control_battery, BatteryContext, ConditionAliasMap, ControlKind, ControlOutcome,
    ControlSpec, DatasetManifest, Error, Result, Site, TangentChart,
};

use crate::args::TableArgs;
use crate::envelope::{read_candidate, read_charts, read_json, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct ControlsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub table: TableArgs,
    #[arg(long)]
    pub aliases: PathBuf,
    /// Search report, freeze manifest, or bare candidate (chart plus axis).
    #[arg(long)]
    pub candidate: PathBuf,
    /// Battery spec JSON (array of {kind, seed, site?}); default: null-label
    /// shuffles plus one random-subspace and one orthogonal-complement run.
    #[arg(long)]
    pub battery: Option<PathBuf>,
    /// Null-label controls in the default battery.
    #[arg(long, default_value_t = 20)]
    pub n_null: usize,
    /// Charts available to nearby-same-span controls (tangent report).
    #[arg(long)]
    pub nearby: Option<PathBuf>,
}

/// The standard battery: `n_null` label shuffles, one random subspace, one
/// orthogonal complement, and one nearby control per chart that shares the
/// frozen span at a different layer. Seeds are offset so no two controls
/// share a stream.
pub fn default_battery(
    seed: u64,
    n_null: usize,
    nearby: &[TangentChart],
    frozen: Site,
) -> Vec<ControlSpec> {
    let mut specs = Vec::with_capacity(n_null + 2 + nearby.len());
    for i in 0..n_null {
        specs.push(ControlSpec {
            kind: ControlKind::NullLabels,
            seed: seed + 1 + i as u64,
            site: None,
        });
    }
    specs.push(ControlSpec {
        kind: ControlKind::RandomSubspace,
        seed: seed + 1001,
        site: None,
    });
    specs.push(ControlSpec {
        kind: ControlKind::OrthogonalComplement,
        seed: seed + 1002,
        site: None,
    });
    for (j, c) in nearby.iter().enumerate() {
        if c.site.layer != frozen.layer && c.site.span == frozen.span {
            specs.push(ControlSpec {
                kind: ControlKind::NearbySameSpan,
                seed: seed + 2001 + j as u64,
                site: Some((c.site.layer, c.site.span)),
            });
        }
    }
    specs
}

fn spec_label(spec: &ControlSpec) -> String {
    let kind = serde_json::to_value(spec.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{:?}", spec.kind));
    format!("{kind}[{}]", spec.seed)
}

/// Human-readable ranking, strongest coupling first, on stderr so stdout
/// stays parseable.
fn print_ranking(observed_auc: f64, outcomes: &[ControlOutcome]) {
    let mut rows: Vec<(String, f64)> = outcomes
        .iter()
        .map(|o| (spec_label(&o.spec), o.report.auc))
        .collect();
    rows.push(("frozen_axis".into(), observed_auc));
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("AUCs are finite"));
    eprintln!("{:<36} {:>8}", "control", "auc");
    for (name, auc) in rows {
        eprintln!("{name:<36} {auc:>8.3}");
    }
}

pub fn run(ctx: &Ctx, args: &ControlsArgs) -> Result<u8> {
    let table = args.table.read()?;
    let aliases = ConditionAliasMap::read(&args.aliases)?;
    let cand = read_candidate(&args.candidate)?;

    let rows = table.rows_at_site(cand.site);
    if rows.is_empty() {
        return Err(Error::NoRowsAtSite {
            site: cand.site.to_string(),
        });
    }
    let site_table = table.subset(&rows);
    let groups = condition_groups(&site_table, &aliases)?;
    let nearby = match &args.nearby {
        Some(p) => read_charts(p)?,
        None => Vec::new(),
    };
    let specs: Vec<ControlSpec> = match &args.battery {
        Some(p) => read_json(p)?,
        None => default_battery(ctx.seed, args.n_null, &nearby, cand.site),
    };

    let bctx = BatteryContext {
        axis: &cand.axis,
        groups: &groups,
        nearby_charts: &nearby,
        coupling: ctx.config.coupling,
    };
    let outcomes = run_control_battery(&cand.chart, &site_table, &specs, &bctx)?;

    let scores = axis_scores(&site_table.data, &cand.chart.centroid, &cand.axis)?;
    let pos: Vec<f64> = groups.pos_indices.iter().map(|&i| scores[i]).collect();
    let neg: Vec<f64> = groups.neg_indices.iter().map(|&i| scores[i]).collect();
    let observed = couple(&pos, &neg, ctx.seed, &ctx.config.coupling)?;

    let control_aucs: Vec<f64> = outcomes.iter().map(|o| o.report.auc).collect();
    let gate = coupling_positive(&observed, &control_aucs, &ctx.config.policy);
    let percentile = control_percentile(observed.auc, &control_aucs)?;
    print_ranking(observed.auc, &outcomes);

    let mut paths = args.table.paths();
    paths.push(args.aliases.clone());
    paths.push(args.candidate.clone());
    if let Some(p) = &args.battery {
        paths.push(p.clone());
    }
    if let Some(p) = &args.nearby {
        paths.push(p.clone());
    }
    let inputs = DatasetManifest::freeze(&paths)?;

    let config = json!({
        "args": args,
        "coupling": ctx.config.coupling,
        "policy": ctx.config.policy,
    });
    let result = json!({
        "observed": observed,
        "outcomes": outcomes,
        "control_aucs": control_aucs,
        "percentile": percentile,
        "gate": gate,
    });
    Envelope::new("controls", ctx.seed, config, Some(inputs), result)?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
