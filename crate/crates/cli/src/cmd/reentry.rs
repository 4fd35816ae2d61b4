//! `chartwit reentry`: re-entry diagnostics of rows against a frozen atlas —
//! who comes back inside the frozen geometry, and who is rejected for what.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::bridge::normalized_centroid_distance;
use chartwit_core::{
    assign_rows, realization_counts, reentry_check, reentry_results, strict_replay_closure,
    DatasetManifest, Error, RealizationCounts, ReentryResult, RejectReason, Result,
};

use crate::args::TableArgs;
use crate::envelope::{read_atlas, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct ReentryArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub table: TableArgs,
    /// Frozen atlas JSON, or a freeze manifest (its selected chart becomes
    /// a one-chart atlas).
    #[arg(long)]
    pub atlas: PathBuf,
    /// Check every row against this chart; default: nearest-centroid
    /// assignment picks each row's chart.
    #[arg(long)]
    pub chart_index: Option<usize>,
}

pub fn run(ctx: &Ctx, args: &ReentryArgs) -> Result<u8> {
    let table = args.table.read()?;
    let atlas = read_atlas(&args.atlas)?;

    let (results, realization): (Vec<ReentryResult>, Option<RealizationCounts>) =
        match args.chart_index {
            Some(i) => {
                let chart = atlas.charts.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "chart index {i} out of range ({} charts)",
                        atlas.charts.len()
                    ))
                })?;
                (
                    reentry_results(&table, chart, &atlas)?,
                    Some(realization_counts(&table, chart, &atlas)?),
                )
            }
            None => {
                let assignment = assign_rows(&atlas, &table)?;
                let results = (0..table.n_rows())
                    .map(|r| {
                        let x = table.data.row(r).transpose();
                        // Unassigned rows are checked against their nearest
                        // chart so the rejection reason is still recorded.
                        let chart = match assignment[r] {
                            Some(ci) => &atlas.charts[ci],
                            None => atlas
                                .charts
                                .iter()
                                .min_by(|a, b| {
                                    normalized_centroid_distance(a, &x)
                                        .partial_cmp(&normalized_centroid_distance(b, &x))
                                        .expect("distances are finite")
                                })
                                .expect("atlas has at least one chart"),
                        };
                        reentry_check(&table.meta[r].row_id, &x, chart, &atlas)
                    })
                    .collect();
                (results, None)
            }
        };

    let n_accepted = results.iter().filter(|r| r.accepted).count();
    let n_rejected_centroid = results
        .iter()
        .filter(|r| r.reject_reason == Some(RejectReason::CentroidDistance))
        .count();
    let n_rejected_angle = results
        .iter()
        .filter(|r| r.reject_reason == Some(RejectReason::BasisAngle))
        .count();
    let strict_closure = strict_replay_closure(&atlas, &table)?;

    let mut paths = args.table.paths();
    paths.push(args.atlas.clone());
    let inputs = DatasetManifest::freeze(&paths)?;
    let result = json!({
        "n_rows": results.len(),
        "n_accepted": n_accepted,
        "n_rejected_centroid": n_rejected_centroid,
        "n_rejected_angle": n_rejected_angle,
        "strict_closure": strict_closure,
        "realization": realization,
        "results": results,
    });
    Envelope::new("reentry", ctx.seed, args, Some(inputs), result)?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
