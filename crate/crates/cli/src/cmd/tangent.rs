//! `chartwit tangent`: fit tangent charts at one site or at every site
//! present in a table.

use std::collections::BTreeSet;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::{
    estimate_tangent, DatasetManifest, Error, Result, Site, Span, Surface,
};

use crate::args::{parse_span, parse_surface, TableArgs};
use crate::envelope::Envelope;
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct TangentArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub table: TableArgs,
    /// Layer of the site to fit.
    #[arg(long, required_unless_present = "all_sites", conflicts_with = "all_sites")]
    pub layer: Option<u32>,
    /// Span of the site (reason, late_reason, answer).
    #[arg(
        long,
        value_parser = parse_span,
        required_unless_present = "all_sites",
        conflicts_with = "all_sites"
    )]
    pub span: Option<Span>,
    /// Surface of the site.
    #[arg(long, value_parser = parse_surface, default_value = "delta")]
    pub surface: Surface,
    /// Fit one chart per distinct site present in the table.
    #[arg(long)]
    pub all_sites: bool,
}

pub fn run(ctx: &Ctx, args: &TangentArgs) -> Result<u8> {
    let table = args.table.read()?;
    let sites: Vec<Site> = if args.all_sites {
        table
            .meta
            .iter()
            .map(|m| m.site())
            .collect::<BTreeSet<Site>>()
            .into_iter()
            .collect()
    } else {
        vec![Site::new(
            args.layer.expect("clap enforces --layer"),
            args.span.expect("clap enforces --span"),
            args.surface,
        )]
    };

    let mut charts = Vec::with_capacity(sites.len());
    for site in sites {
        let rows = table.rows_at_site(site);
        if rows.is_empty() {
            return Err(Error::NoRowsAtSite {
                site: site.to_string(),
            });
        }
        charts.push(estimate_tangent(
            &table.subset(&rows).data,
            site,
            &ctx.config.chart,
        )?);
    }

    let inputs = DatasetManifest::freeze(&args.table.paths())?;
    let config = json!({"args": args, "chart": ctx.config.chart});
    Envelope::new("tangent", ctx.seed, config, Some(inputs), json!({"charts": charts}))?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
