//! `chartwit contrast`: build a matched on/off delta table.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::{build_contrast, ActivationTable, DatasetManifest, Result};

use crate::envelope::Envelope;
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct ContrastArgs {
    /// Activation table holding the condition-on rows.
    #[arg(long)]
    pub on_acts: PathBuf,
    #[arg(long)]
    pub on_meta: PathBuf,
    /// Activation table holding the matched condition-off rows.
    #[arg(long)]
    pub off_acts: PathBuf,
    #[arg(long)]
    pub off_meta: PathBuf,
    /// Output paths for the delta table.
    #[arg(long)]
    pub delta_acts: PathBuf,
    #[arg(long)]
    pub delta_meta: PathBuf,
}

pub fn run(ctx: &Ctx, args: &ContrastArgs) -> Result<u8> {
    let on = ActivationTable::read(&args.on_acts, &args.on_meta)?;
    let off = ActivationTable::read(&args.off_acts, &args.off_meta)?;
    let delta = build_contrast(&on, &off)?;
    delta.write(&args.delta_acts, &args.delta_meta)?;

    let inputs = DatasetManifest::freeze(&[
        args.on_acts.clone(),
        args.on_meta.clone(),
        args.off_acts.clone(),
        args.off_meta.clone(),
    ])?;
    let written =
        DatasetManifest::freeze(&[args.delta_acts.clone(), args.delta_meta.clone()])?;

    let result = json!({
        "n_pairs": delta.n_rows(),
        "dim": delta.dim(),
        "written": written,
    });
    Envelope::new("contrast", ctx.seed, args, Some(inputs), result)?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
