//! `chartwit replay`: run a frozen selection on its confirmatory inputs.
//!
//! Refusals (exit 3): `hash_mismatch` when a pinned file changed,
//! `freeze_violation` when a confirmatory row id appeared in discovery,
//! `denominator_mismatch` when the realised group sizes differ from the
//! declared counts.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::{replay, DatasetManifest, FreezeManifest, Result};

use crate::envelope::{read_json, Envelope};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    /// Freeze manifest to replay.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory the manifest's relative paths resolve against
    /// (default: the manifest's own directory).
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
    /// JSON array of control AUCs for the closure gate; absent, the gate
    /// records an unverified-controls warning.
    #[arg(long)]
    pub control_aucs: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: &ReplayArgs) -> Result<u8> {
    let manifest = FreezeManifest::read(&args.manifest)?;
    let base = args.base_dir.clone().unwrap_or_else(|| {
        args.manifest
            .parent()
            .unwrap_or(Path::new(""))
            .to_path_buf()
    });
    let control_aucs: Vec<f64> = match &args.control_aucs {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };

    let outcome = replay(&manifest, &base, &control_aucs)?;

    let mut paths = vec![args.manifest.clone()];
    if let Some(p) = &args.control_aucs {
        paths.push(p.clone());
    }
    let inputs = DatasetManifest::freeze(&paths)?;
    let config = json!({"args": args, "pinned_files": manifest.dataset_manifest});
    Envelope::new("replay", ctx.seed, config, Some(inputs), outcome)?
        .emit(ctx.out.as_deref())?;
    Ok(0)
}
