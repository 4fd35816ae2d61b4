//! `chartwit report`: re-check and print a finished run's summary.
//!
//! The summary is not trusted as stored: every stage report it references
//! is re-hashed, and the verdict line is recomputed from those reports. Any
//! drift — an edited stage file, a doctored verdict — is a `hash_mismatch`
//! refusal.

use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use chartwit_core::dataset::atomic_write;
use chartwit_core::{Error, Result};

use crate::envelope::{read_json, sha256_hex};
use crate::pipeline::{self, Summary};
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Pipeline run directory (holds summary.json and the stage reports).
    #[arg(long)]
    pub run_dir: PathBuf,
}

pub fn run(ctx: &Ctx, args: &ReportArgs) -> Result<u8> {
    let summary_path = args.run_dir.join("summary.json");
    let stored_bytes = std::fs::read(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let stored: Summary = read_json(&summary_path)?;

    let reassembled = pipeline::reassemble(&args.run_dir, &stored)?;
    if reassembled != stored_bytes {
        return Err(Error::HashMismatch {
            path: summary_path,
            expected: sha256_hex(&reassembled),
            found: sha256_hex(&stored_bytes),
        });
    }

    match &ctx.out {
        Some(path) => atomic_write(path, &stored_bytes)?,
        None => std::io::stdout()
            .write_all(&stored_bytes)
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(0)
}
