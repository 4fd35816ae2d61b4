//! Argument types shared across subcommands.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use chartwit_core::{ActivationTable, Result, Span, Surface};

/// Parses a span name as it appears in metadata files.
pub fn parse_span(s: &str) -> std::result::Result<Span, String> {
    match s {
        "reason" => Ok(Span::Reason),
        "late_reason" => Ok(Span::LateReason),
        "answer" => Ok(Span::Answer),
        other => Err(format!(
            "unknown span {other:?}; expected reason, late_reason, or answer"
        )),
    }
}

/// Parses a surface name as it appears in metadata files.
pub fn parse_surface(s: &str) -> std::result::Result<Surface, String> {
    match s {
        "hidden_on" => Ok(Surface::HiddenOn),
        "hidden_off" => Ok(Surface::HiddenOff),
        "delta" => Ok(Surface::Delta),
        other => Err(format!(
            "unknown surface {other:?}; expected hidden_on, hidden_off, or delta"
        )),
    }
}

/// An activation table on disk: binary matrix plus JSONL row metadata.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TableArgs {
    /// Binary activation matrix (.atlg).
    #[arg(long)]
    pub acts: PathBuf,
    /// JSONL row metadata.
    #[arg(long)]
    pub meta: PathBuf,
}

impl TableArgs {
    pub fn read(&self) -> Result<ActivationTable> {
        ActivationTable::read(&self.acts, &self.meta)
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        vec![self.acts.clone(), self.meta.clone()]
    }
}
