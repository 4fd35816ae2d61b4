//! `chartwit synth`: generate a synthetic scenario — source family,
//! discovery and confirmatory draws, alias map, analytic expectations, and a
//! ready-to-run pipeline config.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use chartwit_core::dataset::atomic_write;
use chartwit_core::synth::SYNTH_FOLD_GROUPS;
use chartwit_core::{
    generate, generate_target_replicate, grid_scenario, synth_aliases, DatasetManifest, Error,
    Result,
};

use crate::config::RunConfig;
use crate::envelope::Envelope;
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Rotation of the planted frame's last axis, degrees.
    #[arg(long, default_value_t = 5.0)]
    pub rotation: f64,
    /// In-plane translation in units of the occupancy scale.
    #[arg(long, default_value_t = 0.0)]
    pub translation_scale: f64,
    /// Per-coordinate variance multiplier of the target occupancy.
    #[arg(long, default_value_t = 1.0)]
    pub reshape: f64,
    /// Rows per condition per table.
    #[arg(long, default_value_t = 512)]
    pub n_per: usize,
    /// Directory the scenario files are written into.
    #[arg(long)]
    pub dir: PathBuf,
}

pub fn run(ctx: &Ctx, args: &SynthArgs) -> Result<u8> {
    let spec = grid_scenario(
        args.rotation,
        args.translation_scale,
        args.reshape,
        args.n_per,
        ctx.seed,
    );
    let (source, discovery, expected) = generate(&spec)?;
    // Replicate 0 is the discovery draw; the confirmatory table must be a
    // fresh draw with disjoint row ids or freezing would refuse it.
    let confirmatory = generate_target_replicate(&spec, 1, "conf")?;

    let dir = &args.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    source.write(&dir.join("source.atlg"), &dir.join("source.jsonl"))?;
    discovery.write(&dir.join("discovery.atlg"), &dir.join("discovery.jsonl"))?;
    confirmatory.write(&dir.join("confirmatory.atlg"), &dir.join("confirmatory.jsonl"))?;
    synth_aliases().write(&dir.join("aliases.json"))?;

    let target_site = discovery.meta.first().expect("generated rows").site();
    let run_config = RunConfig {
        seed: ctx.seed,
        out_dir: PathBuf::from("run"),
        source_activations: PathBuf::from("source.atlg"),
        source_metadata: PathBuf::from("source.jsonl"),
        discovery_activations: PathBuf::from("discovery.atlg"),
        discovery_metadata: PathBuf::from("discovery.jsonl"),
        confirmatory_activations: PathBuf::from("confirmatory.atlg"),
        confirmatory_metadata: PathBuf::from("confirmatory.jsonl"),
        aliases: PathBuf::from("aliases.json"),
        band_layers: vec![target_site.layer],
        band_spans: vec![target_site.span],
        band_surface: target_site.surface,
        policy: ctx.config.policy,
        chart: ctx.config.chart,
        coupling: ctx.config.coupling,
        witness_chart_mode: ctx.config.witness_chart_mode,
        n_null_controls: ctx.config.n_null_controls,
        bootstrap: ctx.config.bootstrap,
        expected_groups: (0..SYNTH_FOLD_GROUPS).map(|g| format!("g{g}")).collect(),
        freeze_manifest: None,
    };
    write_json(dir, "expected.json", &expected)?;
    write_json(dir, "scenario.json", &spec)?;
    write_json(dir, "run.json", &run_config)?;

    let names = [
        "source.atlg",
        "source.jsonl",
        "discovery.atlg",
        "discovery.jsonl",
        "confirmatory.atlg",
        "confirmatory.jsonl",
        "aliases.json",
        "expected.json",
        "scenario.json",
        "run.json",
    ];
    let files = DatasetManifest::freeze_in(
        dir,
        &names.iter().map(PathBuf::from).collect::<Vec<_>>(),
    )?;

    let result = json!({
        "dir": dir,
        "files": files,
        "scenario": spec,
        "expected": expected,
        "run_config": "run.json",
    });
    Envelope::new("synth", ctx.seed, args, None, result)?.emit(ctx.out.as_deref())?;
    Ok(0)
}

fn write_json<T: Serialize>(dir: &std::path::Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(&path, e))?;
    bytes.push(b'\n');
    atomic_write(&path, &bytes)
}
