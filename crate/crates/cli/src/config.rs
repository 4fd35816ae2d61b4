//! Run configuration.
//!
//! One JSON document drives everything: the staged pipeline reads the path
//! and band fields, and every subcommand takes its tuning defaults (policy,
//! chart rank, resampling sizes, seed) from the same file via the global
//! `--config` flag. Relative paths are resolved against the directory the
//! config was loaded from, and reports embed the resolved form, so a
//! report's config re-runs without caring where it was written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use chartwit_core::stats::{BootstrapConfig, CouplingConfig};
use chartwit_core::{
    ChartConfig, Error, Result, Span, Surface, ThresholdPolicy, WitnessChartMode,
};

/// Everything a pipeline run needs. All fields have defaults, so a config
/// may list only what it overrides; the pipeline itself checks that the
/// input paths were actually given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Base seed for every stage.
    pub seed: u64,
    /// Directory stage reports and the summary are written into.
    pub out_dir: PathBuf,
    /// Source-family table the candidate band is witnessed against.
    pub source_activations: PathBuf,
    pub source_metadata: PathBuf,
    /// Discovery table the band is searched on.
    pub discovery_activations: PathBuf,
    pub discovery_metadata: PathBuf,
    /// Confirmatory table pinned at freeze time and replayed.
    pub confirmatory_activations: PathBuf,
    pub confirmatory_metadata: PathBuf,
    /// Condition alias map (raw tag -> canonical name and role).
    pub aliases: PathBuf,
    /// Candidate band enumerated during search.
    pub band_layers: Vec<u32>,
    pub band_spans: Vec<Span>,
    pub band_surface: Surface,
    pub policy: ThresholdPolicy,
    pub chart: ChartConfig,
    pub coupling: CouplingConfig,
    pub witness_chart_mode: WitnessChartMode,
    /// Null-label shuffles in the control battery.
    pub n_null_controls: usize,
    /// Bootstrap settings for fold aggregation in the bridge stage.
    pub bootstrap: BootstrapConfig,
    /// Fold groups that must appear in bridge output even when absent.
    pub expected_groups: Vec<String>,
    /// Reuse this freeze manifest instead of freezing anew; replay then
    /// refuses if any pinned input changed since the freeze.
    pub freeze_manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("chartwit-run"),
            source_activations: PathBuf::new(),
            source_metadata: PathBuf::new(),
            discovery_activations: PathBuf::new(),
            discovery_metadata: PathBuf::new(),
            confirmatory_activations: PathBuf::new(),
            confirmatory_metadata: PathBuf::new(),
            aliases: PathBuf::new(),
            band_layers: Vec::new(),
            band_spans: Vec::new(),
            band_surface: Surface::Delta,
            policy: ThresholdPolicy::default(),
            chart: ChartConfig::default(),
            coupling: CouplingConfig::default(),
            witness_chart_mode: WitnessChartMode::default(),
            n_null_controls: 20,
            bootstrap: BootstrapConfig::default(),
            expected_groups: Vec::new(),
            freeze_manifest: None,
        }
    }
}

impl RunConfig {
    /// Loads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_against(base);
        Ok(cfg)
    }

    fn resolve_against(&mut self, base: &Path) {
        let fields = [
            &mut self.out_dir,
            &mut self.source_activations,
            &mut self.source_metadata,
            &mut self.discovery_activations,
            &mut self.discovery_metadata,
            &mut self.confirmatory_activations,
            &mut self.confirmatory_metadata,
            &mut self.aliases,
        ];
        for p in fields {
            resolve(base, p);
        }
        if let Some(p) = self.freeze_manifest.as_mut() {
            resolve(base, p);
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() && !base.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.n_null_controls, 20);
        assert_eq!(cfg.band_surface, Surface::Delta);
        assert!(cfg.source_activations.as_os_str().is_empty());
    }

    #[test]
    fn load_resolves_relative_paths_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"source_activations": "src.atlg", "out_dir": "/abs/run"}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.source_activations, dir.path().join("src.atlg"));
        assert_eq!(cfg.out_dir, PathBuf::from("/abs/run"));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig {
            seed: 3,
            band_layers: vec![1, 2],
            band_spans: vec![Span::Reason],
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
