//! The staged pipeline behind `chartwit --config run.json`.
//!
//! Stages run in a fixed order — ingest, tangent, search, freeze, replay,
//! controls, bridge, reentry — and each writes its own report named
//! `<stage>.<digest>.json`, where the digest is over the report's exact
//! bytes. Every report embeds the digests of the reports it built on, and
//! the closing `summary.json` mirrors the whole table, so a finished run
//! directory is tamper-evident end to end: `chartwit report` re-hashes the
//! chain and refuses on any drift.
//!
//! A stage failure is recorded in the summary (later stages show as
//! skipped, `complete` goes false) and then propagated, so the process
//! still exits with the failure's code.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use chartwit_core::dataset::atomic_write;
use chartwit_core::{
    adjudicate, condition_groups, control_percentile, coupling_positive, enumerate_band,
    estimate_tangent, rank_candidates, realization_counts, reentry_results, replay,
    resolve_conditions, run_control_battery, run_folds, score_candidates, strict_replay_closure,
    ActivationTable, BatteryContext, BridgeSummary, CandidateScore, ConditionAliasMap,
    CouplingGate, DatasetManifest, Error, FoldConfig, FreezeInputs, FreezeManifest, FrozenAtlas,
    ReplayOutcome, Result, SearchConfig, Site, TangentChart,
};

use chartwit_core::bridge::aggregate_folds;
use chartwit_core::freeze::{freeze, match_source_chart};

use crate::cmd::controls::default_battery;
use crate::config::RunConfig;
use crate::envelope::{sha256_hex, to_value, Envelope};
use crate::Ctx;

/// Stage order; the summary lists exactly these units plus `report`.
const STAGES: [&str; 8] = [
    "ingest", "tangent", "search", "freeze", "replay", "controls", "bridge", "reentry",
];

/// One line of the summary table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRow {
    pub unit: String,
    /// `ok`, `frozen`, `reused`, `skipped[: why]`, `refused: <code>`, or
    /// `error: <message>`.
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    /// Report file inside the run directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    /// SHA-256 of that file's bytes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

/// `summary.json`: the run's verdict plus the stage table. Everything
/// needed to reproduce the run rides along (config, seed, input digests).
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: DatasetManifest,
    pub stages: Vec<StageRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    /// Full claim-ladder outcome behind `verdict`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub claim: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support_score: Option<f64>,
    /// Mean held-out-fold AUC from the bridge stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_auc: Option<f64>,
    /// False when any stage refused or errored.
    pub complete: bool,
}

/// What a stage hands back to the driver.
struct StageOutput {
    result: Value,
    outcome: String,
    verdict: Option<String>,
}

impl StageOutput {
    fn ok(result: Value) -> StageOutput {
        StageOutput {
            result,
            outcome: "ok".into(),
            verdict: None,
        }
    }
}

fn verdict_name(v: &chartwit_core::Verdict) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{v:?}"))
}

struct Pipeline {
    cfg: RunConfig,
    inputs: DatasetManifest,
    /// Digests of the stage reports written so far.
    upstream: BTreeMap<String, String>,
    rows: Vec<StageRow>,

    source: Option<ActivationTable>,
    discovery: Option<ActivationTable>,
    confirmatory: Option<ActivationTable>,
    aliases: Option<ConditionAliasMap>,
    family: Vec<TangentChart>,
    band: Vec<Site>,
    selected: Option<CandidateScore>,
    manifest: Option<FreezeManifest>,
    /// Directory the manifest's recorded paths resolve against at replay.
    replay_base: PathBuf,
    replay_outcome: Option<ReplayOutcome>,
    control_aucs: Vec<f64>,
    control_gate: Option<CouplingGate>,
    bridge_summary: Option<BridgeSummary>,
}

pub fn run(ctx: &Ctx) -> Result<u8> {
    let mut cfg = ctx.config.clone();
    if let Some(out) = &ctx.out {
        cfg.out_dir = out.clone();
    }
    require_paths(&cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut input_files = vec![
        cfg.source_activations.clone(),
        cfg.source_metadata.clone(),
        cfg.discovery_activations.clone(),
        cfg.discovery_metadata.clone(),
        cfg.confirmatory_activations.clone(),
        cfg.confirmatory_metadata.clone(),
        cfg.aliases.clone(),
    ];
    if let Some(m) = &cfg.freeze_manifest {
        input_files.push(m.clone());
    }
    let inputs = DatasetManifest::freeze(&input_files)?;

    let mut p = Pipeline {
        cfg,
        inputs,
        upstream: BTreeMap::new(),
        rows: Vec::new(),
        source: None,
        discovery: None,
        confirmatory: None,
        aliases: None,
        family: Vec::new(),
        band: Vec::new(),
        selected: None,
        manifest: None,
        replay_base: PathBuf::new(),
        replay_outcome: None,
        control_aucs: Vec::new(),
        control_gate: None,
        bridge_summary: None,
    };
    let outcome = p.run_stages();
    p.write_summary()?;
    outcome.map(|()| 0)
}

fn require_paths(cfg: &RunConfig) -> Result<()> {
    let required = [
        ("source_activations", &cfg.source_activations),
        ("source_metadata", &cfg.source_metadata),
        ("discovery_activations", &cfg.discovery_activations),
        ("discovery_metadata", &cfg.discovery_metadata),
        ("confirmatory_activations", &cfg.confirmatory_activations),
        ("confirmatory_metadata", &cfg.confirmatory_metadata),
        ("aliases", &cfg.aliases),
    ];
    let missing: Vec<&str> = required
        .iter()
        .filter(|(_, p)| p.as_os_str().is_empty())
        .map(|(name, _)| *name)
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "config is missing {}",
            missing.join(", ")
        )))
    }
}

impl Pipeline {
    fn run_stages(&mut self) -> Result<()> {
        self.stage("ingest", Self::stage_ingest)?;
        self.stage("tangent", Self::stage_tangent)?;
        self.stage("search", Self::stage_search)?;
        self.stage("freeze", Self::stage_freeze)?;
        self.stage("replay", Self::stage_replay)?;
        self.stage("controls", Self::stage_controls)?;
        self.stage("bridge", Self::stage_bridge)?;
        self.stage("reentry", Self::stage_reentry)?;
        Ok(())
    }

    /// Runs one stage, writes its report, and records the summary row. A
    /// failing stage gets a row too (refusal code or message), and the error
    /// keeps propagating so the process exits accordingly.
    fn stage(&mut self, name: &str, f: fn(&mut Self) -> Result<StageOutput>) -> Result<()> {
        match f(self) {
            Ok(out) => {
                let mut env = Envelope::new(
                    &format!("pipeline:{name}"),
                    self.cfg.seed,
                    &self.cfg,
                    Some(self.inputs.clone()),
                    out.result,
                )?;
                if !self.upstream.is_empty() {
                    env.upstream = Some(self.upstream.clone());
                }
                let bytes = env.to_bytes()?;
                let digest = sha256_hex(&bytes);
                let file = format!("{name}.{}.json", &digest[..12]);
                atomic_write(&self.cfg.out_dir.join(&file), &bytes)?;
                self.upstream.insert(name.into(), digest.clone());
                eprintln!("stage {name}: {} -> {file}", out.outcome);
                self.rows.push(StageRow {
                    unit: name.into(),
                    outcome: out.outcome,
                    verdict: out.verdict,
                    file: Some(file),
                    digest: Some(digest),
                });
                Ok(())
            }
            Err(e) => {
                let outcome = match e.refusal_code() {
                    Some(code) => format!("refused: {code}"),
                    None => format!("error: {e}"),
                };
                eprintln!("stage {name}: {outcome}");
                self.rows.push(StageRow {
                    unit: name.into(),
                    outcome,
                    verdict: None,
                    file: None,
                    digest: None,
                });
                Err(e)
            }
        }
    }

    fn stage_ingest(&mut self) -> Result<StageOutput> {
        let source = ActivationTable::read(&self.cfg.source_activations, &self.cfg.source_metadata)?;
        let discovery =
            ActivationTable::read(&self.cfg.discovery_activations, &self.cfg.discovery_metadata)?;
        let confirmatory = ActivationTable::read(
            &self.cfg.confirmatory_activations,
            &self.cfg.confirmatory_metadata,
        )?;
        let aliases = ConditionAliasMap::read(&self.cfg.aliases)?;

        let describe = |t: &ActivationTable| -> Result<Value> {
            let resolved = resolve_conditions(t, &aliases)?;
            Ok(json!({
                "n_rows": t.n_rows(),
                "dim": t.dim(),
                "conditions": resolved.counts,
            }))
        };
        let result = json!({
            "source": describe(&source)?,
            "discovery": describe(&discovery)?,
            "confirmatory": describe(&confirmatory)?,
        });
        self.source = Some(source);
        self.discovery = Some(discovery);
        self.confirmatory = Some(confirmatory);
        self.aliases = Some(aliases);
        Ok(StageOutput::ok(result))
    }

    fn stage_tangent(&mut self) -> Result<StageOutput> {
        let source = self.source.as_ref().expect("ingest ran");
        let sites: BTreeSet<Site> = source.meta.iter().map(|m| m.site()).collect();
        let mut family = Vec::with_capacity(sites.len());
        for site in sites {
            let rows = source.rows_at_site(site);
            family.push(estimate_tangent(
                &source.subset(&rows).data,
                site,
                &self.cfg.chart,
            )?);
        }
        let result = json!({ "charts": family });
        self.family = family;
        Ok(StageOutput::ok(result))
    }

    fn stage_search(&mut self) -> Result<StageOutput> {
        let discovery = self.discovery.as_ref().expect("ingest ran");
        let aliases = self.aliases.as_ref().expect("ingest ran");
        let band = enumerate_band(
            &self.cfg.band_layers,
            &self.cfg.band_spans,
            self.cfg.band_surface,
        )?;
        let mut candidates = score_candidates(
            &band,
            discovery,
            aliases,
            &self.family,
            &SearchConfig {
                chart: self.cfg.chart,
                policy: self.cfg.policy,
                seed: self.cfg.seed,
            },
        )?;
        rank_candidates(&mut candidates);
        let selected = candidates.first().cloned().ok_or_else(|| Error::EmptyInput {
            what: "scored candidates".into(),
        })?;
        let result = json!({
            "band": band,
            "selected": selected,
            "candidates": candidates,
        });
        self.band = band;
        self.selected = Some(selected);
        Ok(StageOutput::ok(result))
    }

    fn stage_freeze(&mut self) -> Result<StageOutput> {
        let (manifest, outcome, replay_base) = match &self.cfg.freeze_manifest {
            Some(path) => {
                let manifest = FreezeManifest::read(path)?;
                let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
                (manifest, "reused", base)
            }
            None => {
                let discovery = self.discovery.as_ref().expect("ingest ran");
                let confirmatory = self.confirmatory.as_ref().expect("ingest ran");
                let aliases = self.aliases.as_ref().expect("ingest ran");
                let selected = self.selected.clone().expect("search ran");
                let (source_chart_index, _) =
                    match_source_chart(&self.family, selected.site)?;
                let rows = confirmatory.rows_at_site(selected.site);
                if rows.is_empty() {
                    return Err(Error::NoRowsAtSite {
                        site: selected.site.to_string(),
                    });
                }
                let groups = condition_groups(&confirmatory.subset(&rows), aliases)?;
                // Pin absolute paths: the manifest lands in the run
                // directory, and replay resolves relative recorded paths
                // against the manifest's parent, which is not where the
                // inputs live.
                let abs = |p: &PathBuf| -> Result<PathBuf> {
                    std::path::absolute(p).map_err(|e| Error::io(p.clone(), e))
                };
                let manifest = freeze(FreezeInputs {
                    band: self.band.clone(),
                    selected,
                    source_family: self.family.clone(),
                    source_chart_index,
                    discovery_row_ids: discovery
                        .meta
                        .iter()
                        .map(|m| m.row_id.clone())
                        .collect(),
                    confirmatory_row_ids: confirmatory
                        .meta
                        .iter()
                        .map(|m| m.row_id.clone())
                        .collect(),
                    declared_pos: groups.n_pos(),
                    declared_neg: groups.n_neg(),
                    aliases: aliases.clone(),
                    policy: self.cfg.policy,
                    chart_config: self.cfg.chart,
                    coupling: self.cfg.coupling,
                    witness_chart_mode: self.cfg.witness_chart_mode,
                    seed: self.cfg.seed,
                    base_dir: PathBuf::new(),
                    confirmatory_activations: abs(&self.cfg.confirmatory_activations)?,
                    confirmatory_metadata: abs(&self.cfg.confirmatory_metadata)?,
                    extra_files: vec![abs(&self.cfg.aliases)?],
                })?;
                (manifest, "frozen", PathBuf::new())
            }
        };
        // A bare copy under a stable name, for reuse and for hand-run
        // replay/controls against this run.
        manifest.write(&self.cfg.out_dir.join("freeze_manifest.json"))?;
        let result = to_value(&manifest)?;
        self.manifest = Some(manifest);
        self.replay_base = replay_base;
        Ok(StageOutput {
            result,
            outcome: outcome.into(),
            verdict: None,
        })
    }

    fn stage_replay(&mut self) -> Result<StageOutput> {
        let manifest = self.manifest.as_ref().expect("freeze ran");
        // The control battery runs after replay, so the gate here carries
        // the empty-battery warning; the summary re-gates against the real
        // battery.
        let outcome = replay(manifest, &self.replay_base, &[])?;
        let verdict = verdict_name(&outcome.verdict.verdict);
        let result = to_value(&outcome)?;
        self.replay_outcome = Some(outcome);
        Ok(StageOutput {
            result,
            outcome: "ok".into(),
            verdict: Some(verdict),
        })
    }

    fn stage_controls(&mut self) -> Result<StageOutput> {
        let manifest = self.manifest.as_ref().expect("freeze ran");
        let replayed = self.replay_outcome.as_ref().expect("replay ran");
        let confirmatory = self.confirmatory.as_ref().expect("ingest ran");
        let cand = &manifest.selected;

        let rows = confirmatory.rows_at_site(cand.site);
        if rows.is_empty() {
            return Err(Error::NoRowsAtSite {
                site: cand.site.to_string(),
            });
        }
        let site_table = confirmatory.subset(&rows);
        let groups = condition_groups(&site_table, &manifest.aliases)?;
        let specs = default_battery(
            self.cfg.seed,
            self.cfg.n_null_controls,
            &self.family,
            cand.site,
        );
        let bctx = BatteryContext {
            axis: &cand.axis,
            groups: &groups,
            nearby_charts: &self.family,
            coupling: self.cfg.coupling,
        };
        let outcomes = run_control_battery(&cand.chart, &site_table, &specs, &bctx)?;
        let control_aucs: Vec<f64> = outcomes.iter().map(|o| o.report.auc).collect();
        let gate = coupling_positive(&replayed.coupling, &control_aucs, &self.cfg.policy);
        let percentile = control_percentile(replayed.coupling.auc, &control_aucs)?;

        let result = json!({
            "outcomes": outcomes,
            "control_aucs": control_aucs,
            "percentile": percentile,
            "gate": gate,
        });
        self.control_aucs = control_aucs;
        self.control_gate = Some(gate);
        Ok(StageOutput::ok(result))
    }

    fn stage_bridge(&mut self) -> Result<StageOutput> {
        let manifest = self.manifest.as_ref().expect("freeze ran");
        let confirmatory = self.confirmatory.as_ref().expect("ingest ran");
        if confirmatory.meta.iter().any(|m| m.group_id.is_none()) {
            // The held-out-group protocol needs group ids; without them the
            // bridge is not runnable, which is a data property, not a
            // failure of the run.
            return Ok(StageOutput {
                result: json!({ "skipped": "rows without group_id" }),
                outcome: "skipped: rows without group_id".into(),
                verdict: None,
            });
        }
        let atlas = FrozenAtlas::new(vec![manifest.selected.chart.clone()])?;
        let folds = run_folds(
            &atlas,
            confirmatory,
            manifest.selected.site,
            &manifest.aliases,
            &FoldConfig {
                policy: self.cfg.policy,
                chart: self.cfg.chart,
                seed: self.cfg.seed,
                expected_groups: self.cfg.expected_groups.clone(),
            },
        )?;
        let summary = aggregate_folds(&folds, &self.cfg.bootstrap, self.cfg.seed)?;
        let result = json!({ "folds": folds, "summary": summary });
        self.bridge_summary = Some(summary);
        Ok(StageOutput::ok(result))
    }

    fn stage_reentry(&mut self) -> Result<StageOutput> {
        let manifest = self.manifest.as_ref().expect("freeze ran");
        let confirmatory = self.confirmatory.as_ref().expect("ingest ran");
        let rows = confirmatory.rows_at_site(manifest.selected.site);
        if rows.is_empty() {
            return Err(Error::NoRowsAtSite {
                site: manifest.selected.site.to_string(),
            });
        }
        let site_table = confirmatory.subset(&rows);
        let atlas = FrozenAtlas::new(vec![manifest.selected.chart.clone()])?;
        let results = reentry_results(&site_table, &atlas.charts[0], &atlas)?;
        let realization = realization_counts(&site_table, &atlas.charts[0], &atlas)?;
        let closure = strict_replay_closure(&atlas, &site_table)?;
        let n_accepted = results.iter().filter(|r| r.accepted).count();
        let result = json!({
            "n_rows": results.len(),
            "n_accepted": n_accepted,
            "n_rejected": results.len() - n_accepted,
            "realization": realization,
            "strict_replay_closure": closure,
            "results": results,
        });
        Ok(StageOutput::ok(result))
    }

    /// Builds and writes `summary.json`. Stages that never ran are listed
    /// as skipped; the verdict is re-adjudicated against the real control
    /// battery (replay itself ran before the battery existed).
    fn write_summary(&mut self) -> Result<()> {
        for name in STAGES {
            if !self.rows.iter().any(|r| r.unit == name) {
                self.rows.push(StageRow {
                    unit: name.into(),
                    outcome: "skipped".into(),
                    verdict: None,
                    file: None,
                    digest: None,
                });
            }
        }

        let claim = match (&self.replay_outcome, &self.control_gate) {
            (Some(replayed), Some(gate)) => Some(adjudicate(
                replayed.witness.q_pass,
                replayed.witness.nu_pass,
                gate.coupling_positive,
                gate.controls_clean,
            )),
            _ => None,
        };
        let verdict = claim.as_ref().map(|c| verdict_name(&c.verdict));
        let complete = !self
            .rows
            .iter()
            .any(|r| r.outcome.starts_with("refused:") || r.outcome.starts_with("error:"));

        self.rows.push(StageRow {
            unit: "report".into(),
            outcome: "ok".into(),
            verdict: verdict.clone(),
            file: Some("summary.json".into()),
            digest: None,
        });

        let summary = Summary {
            command: "pipeline".into(),
            seed: self.cfg.seed,
            config: to_value(&self.cfg)?,
            inputs: self.inputs.clone(),
            stages: self.rows.clone(),
            verdict,
            claim: claim.map(to_value).transpose()?,
            support_score: self
                .replay_outcome
                .as_ref()
                .map(|r| r.witness.support_score),
            mean_auc: self.bridge_summary.as_ref().map(|b| b.mean_auc),
            complete,
        };
        let bytes = summary_bytes(&summary)?;
        atomic_write(&self.cfg.out_dir.join("summary.json"), &bytes)?;
        eprintln!(
            "summary: {} -> {}",
            summary.verdict.as_deref().unwrap_or("(no verdict)"),
            self.cfg.out_dir.join("summary.json").display()
        );
        Ok(())
    }
}

fn summary_bytes(summary: &Summary) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(summary)
        .map_err(|e| Error::json(PathBuf::from("summary.json"), e))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Re-derives `summary.json` from the stage reports in `run_dir`.
///
/// Every stage file is re-hashed against the digest the stored summary
/// claims for it (drift is a `hash_mismatch` refusal), and the verdict,
/// support score, and bridge AUC are recomputed from the reports rather
/// than copied. The caller compares the returned bytes against the stored
/// file.
pub fn reassemble(run_dir: &Path, stored: &Summary) -> Result<Vec<u8>> {
    let mut results: BTreeMap<String, Value> = BTreeMap::new();
    for row in &stored.stages {
        let (Some(file), Some(digest)) = (&row.file, &row.digest) else {
            continue;
        };
        let path = run_dir.join(file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let found = sha256_hex(&bytes);
        if &found != digest {
            return Err(Error::HashMismatch {
                path,
                expected: digest.clone(),
                found,
            });
        }
        let env: Value =
            serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
        results.insert(row.unit.clone(), env["result"].clone());
    }

    let config: RunConfig = serde_json::from_value(stored.config.clone())
        .map_err(|e| Error::json(PathBuf::from("summary.json"), e))?;
    let replayed: Option<ReplayOutcome> = results
        .get("replay")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .map_err(|e| Error::json(PathBuf::from("replay report"), e))?;
    let control_aucs: Option<Vec<f64>> = results
        .get("controls")
        .and_then(|v| v.get("control_aucs"))
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .map_err(|e| Error::json(PathBuf::from("controls report"), e))?;
    let bridge: Option<BridgeSummary> = results
        .get("bridge")
        .and_then(|v| v.get("summary"))
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .map_err(|e| Error::json(PathBuf::from("bridge report"), e))?;

    let claim = match (&replayed, &control_aucs) {
        (Some(r), Some(aucs)) => {
            let gate = coupling_positive(&r.coupling, aucs, &config.policy);
            Some(adjudicate(
                r.witness.q_pass,
                r.witness.nu_pass,
                gate.coupling_positive,
                gate.controls_clean,
            ))
        }
        _ => None,
    };
    let verdict = claim.as_ref().map(|c| verdict_name(&c.verdict));
    let complete = !stored
        .stages
        .iter()
        .any(|r| r.outcome.starts_with("refused:") || r.outcome.starts_with("error:"));

    summary_bytes(&Summary {
        command: stored.command.clone(),
        seed: stored.seed,
        config: stored.config.clone(),
        inputs: stored.inputs.clone(),
        stages: stored.stages.clone(),
        verdict,
        claim: claim.map(to_value).transpose()?,
        support_score: replayed.as_ref().map(|r| r.witness.support_score),
        mean_auc: bridge.as_ref().map(|b| b.mean_auc),
        complete,
    })
}
