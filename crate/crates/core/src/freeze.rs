//! Search, freeze, and replay: the preregistration discipline.
//!
//! Discovery may search a predeclared band of sites, but everything the
//! confirmatory run depends on — the selected site, its chart, the scoring
//! axis, thresholds, seeds, declared denominators, and the exact bytes of
//! the confirmatory inputs — is frozen into a manifest first. Replay then
//! *refuses* to run (rather than warning) when any of those commitments is
//! broken, with machine-readable reason codes:
//!
//! - `hash_mismatch`: an input file changed since the freeze;
//! - `denominator_mismatch`: realised group sizes differ from the declared;
//! - `freeze_violation`: a confirmatory row id already appeared in discovery.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chart::{estimate_tangent, ChartConfig, TangentChart};
use crate::dataset::{
    atomic_write, condition_groups, resolve_recorded_path, sha256_hex, ActivationTable,
    ConditionAliasMap, ConditionGroups, DatasetManifest, Site, Span, Surface,
};
use crate::error::{Error, Result};
use crate::stats::{couple, substream_rng, CouplingConfig, CouplingReport, STREAM_SURROGATE};
use crate::witness::{
    adjudicate, coupling_positive, gate_witness, witness_nu_against_chart, witness_q, ClaimVerdict,
    CouplingGate, ThresholdPolicy, WitnessReport,
};

/// Signed row scores at a frozen site: `score(x) = <x - centroid, a> / ||a||`.
///
/// The sign matters: AUC and mean gap inherit the axis direction, so a
/// genuinely anti-correlated site shows up below chance rather than being
/// silently rectified.
pub fn axis_scores(
    points: &DMatrix<f64>,
    centroid: &DVector<f64>,
    axis: &DVector<f64>,
) -> Result<Vec<f64>> {
    if points.ncols() != centroid.len() || points.ncols() != axis.len() {
        return Err(Error::DimMismatch {
            left: points.ncols(),
            right: axis.len(),
            context: "axis scores".into(),
        });
    }
    let norm = axis.norm();
    if norm == 0.0 {
        return Err(Error::InvalidArgument(
            "scoring axis has zero norm".into(),
        ));
    }
    let unit = axis / norm;
    Ok(points
        .row_iter()
        .map(|row| (row.transpose() - centroid).dot(&unit))
        .collect())
}

/// Cartesian product of layers and spans at a fixed surface, layer-major.
pub fn enumerate_band(layers: &[u32], spans: &[Span], surface: Surface) -> Result<Vec<Site>> {
    if layers.is_empty() {
        return Err(Error::EmptyInput {
            what: "band layers".into(),
        });
    }
    if spans.is_empty() {
        return Err(Error::EmptyInput {
            what: "band spans".into(),
        });
    }
    let mut sites = Vec::with_capacity(layers.len() * spans.len());
    for &layer in layers {
        for &span in spans {
            sites.push(Site::new(layer, span, surface));
        }
    }
    Ok(sites)
}

/// One candidate site's discovery result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub site: Site,
    /// Position in the enumerated band; unique within a band.
    pub candidate_index: usize,
    /// Norm of the condition-mean difference vector in ambient space.
    pub axis_norm: f64,
    /// Discovery strength: `axis_norm * sqrt(n_rows)` over the denominator
    /// rows at the site.
    pub summary_score: f64,
    /// Witness of the site's chart against the matching source-family chart.
    pub witness: WitnessReport,
    /// Chart fitted on this site's discovery rows.
    pub chart: TangentChart,
    /// Condition-difference axis (unnormalised) at this site.
    pub axis: DVector<f64>,
}

/// Search configuration: how charts are fitted and witnesses gated during
/// candidate scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub chart: ChartConfig,
    pub policy: ThresholdPolicy,
    /// Seed for the chart-referenced witness surrogate draws.
    pub seed: u64,
}

/// Picks the source-family chart a candidate is witnessed against: the chart
/// sharing the candidate's span, or the family's only chart.
pub fn match_source_chart<'a>(
    family: &'a [TangentChart],
    site: Site,
) -> Result<(usize, &'a TangentChart)> {
    if let Some((i, c)) = family
        .iter()
        .enumerate()
        .find(|(_, c)| c.site.span == site.span)
    {
        return Ok((i, c));
    }
    if family.len() == 1 {
        return Ok((0, &family[0]));
    }
    Err(Error::MissingChart {
        site: format!("source family chart for span {}", site.span),
    })
}

/// Scores every band site against the source family and returns the ranked
/// candidate list (see [`rank_candidates`] for the order).
///
/// Per site: fit a chart on the site's rows, witness it against the matching
/// source chart (occupancy referenced to the source chart's surrogate),
/// and measure discovery strength as the condition-mean axis norm scaled by
/// the square root of the denominator row count.
pub fn score_candidates(
    band: &[Site],
    data: &ActivationTable,
    aliases: &ConditionAliasMap,
    source_family: &[TangentChart],
    config: &SearchConfig,
) -> Result<Vec<CandidateScore>> {
    if band.is_empty() {
        return Err(Error::EmptyInput {
            what: "candidate band".into(),
        });
    }
    let mut out = Vec::with_capacity(band.len());
    for (index, &site) in band.iter().enumerate() {
        let rows = data.rows_at_site(site);
        if rows.is_empty() {
            return Err(Error::NoRowsAtSite {
                site: site.to_string(),
            });
        }
        let site_table = data.subset(&rows);
        let groups = condition_groups(&site_table, aliases)?;
        let chart = estimate_tangent(&site_table.data, site, &config.chart)?;
        let (_, source_chart) = match_source_chart(source_family, site)?;

        let q = witness_q(source_chart, &chart, &site_table.data)?;
        let mut rng = substream_rng(config.seed, STREAM_SURROGATE + index as u64);
        let nu = witness_nu_against_chart(source_chart, &site_table.data, &mut rng)?;
        let witness = gate_witness(q, nu, &config.policy);

        let axis = condition_axis(&site_table.data, &groups);
        let axis_norm = axis.norm();
        let n_rows = groups.n_pos() + groups.n_neg();
        out.push(CandidateScore {
            site,
            candidate_index: index,
            axis_norm,
            summary_score: axis_norm * (n_rows as f64).sqrt(),
            witness,
            chart,
            axis,
        });
    }
    rank_candidates(&mut out);
    Ok(out)
}

/// The condition-difference axis: informative mean minus control mean, in
/// ambient coordinates.
pub fn condition_axis(points: &DMatrix<f64>, groups: &ConditionGroups) -> DVector<f64> {
    group_mean(points, &groups.pos_indices) - group_mean(points, &groups.neg_indices)
}

fn group_mean(points: &DMatrix<f64>, indices: &[usize]) -> DVector<f64> {
    let mut acc = DVector::zeros(points.ncols());
    for &i in indices {
        acc += points.row(i).transpose();
    }
    acc / indices.len() as f64
}

/// Witness-first ranking: q-passing candidates strictly before q-failing
/// ones, then support score descending, then summary score descending, then
/// candidate index ascending. Structural fidelity always outranks discovery
/// strength.
pub fn rank_candidates(candidates: &mut [CandidateScore]) {
    candidates.sort_by(|a, b| {
        b.witness
            .q_pass
            .cmp(&a.witness.q_pass)
            .then_with(|| {
                b.witness
                    .support_score
                    .partial_cmp(&a.witness.support_score)
                    .expect("support scores are finite")
            })
            .then_with(|| {
                b.summary_score
                    .partial_cmp(&a.summary_score)
                    .expect("summary scores are finite")
            })
            .then_with(|| a.candidate_index.cmp(&b.candidate_index))
    });
}

/// Whether replay re-fits the confirmatory witness chart or reuses the
/// frozen discovery chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessChartMode {
    /// Re-fit the target chart on the confirmatory rows (default).
    RefitConfirmatory,
    /// Reuse the frozen discovery chart as the target chart.
    ReuseDiscovery,
}

impl Default for WitnessChartMode {
    fn default() -> Self {
        WitnessChartMode::RefitConfirmatory
    }
}

/// Everything `freeze` commits to.
pub struct FreezeInputs {
    pub band: Vec<Site>,
    pub selected: CandidateScore,
    pub source_family: Vec<TangentChart>,
    pub source_chart_index: usize,
    pub discovery_row_ids: Vec<String>,
    pub confirmatory_row_ids: Vec<String>,
    pub declared_pos: usize,
    pub declared_neg: usize,
    pub aliases: ConditionAliasMap,
    pub policy: ThresholdPolicy,
    pub chart_config: ChartConfig,
    pub coupling: CouplingConfig,
    pub witness_chart_mode: WitnessChartMode,
    pub seed: u64,
    /// Directory the confirmatory files live under. Relative file paths are
    /// resolved against it when hashing but recorded as given, so the
    /// manifest stays valid if the directory moves.
    pub base_dir: PathBuf,
    /// Confirmatory input files; recorded exactly as given.
    pub confirmatory_activations: PathBuf,
    pub confirmatory_metadata: PathBuf,
    /// Additional files to pin (discovery exports, alias maps, ...).
    pub extra_files: Vec<PathBuf>,
}

/// Frozen commitment for one confirmatory run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeManifest {
    /// Digest of the source family and frozen axis (canonical JSON bytes).
    pub source_family_hash: String,
    pub band: Vec<Site>,
    pub selected: CandidateScore,
    pub source_family: Vec<TangentChart>,
    pub source_chart_index: usize,
    /// Sorted discovery row ids; replay refuses any overlap.
    pub discovery_row_ids: Vec<String>,
    pub declared_pos: usize,
    pub declared_neg: usize,
    pub aliases: ConditionAliasMap,
    pub policy: ThresholdPolicy,
    pub chart_config: ChartConfig,
    pub coupling: CouplingConfig,
    pub witness_chart_mode: WitnessChartMode,
    pub seed: u64,
    pub confirmatory_activations: String,
    pub confirmatory_metadata: String,
    pub dataset_manifest: DatasetManifest,
}

impl FreezeManifest {
    /// Canonical JSON bytes; identical inputs always serialize identically.
    pub fn to_canonical_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(self)
            .map_err(|e| Error::json(PathBuf::from("<manifest>"), e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_canonical_json()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn source_chart(&self) -> &TangentChart {
        &self.source_family[self.source_chart_index]
    }
}

/// Freezes a selection. Fails with a `freeze_violation` if any declared
/// confirmatory row id already appeared in discovery; the error names the
/// (lexicographically smallest) offending id.
pub fn freeze(inputs: FreezeInputs) -> Result<FreezeManifest> {
    if inputs.source_chart_index >= inputs.source_family.len() {
        return Err(Error::InvalidArgument(format!(
            "source chart index {} out of range ({} charts)",
            inputs.source_chart_index,
            inputs.source_family.len()
        )));
    }
    let discovery: HashSet<&str> = inputs.discovery_row_ids.iter().map(|s| s.as_str()).collect();
    let mut overlap: Vec<&str> = inputs
        .confirmatory_row_ids
        .iter()
        .map(|s| s.as_str())
        .filter(|id| discovery.contains(id))
        .collect();
    if !overlap.is_empty() {
        overlap.sort_unstable();
        return Err(Error::FreezeViolation {
            row_id: overlap[0].to_string(),
        });
    }

    let mut files = vec![
        inputs.confirmatory_activations.clone(),
        inputs.confirmatory_metadata.clone(),
    ];
    files.extend(inputs.extra_files.iter().cloned());
    let dataset_manifest = DatasetManifest::freeze_in(&inputs.base_dir, &files)?;

    let family_bytes = serde_json::to_vec(&(&inputs.source_family, &inputs.selected.axis))
        .map_err(|e| Error::json(PathBuf::from("<source-family>"), e))?;

    let mut discovery_row_ids = inputs.discovery_row_ids;
    discovery_row_ids.sort_unstable();

    Ok(FreezeManifest {
        source_family_hash: sha256_hex(&family_bytes),
        band: inputs.band,
        selected: inputs.selected,
        source_family: inputs.source_family,
        source_chart_index: inputs.source_chart_index,
        discovery_row_ids,
        declared_pos: inputs.declared_pos,
        declared_neg: inputs.declared_neg,
        aliases: inputs.aliases,
        policy: inputs.policy,
        chart_config: inputs.chart_config,
        coupling: inputs.coupling,
        witness_chart_mode: inputs.witness_chart_mode,
        seed: inputs.seed,
        confirmatory_activations: inputs.confirmatory_activations.to_string_lossy().into_owned(),
        confirmatory_metadata: inputs.confirmatory_metadata.to_string_lossy().into_owned(),
        dataset_manifest,
    })
}

/// Everything a replay produces. Serializes deterministically, so two
/// replays of the same manifest yield byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub witness: WitnessReport,
    pub coupling: CouplingReport,
    pub gate: CouplingGate,
    pub verdict: ClaimVerdict,
    pub n_pos: usize,
    pub n_neg: usize,
    pub excluded_unresolved: usize,
}

/// Replays a frozen site on its confirmatory inputs.
///
/// Refusals, in check order: `hash_mismatch` (any pinned file changed),
/// `freeze_violation` (a confirmatory row id appeared in discovery),
/// `denominator_mismatch` (realised group sizes differ from the declared
/// counts after excluding unresolved rows). `control_aucs` may be empty; the
/// gate then records an explicit unverified-controls warning.
pub fn replay(
    manifest: &FreezeManifest,
    base_dir: &Path,
    control_aucs: &[f64],
) -> Result<ReplayOutcome> {
    manifest.dataset_manifest.verify(base_dir)?;

    let acts = resolve_recorded_path(base_dir, &manifest.confirmatory_activations);
    let meta = resolve_recorded_path(base_dir, &manifest.confirmatory_metadata);
    let table = ActivationTable::read(&acts, &meta)?;

    let discovery: HashSet<&str> = manifest
        .discovery_row_ids
        .iter()
        .map(|s| s.as_str())
        .collect();
    for m in &table.meta {
        if discovery.contains(m.row_id.as_str()) {
            return Err(Error::FreezeViolation {
                row_id: m.row_id.clone(),
            });
        }
    }

    let site = manifest.selected.site;
    let site_rows = table.rows_at_site(site);
    if site_rows.is_empty() {
        return Err(Error::NoRowsAtSite {
            site: site.to_string(),
        });
    }
    let site_table = table.subset(&site_rows);
    let groups = condition_groups(&site_table, &manifest.aliases)?;
    if groups.n_pos() != manifest.declared_pos || groups.n_neg() != manifest.declared_neg {
        return Err(Error::DenominatorMismatch {
            declared_pos: manifest.declared_pos,
            declared_neg: manifest.declared_neg,
            found_pos: groups.n_pos(),
            found_neg: groups.n_neg(),
        });
    }

    // Coupling on the frozen signed-projection scores.
    let scores = axis_scores(
        &site_table.data,
        &manifest.selected.chart.centroid,
        &manifest.selected.axis,
    )?;
    let pos: Vec<f64> = groups.pos_indices.iter().map(|&i| scores[i]).collect();
    let neg: Vec<f64> = groups.neg_indices.iter().map(|&i| scores[i]).collect();
    let coupling = couple(&pos, &neg, manifest.seed, &manifest.coupling)?;

    // Witness on the confirmatory denominator rows.
    let denom_rows: Vec<usize> = groups
        .pos_indices
        .iter()
        .chain(groups.neg_indices.iter())
        .copied()
        .collect();
    let denom_points = site_table.subset(&denom_rows).data;
    let source_chart = manifest.source_chart();
    let target_chart = match manifest.witness_chart_mode {
        WitnessChartMode::RefitConfirmatory => {
            estimate_tangent(&denom_points, site, &manifest.chart_config)?
        }
        WitnessChartMode::ReuseDiscovery => manifest.selected.chart.clone(),
    };
    let q = witness_q(source_chart, &target_chart, &denom_points)?;
    let mut rng = substream_rng(manifest.seed, STREAM_SURROGATE);
    let nu = witness_nu_against_chart(source_chart, &denom_points, &mut rng)?;
    let witness = gate_witness(q, nu, &manifest.policy);

    let gate = coupling_positive(&coupling, control_aucs, &manifest.policy);
    let verdict = adjudicate(
        witness.q_pass,
        witness.nu_pass,
        gate.coupling_positive,
        gate.controls_clean,
    );

    Ok(ReplayOutcome {
        witness,
        coupling,
        gate,
        verdict,
        n_pos: groups.n_pos(),
        n_neg: groups.n_neg(),
        excluded_unresolved: groups.excluded_unresolved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ConditionRole, RowMeta};
    use crate::witness::{Verdict, WitnessNu, WitnessQ};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn band_enumeration_is_layer_major() {
        let band = enumerate_band(
            &[23, 24, 25],
            &[Span::Reason, Span::LateReason],
            Surface::Delta,
        )
        .unwrap();
        assert_eq!(band.len(), 6);
        assert_eq!(band[0], Site::new(23, Span::Reason, Surface::Delta));
        assert_eq!(band[1], Site::new(23, Span::LateReason, Surface::Delta));
        assert_eq!(band[2], Site::new(24, Span::Reason, Surface::Delta));
        assert_eq!(band[5], Site::new(25, Span::LateReason, Surface::Delta));

        assert_eq!(
            enumerate_band(&[7], &[Span::Answer], Surface::HiddenOn)
                .unwrap()
                .len(),
            1
        );
        assert!(enumerate_band(&[1], &[], Surface::Delta).is_err());
        assert!(enumerate_band(&[], &[Span::Reason], Surface::Delta).is_err());
    }

    fn dummy_candidate(index: usize, q_pass: bool, support: f64, summary: f64) -> CandidateScore {
        let site = Site::new(index as u32, Span::Reason, Surface::Delta);
        let chart = TangentChart {
            site,
            centroid: DVector::zeros(2),
            basis: DMatrix::identity(2, 1),
            spectrum: vec![1.0],
            occupancy_scale_sq: 1.0,
            n_points: 4,
        };
        let q = WitnessQ {
            basis_mean_deg: 0.0,
            basis_max_deg: 0.0,
            emp_mean_deg: 0.0,
            emp_max_deg: 0.0,
        };
        let nu = WitnessNu {
            occ_w2_sq_norm: 0.0,
            energy_distance_norm: 0.0,
            mean_shift_norm: 0.0,
            energy_raw: 0.0,
            energy_clamped: false,
        };
        CandidateScore {
            site,
            candidate_index: index,
            axis_norm: summary,
            summary_score: summary,
            witness: WitnessReport {
                q,
                nu,
                q_pass,
                nu_pass: true,
                support_score: support,
            },
            chart,
            axis: DVector::from_row_slice(&[1.0, 0.0]),
        }
    }

    #[test]
    fn ranking_puts_structure_before_strength() {
        // A: q passes, tiny discovery strength. B: q fails, huge strength.
        let mut cands = vec![
            dummy_candidate(0, false, 0.9, 1000.0),
            dummy_candidate(1, true, 0.2, 10.0),
        ];
        rank_candidates(&mut cands);
        assert_eq!(cands[0].candidate_index, 1);
        // Identical candidates order by index.
        let mut cands = vec![
            dummy_candidate(3, true, 0.5, 7.0),
            dummy_candidate(1, true, 0.5, 7.0),
            dummy_candidate(2, true, 0.5, 7.0),
        ];
        rank_candidates(&mut cands);
        let order: Vec<usize> = cands.iter().map(|c| c.candidate_index).collect();
        assert_eq!(order, vec![1, 2, 3]);
    }

    fn test_aliases() -> ConditionAliasMap {
        let mut m = ConditionAliasMap::default();
        m.entries.insert("on".into(), "informative_v1".into());
        m.entries.insert("off".into(), "null_v1".into());
        m.roles
            .insert("informative_v1".into(), ConditionRole::Informative);
        m.roles.insert("null_v1".into(), ConditionRole::NullControl);
        m
    }

    /// Builds a table with `n_per` informative and `n_per` control rows per
    /// site, where site layer 0 carries the planted structure (signal along
    /// e0, plane (e0, e1)) and layer 1 carries an orthogonal-plane structure.
    fn two_site_table(seed: u64, n_per: usize, id_prefix: &str) -> ActivationTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 10;
        let mut data = DMatrix::zeros(4 * n_per, d);
        let mut meta = Vec::new();
        for site_idx in 0..2 {
            for i in 0..2 * n_per {
                let r = site_idx * 2 * n_per + i;
                let positive = i < n_per;
                let shift = if positive { 2.0 } else { -2.0 };
                if site_idx == 0 {
                    data[(r, 0)] = rng.sample::<f64, _>(StandardNormal) + shift;
                    data[(r, 1)] = 1.5 * rng.sample::<f64, _>(StandardNormal);
                } else {
                    data[(r, 4)] = rng.sample::<f64, _>(StandardNormal) + shift;
                    data[(r, 5)] = 1.5 * rng.sample::<f64, _>(StandardNormal);
                }
                meta.push(RowMeta::bare(
                    format!("{id_prefix}-{site_idx}-{i}"),
                    if positive { "on" } else { "off" },
                    site_idx as u32,
                    Span::Reason,
                    Surface::Delta,
                ));
            }
        }
        ActivationTable::new(data, meta).unwrap()
    }

    fn quick_search_config() -> SearchConfig {
        SearchConfig {
            chart: ChartConfig::default(),
            policy: ThresholdPolicy::default(),
            seed: 17,
        }
    }

    fn quick_coupling() -> CouplingConfig {
        CouplingConfig {
            bootstrap: crate::stats::BootstrapConfig {
                replicates: 300,
                alpha: 0.05,
            },
            permutation: crate::stats::PermutationConfig {
                permutations: 499,
                exhaustive_limit: 10,
            },
        }
    }

    /// Source family: a chart fitted on an independent draw of the same
    /// planted structure as layer 0.
    fn source_family(seed: u64) -> Vec<TangentChart> {
        let table = two_site_table(seed, 40, "src");
        let rows = table.rows_at_site(Site::new(0, Span::Reason, Surface::Delta));
        let site_table = table.subset(&rows);
        vec![estimate_tangent(
            &site_table.data,
            Site::new(0, Span::Reason, Surface::Delta),
            &ChartConfig::default(),
        )
        .unwrap()]
    }

    #[test]
    fn search_prefers_the_structurally_matching_site() {
        let data = two_site_table(5, 32, "disc");
        let band = enumerate_band(&[0, 1], &[Span::Reason], Surface::Delta).unwrap();
        let family = source_family(1234);
        let ranked =
            score_candidates(&band, &data, &test_aliases(), &family, &quick_search_config())
                .unwrap();
        assert_eq!(ranked.len(), 2);
        // Layer 0 matches the source structure; layer 1 is orthogonal.
        assert_eq!(ranked[0].site.layer, 0);
        assert!(ranked[0].witness.q_pass);
        assert!(!ranked[1].witness.q_pass);
        assert!(ranked[0].axis_norm > 3.0, "axis norm {}", ranked[0].axis_norm);
        let expected_summary = ranked[0].axis_norm * (64f64).sqrt();
        assert!((ranked[0].summary_score - expected_summary).abs() < 1e-12);
    }

    struct FreezeFixture {
        dir: tempfile::TempDir,
        manifest: FreezeManifest,
    }

    /// End-to-end discovery + freeze against a confirmatory export of the
    /// same planted structure with fresh row ids.
    fn freeze_fixture(mode: WitnessChartMode) -> FreezeFixture {
        let dir = tempfile::tempdir().unwrap();
        let discovery = two_site_table(5, 32, "disc");
        let confirmatory_full = two_site_table(6, 32, "conf");
        let conf_rows =
            confirmatory_full.rows_at_site(Site::new(0, Span::Reason, Surface::Delta));
        let confirmatory = confirmatory_full.subset(&conf_rows);

        let acts = dir.path().join("conf.atlg");
        let meta = dir.path().join("conf.jsonl");
        confirmatory.write(&acts, &meta).unwrap();

        let band = enumerate_band(&[0, 1], &[Span::Reason], Surface::Delta).unwrap();
        let family = source_family(1234);
        let ranked = score_candidates(
            &band,
            &discovery,
            &test_aliases(),
            &family,
            &quick_search_config(),
        )
        .unwrap();
        let selected = ranked[0].clone();

        let manifest = freeze(FreezeInputs {
            band,
            selected,
            source_family: family,
            source_chart_index: 0,
            discovery_row_ids: discovery.meta.iter().map(|m| m.row_id.clone()).collect(),
            confirmatory_row_ids: confirmatory.meta.iter().map(|m| m.row_id.clone()).collect(),
            declared_pos: 32,
            declared_neg: 32,
            aliases: test_aliases(),
            policy: ThresholdPolicy::default(),
            chart_config: ChartConfig::default(),
            coupling: quick_coupling(),
            witness_chart_mode: mode,
            seed: 99,
            base_dir: dir.path().to_path_buf(),
            confirmatory_activations: PathBuf::from("conf.atlg"),
            confirmatory_metadata: PathBuf::from("conf.jsonl"),
            extra_files: vec![],
        })
        .unwrap();
        FreezeFixture { dir, manifest }
    }

    #[test]
    fn freeze_is_deterministic_and_replay_confirms() {
        let fx = freeze_fixture(WitnessChartMode::RefitConfirmatory);
        // Re-freezing identical inputs gives byte-identical manifests.
        let json1 = fx.manifest.to_canonical_json().unwrap();
        let path = fx.dir.path().join("freeze.json");
        fx.manifest.write(&path).unwrap();
        let back = FreezeManifest::read(&path).unwrap();
        assert_eq!(back, fx.manifest);
        assert_eq!(back.to_canonical_json().unwrap(), json1);

        let out = replay(&fx.manifest, fx.dir.path(), &[]).unwrap();
        assert_eq!(out.verdict.verdict, Verdict::ExactIdentity);
        assert!(out.gate.controls_empty_warning);
        assert_eq!((out.n_pos, out.n_neg), (32, 32));
        assert!(out.coupling.auc > 0.95, "auc {}", out.coupling.auc);
        assert!(out.witness.q_pass && out.witness.nu_pass);

        // Determinism: byte-identical serialized outcomes.
        let out2 = replay(&fx.manifest, fx.dir.path(), &[]).unwrap();
        assert_eq!(
            serde_json::to_vec(&out).unwrap(),
            serde_json::to_vec(&out2).unwrap()
        );

        // Reusing the discovery chart also confirms on this clean fixture.
        let fx2 = freeze_fixture(WitnessChartMode::ReuseDiscovery);
        let out3 = replay(&fx2.manifest, fx2.dir.path(), &[]).unwrap();
        assert_eq!(out3.verdict.verdict, Verdict::ExactIdentity);
    }

    #[test]
    fn freeze_rejects_row_overlap() {
        let discovery_ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let confirmatory_ids = vec!["x".to_string(), "b".to_string(), "a".to_string()];
        let fx = freeze_fixture(WitnessChartMode::RefitConfirmatory);
        let inputs = FreezeInputs {
            band: fx.manifest.band.clone(),
            selected: fx.manifest.selected.clone(),
            source_family: fx.manifest.source_family.clone(),
            source_chart_index: 0,
            discovery_row_ids: discovery_ids,
            confirmatory_row_ids: confirmatory_ids,
            declared_pos: 1,
            declared_neg: 1,
            aliases: test_aliases(),
            policy: ThresholdPolicy::default(),
            chart_config: ChartConfig::default(),
            coupling: quick_coupling(),
            witness_chart_mode: WitnessChartMode::RefitConfirmatory,
            seed: 0,
            base_dir: fx.dir.path().to_path_buf(),
            confirmatory_activations: PathBuf::from("conf.atlg"),
            confirmatory_metadata: PathBuf::from("conf.jsonl"),
            extra_files: vec![],
        };
        match freeze(inputs) {
            // Both "a" and "b" overlap; the smallest is named.
            Err(Error::FreezeViolation { row_id }) => assert_eq!(row_id, "a"),
            other => panic!("expected FreezeViolation, got {other:?}"),
        }
    }

    #[test]
    fn replay_refuses_tamper_and_denominator_drift() {
        let fx = freeze_fixture(WitnessChartMode::RefitConfirmatory);
        let acts_path = fx.dir.path().join("conf.atlg");

        // Flip one payload byte: hash_mismatch.
        let mut bytes = std::fs::read(&acts_path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&acts_path, &bytes).unwrap();
        let err = replay(&fx.manifest, fx.dir.path(), &[]).unwrap_err();
        assert_eq!(err.refusal_code(), Some("hash_mismatch"));

        // Restore, then claim different denominators: denominator_mismatch.
        bytes[last] ^= 0x01;
        std::fs::write(&acts_path, &bytes).unwrap();
        let mut wrong = fx.manifest.clone();
        wrong.declared_pos = 31;
        // The dataset hashes still verify; only the declared counts drifted.
        let err = replay(&wrong, fx.dir.path(), &[]).unwrap_err();
        assert_eq!(err.refusal_code(), Some("denominator_mismatch"));

        // Discovery ids leaking into the confirmatory table: freeze_violation.
        let mut leaky = fx.manifest.clone();
        leaky
            .discovery_row_ids
            .push("conf-0-0".to_string());
        leaky.discovery_row_ids.sort_unstable();
        let err = replay(&leaky, fx.dir.path(), &[]).unwrap_err();
        assert_eq!(err.refusal_code(), Some("freeze_violation"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_ranking_never_puts_q_fail_above_q_pass(
            flags in proptest::collection::vec(any::<bool>(), 1..20),
            supports in proptest::collection::vec(0.0f64..1.0, 20),
            summaries in proptest::collection::vec(0.0f64..100.0, 20),
        ) {
            let mut cands: Vec<CandidateScore> = flags
                .iter()
                .enumerate()
                .map(|(i, &q)| dummy_candidate(i, q, supports[i], summaries[i]))
                .collect();
            rank_candidates(&mut cands);
            // Once a q-failing candidate appears, no q-passing one follows.
            let mut seen_fail = false;
            for c in &cands {
                if !c.witness.q_pass {
                    seen_fail = true;
                } else {
                    prop_assert!(!seen_fail, "q-pass ranked after q-fail");
                }
            }
            // Indices are a permutation (nothing lost).
            let mut idx: Vec<usize> = cands.iter().map(|c| c.candidate_index).collect();
            idx.sort_unstable();
            prop_assert_eq!(idx, (0..flags.len()).collect::<Vec<_>>());
        }

        #[test]
        fn prop_freeze_overlap_always_caught(
            ids in proptest::collection::hash_set("[a-z]{1,4}", 1..30),
            split in any::<u64>(),
            plant in any::<bool>(),
        ) {
            let ids: Vec<String> = ids.into_iter().collect();
            let cut = (split as usize) % ids.len();
            let (disc, conf) = ids.split_at(cut.max(1).min(ids.len() - 1).max(1));
            let mut conf: Vec<String> = conf.to_vec();
            if conf.is_empty() {
                conf.push("zzzz".into());
            }
            if plant {
                conf.push(disc[0].clone());
            }
            let overlap_expected = plant;
            let disc_set: HashSet<&str> = disc.iter().map(|s| s.as_str()).collect();
            let got_overlap = conf.iter().any(|c| disc_set.contains(c.as_str()));
            // The planted overlap is the only possible one by construction.
            prop_assert_eq!(got_overlap, overlap_expected);

            let fxq = dummy_candidate(0, true, 1.0, 1.0);
            let dir = tempfile::tempdir().unwrap();
            let f = dir.path().join("x.bin");
            std::fs::write(&f, b"payload").unwrap();
            let res = freeze(FreezeInputs {
                band: vec![fxq.site],
                selected: fxq,
                source_family: vec![TangentChart {
                    site: Site::new(0, Span::Reason, Surface::Delta),
                    centroid: DVector::zeros(2),
                    basis: DMatrix::identity(2, 1),
                    spectrum: vec![1.0],
                    occupancy_scale_sq: 1.0,
                    n_points: 4,
                }],
                source_chart_index: 0,
                discovery_row_ids: disc.to_vec(),
                confirmatory_row_ids: conf,
                declared_pos: 1,
                declared_neg: 1,
                aliases: test_aliases(),
                policy: ThresholdPolicy::default(),
                chart_config: ChartConfig::default(),
                coupling: quick_coupling(),
                witness_chart_mode: WitnessChartMode::RefitConfirmatory,
                seed: 0,
                base_dir: dir.path().to_path_buf(),
                confirmatory_activations: f.clone(),
                confirmatory_metadata: f.clone(),
                extra_files: vec![],
            });
            let is_violation = matches!(&res, Err(Error::FreezeViolation { .. }));
            if overlap_expected {
                prop_assert!(is_violation);
            } else {
                prop_assert!(res.is_ok());
            }
        }
    }
}
