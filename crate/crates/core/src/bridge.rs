//! Held-out fold bridge and re-entry diagnostics.
//!
//! A frozen atlas (a family of charts fitted elsewhere and never refitted
//! here) assigns rows by normalized centroid distance. The bridge protocol
//! scores one held-out group at a time on the rows assigned to a fixed lane
//! chart, and re-entry checks decide — with an explicit reason — whether a
//! row still lands inside a frozen chart, separating displacement
//! (centroid-distance failures) from rotation (basis-angle failures).

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chart::{estimate_tangent, ChartConfig, TangentChart};
use crate::dataset::{condition_groups, ActivationTable, ConditionAliasMap, Site};
use crate::error::{Error, Result};
use crate::freeze::{axis_scores, condition_axis};
use crate::stats::{
    auc, bootstrap_mean_ci, mean_gap, sign_test_one_sided, substream_rng, BootstrapCi,
    BootstrapConfig, STREAM_SURROGATE,
};
use crate::witness::{gate_witness, witness_nu_against_chart, witness_q, ThresholdPolicy};

pub const DEFAULT_ASSIGNMENT_THRESHOLD: f64 = 2.5;
pub const DEFAULT_ANGLE_THRESHOLD_DEG: f64 = 70.0;

/// A source-defined chart family with assignment and re-entry thresholds.
/// Charts are immutable once the atlas is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenAtlas {
    pub charts: Vec<TangentChart>,
    /// Bound on `distance(x, centroid) / sqrt(occupancy_scale_sq)`.
    pub assignment_threshold: f64,
    /// Bound on the single-row empirical tangent angle, in degrees.
    pub angle_threshold_deg: f64,
}

impl FrozenAtlas {
    /// Default thresholds: distance 2.5, angle 70 degrees (the basis-angle
    /// max rule, reused so the threshold family stays coherent).
    pub fn new(charts: Vec<TangentChart>) -> Result<Self> {
        FrozenAtlas::with_thresholds(
            charts,
            DEFAULT_ASSIGNMENT_THRESHOLD,
            DEFAULT_ANGLE_THRESHOLD_DEG,
        )
    }

    pub fn with_thresholds(
        charts: Vec<TangentChart>,
        assignment_threshold: f64,
        angle_threshold_deg: f64,
    ) -> Result<Self> {
        if !(assignment_threshold > 0.0) || !(angle_threshold_deg > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "atlas thresholds must be positive, got distance {assignment_threshold}, \
                 angle {angle_threshold_deg}"
            )));
        }
        let mut sites = BTreeSet::new();
        for c in &charts {
            if c.dim() != charts[0].dim() {
                return Err(Error::DimMismatch {
                    left: charts[0].dim(),
                    right: c.dim(),
                    context: "atlas chart dims".into(),
                });
            }
            if !sites.insert(c.site.to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate atlas site {}",
                    c.site
                )));
            }
        }
        Ok(FrozenAtlas {
            charts,
            assignment_threshold,
            angle_threshold_deg,
        })
    }

    pub fn chart_for(&self, site: Site) -> Option<(usize, &TangentChart)> {
        self.charts
            .iter()
            .enumerate()
            .find(|(_, c)| c.site == site)
    }
}

/// Centroid distance normalized by the chart's occupancy scale.
pub fn normalized_centroid_distance(chart: &TangentChart, x: &DVector<f64>) -> f64 {
    (x - &chart.centroid).norm() / chart.occupancy_scale_sq.sqrt()
}

/// Assigns each row to the chart minimizing normalized centroid distance,
/// or to none when even the nearest chart exceeds the assignment threshold.
/// Ties break toward the earlier chart in atlas order. Returns one
/// `Option<chart index>` per table row.
pub fn assign_rows(atlas: &FrozenAtlas, table: &ActivationTable) -> Result<Vec<Option<usize>>> {
    if atlas.charts.is_empty() {
        return Err(Error::EmptyInput {
            what: "atlas charts".into(),
        });
    }
    if table.dim() != atlas.charts[0].dim() {
        return Err(Error::DimMismatch {
            left: atlas.charts[0].dim(),
            right: table.dim(),
            context: "atlas assignment".into(),
        });
    }
    Ok(table
        .data
        .row_iter()
        .map(|row| {
            let x = row.transpose();
            let mut best: Option<(usize, f64)> = None;
            for (i, chart) in atlas.charts.iter().enumerate() {
                let d = normalized_centroid_distance(chart, &x);
                // Strict less-than keeps the first chart on exact ties.
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.filter(|&(_, d)| d <= atlas.assignment_threshold)
                .map(|(i, _)| i)
        })
        .collect())
}

/// Why a row failed re-entry. When both bounds fail, centroid distance takes
/// declared precedence, so failure tallies are well-defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    CentroidDistance,
    BasisAngle,
}

/// Re-entry decision for one row against one frozen chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReentryResult {
    pub row_id: String,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
    /// `distance / sqrt(occupancy_scale_sq)`; compared to the distance bound.
    pub norm_centroid_distance: f64,
    /// Empirical tangent angle over the angle bound; accepted rows have
    /// `norm_angle <= 1`.
    pub norm_angle: f64,
}

/// Empirical tangent angle of a single row against a chart, in degrees.
/// Rows indistinguishable from the centroid carry no direction and count
/// as zero angle.
fn point_angle_deg(chart: &TangentChart, x: &DVector<f64>) -> f64 {
    let v = x - &chart.centroid;
    let norm = v.norm();
    if norm <= 1e-12 * chart.occupancy_scale_sq.sqrt() {
        return 0.0;
    }
    let in_plane = (chart.basis.transpose() * &v).norm();
    (in_plane / norm).clamp(0.0, 1.0).acos().to_degrees()
}

/// Checks whether a row re-enters a frozen chart: accepted iff the
/// normalized centroid distance and the tangent angle are both within the
/// atlas bounds.
pub fn reentry_check(
    row_id: &str,
    x: &DVector<f64>,
    chart: &TangentChart,
    atlas: &FrozenAtlas,
) -> ReentryResult {
    let dist = normalized_centroid_distance(chart, x);
    let angle_deg = point_angle_deg(chart, x);
    let dist_ok = dist <= atlas.assignment_threshold;
    let angle_ok = angle_deg <= atlas.angle_threshold_deg;
    let reject_reason = match (dist_ok, angle_ok) {
        (true, true) => None,
        (false, _) => Some(RejectReason::CentroidDistance),
        (true, false) => Some(RejectReason::BasisAngle),
    };
    ReentryResult {
        row_id: row_id.to_string(),
        accepted: dist_ok && angle_ok,
        reject_reason,
        norm_centroid_distance: dist,
        norm_angle: angle_deg / atlas.angle_threshold_deg,
    }
}

/// Re-entry decisions for every table row against one chart.
pub fn reentry_results(
    table: &ActivationTable,
    chart: &TangentChart,
    atlas: &FrozenAtlas,
) -> Result<Vec<ReentryResult>> {
    if table.dim() != chart.dim() {
        return Err(Error::DimMismatch {
            left: chart.dim(),
            right: table.dim(),
            context: "reentry check".into(),
        });
    }
    Ok(table
        .meta
        .iter()
        .enumerate()
        .map(|(i, m)| reentry_check(&m.row_id, &table.data.row(i).transpose(), chart, atlas))
        .collect())
}

/// Realization tally: how many rows re-enter the chart, overall and among
/// flip-flagged rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealizationCounts {
    pub n_realized: usize,
    pub n_total: usize,
    pub n_flip_realized: usize,
    pub n_flip_total: usize,
}

pub fn realization_counts(
    table: &ActivationTable,
    chart: &TangentChart,
    atlas: &FrozenAtlas,
) -> Result<RealizationCounts> {
    let results = reentry_results(table, chart, atlas)?;
    let mut counts = RealizationCounts {
        n_realized: 0,
        n_total: results.len(),
        n_flip_realized: 0,
        n_flip_total: 0,
    };
    for (res, m) in results.iter().zip(&table.meta) {
        let flip = m.flip_flag == Some(true);
        if flip {
            counts.n_flip_total += 1;
        }
        if res.accepted {
            counts.n_realized += 1;
            if flip {
                counts.n_flip_realized += 1;
            }
        }
    }
    Ok(counts)
}

/// Scored part of a fold; absent when the fold could not be scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub auc: f64,
    pub mean_gap: f64,
    pub q_pass: bool,
    pub nu_pass: bool,
}

/// One held-out group's bridge result. Unscorable folds (no assigned rows,
/// a missing condition side, or a degenerate chart refit) are reported with
/// `scores: None` rather than dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out_group: String,
    pub n_assigned: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<FoldScores>,
}

/// Fold protocol configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldConfig {
    pub policy: ThresholdPolicy,
    pub chart: ChartConfig,
    pub seed: u64,
    /// Groups that must appear in the output even when absent from the data
    /// (reported as unscored folds).
    pub expected_groups: Vec<String>,
}

impl FoldConfig {
    pub fn new(seed: u64) -> Self {
        FoldConfig {
            policy: ThresholdPolicy::default(),
            chart: ChartConfig::default(),
            seed,
            expected_groups: Vec::new(),
        }
    }
}

/// Runs the held-out fold protocol on a fixed bridge lane.
///
/// Rows are assigned once by the frozen atlas; only rows assigned to the
/// lane's chart participate. The condition-contrast axis (informative mean
/// minus control mean over all lane-assigned rows) is computed once and
/// frozen across folds, so single-group data still scores; rows are scored
/// by signed projection of the offset from the lane centroid onto that
/// axis. Per distinct group: AUC and mean gap of its scores, plus a witness
/// of a chart refitted on its denominator rows against the lane chart.
/// Results are sorted by group id.
pub fn run_folds(
    atlas: &FrozenAtlas,
    data: &ActivationTable,
    lane: Site,
    aliases: &ConditionAliasMap,
    config: &FoldConfig,
) -> Result<Vec<FoldResult>> {
    let (lane_idx, lane_chart) = atlas.chart_for(lane).ok_or_else(|| Error::MissingChart {
        site: lane.to_string(),
    })?;
    for m in &data.meta {
        if m.group_id.is_none() {
            return Err(Error::InvalidArgument(format!(
                "row {} has no group_id; the fold protocol requires one per row",
                m.row_id
            )));
        }
    }
    let assignment = assign_rows(atlas, data)?;
    let lane_rows: Vec<usize> = (0..data.n_rows())
        .filter(|&i| assignment[i] == Some(lane_idx))
        .collect();

    // Group membership over lane-assigned rows (indices into `lane_table`),
    // plus every group seen anywhere in the data and every expected group.
    let mut folds: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for m in &data.meta {
        folds.entry(m.group_id.clone().unwrap()).or_default();
    }
    for g in &config.expected_groups {
        folds.entry(g.clone()).or_default();
    }
    let lane_table = data.subset(&lane_rows);
    for (j, m) in lane_table.meta.iter().enumerate() {
        folds.get_mut(m.group_id.as_ref().unwrap()).unwrap().push(j);
    }

    // Frozen scoring axis from the pooled lane-assigned condition contrast.
    let pooled = condition_groups(&lane_table, aliases)?;
    let axis = condition_axis(&lane_table.data, &pooled);
    let scores = axis_scores(&lane_table.data, &lane_chart.centroid, &axis)?;
    let mut role = vec![0i8; lane_table.n_rows()];
    for &i in &pooled.pos_indices {
        role[i] = 1;
    }
    for &i in &pooled.neg_indices {
        role[i] = -1;
    }

    let mut out = Vec::with_capacity(folds.len());
    for (fold_index, (group, rows)) in folds.into_iter().enumerate() {
        let n_assigned = rows.len();
        let pos: Vec<f64> = rows.iter().filter(|&&i| role[i] == 1).map(|&i| scores[i]).collect();
        let neg: Vec<f64> = rows.iter().filter(|&&i| role[i] == -1).map(|&i| scores[i]).collect();
        let denom_rows: Vec<usize> = rows.iter().copied().filter(|&i| role[i] != 0).collect();

        let scored = if pos.is_empty() || neg.is_empty() {
            None
        } else {
            score_fold(
                &lane_table.subset(&denom_rows).data,
                lane_chart,
                &pos,
                &neg,
                config,
                fold_index,
            )
        };
        out.push(FoldResult {
            held_out_group: group,
            n_assigned,
            scores: scored,
        });
    }
    Ok(out)
}

/// Scores one fold; `None` when the witness chart cannot be refitted
/// (too few rows or a degenerate refit).
fn score_fold(
    denom_points: &DMatrix<f64>,
    lane_chart: &TangentChart,
    pos: &[f64],
    neg: &[f64],
    config: &FoldConfig,
    fold_index: usize,
) -> Option<FoldScores> {
    let fold_chart = estimate_tangent(denom_points, lane_chart.site, &config.chart).ok()?;
    let q = witness_q(lane_chart, &fold_chart, denom_points).ok()?;
    let mut rng = substream_rng(config.seed, STREAM_SURROGATE + fold_index as u64);
    let nu = witness_nu_against_chart(lane_chart, denom_points, &mut rng).ok()?;
    let witness = gate_witness(q, nu, &config.policy);
    Some(FoldScores {
        auc: auc(pos, neg).expect("fold sides checked non-empty"),
        mean_gap: mean_gap(pos, neg).expect("fold sides checked non-empty"),
        q_pass: witness.q_pass,
        nu_pass: witness.nu_pass,
    })
}

/// Aggregate over scored folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSummary {
    pub mean_auc: f64,
    pub mean_gap: f64,
    /// Bootstrap interval over fold gaps (the fold is the resampling unit).
    pub gap_ci: BootstrapCi,
    /// One-sided sign test on positive-gap folds.
    pub sign_p: f64,
    pub q_pass_fraction: f64,
    pub nu_pass_fraction: f64,
    pub n_folds: usize,
    pub n_scored: usize,
}

/// Unweighted aggregation over scored folds; unscored folds count only
/// toward `n_folds`. Input order is irrelevant: folds are sorted by group
/// id before anything is computed.
pub fn aggregate_folds(
    folds: &[FoldResult],
    config: &BootstrapConfig,
    seed: u64,
) -> Result<BridgeSummary> {
    let mut sorted: Vec<&FoldResult> = folds.iter().collect();
    sorted.sort_by(|a, b| a.held_out_group.cmp(&b.held_out_group));
    let scored: Vec<(&FoldResult, FoldScores)> = sorted
        .iter()
        .filter_map(|f| f.scores.map(|s| (*f, s)))
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptyInput {
            what: "scored folds".into(),
        });
    }
    let n = scored.len() as f64;
    let gaps: Vec<f64> = scored.iter().map(|(_, s)| s.mean_gap).collect();
    let positive = gaps.iter().filter(|&&g| g > 0.0).count();
    Ok(BridgeSummary {
        mean_auc: scored.iter().map(|(_, s)| s.auc).sum::<f64>() / n,
        mean_gap: gaps.iter().sum::<f64>() / n,
        gap_ci: bootstrap_mean_ci(&gaps, seed, config)?,
        sign_p: sign_test_one_sided(positive, scored.len())?,
        q_pass_fraction: scored.iter().filter(|(_, s)| s.q_pass).count() as f64 / n,
        nu_pass_fraction: scored.iter().filter(|(_, s)| s.nu_pass).count() as f64 / n,
        n_folds: folds.len(),
        n_scored: scored.len(),
    })
}

/// Union-fit aggregate of a chart family: mean centroid, orthonormalized
/// union of the bases (in atlas order), mean occupancy scale. The spectrum
/// is a flat placeholder (the family's mean eigenvalue) because aggregate
/// charts exist for re-entry geometry, which reads only centroid, basis,
/// and scale; the site is borrowed from the first chart.
pub fn aggregate_chart(charts: &[TangentChart]) -> Result<TangentChart> {
    let first = charts.first().ok_or_else(|| Error::EmptyInput {
        what: "charts to aggregate".into(),
    })?;
    let d = first.dim();
    let mut centroid = DVector::zeros(d);
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut eig_sum = 0.0;
    let mut eig_count = 0usize;
    let mut scale_sum = 0.0;
    let mut n_points = 0usize;
    for c in charts {
        if c.dim() != d {
            return Err(Error::DimMismatch {
                left: d,
                right: c.dim(),
                context: "aggregate chart".into(),
            });
        }
        centroid += &c.centroid;
        scale_sum += c.occupancy_scale_sq;
        n_points += c.n_points;
        eig_sum += c.spectrum.iter().sum::<f64>();
        eig_count += c.spectrum.len();
        for j in 0..c.k() {
            let mut v = c.basis.column(j).clone_owned();
            // Two projection passes for numerical stability.
            for _ in 0..2 {
                for q in &columns {
                    let coef = q.dot(&v);
                    v -= q * coef;
                }
            }
            if v.norm() > 1e-10 {
                let vn = v.norm();
                columns.push(v / vn);
            }
        }
    }
    let k = columns.len();
    let mut basis = DMatrix::zeros(d, k);
    for (j, col) in columns.iter().enumerate() {
        basis.set_column(j, col);
    }
    let mean_eig = eig_sum / eig_count as f64;
    Ok(TangentChart {
        site: first.site,
        centroid: centroid / charts.len() as f64,
        basis,
        spectrum: vec![mean_eig; k],
        occupancy_scale_sq: scale_sum / charts.len() as f64,
        n_points,
    })
}

/// Strict replay closure: the number of rows that pass re-entry both for
/// their assigned chart and for the family-aggregate chart. Unassigned rows
/// never count. This is the strictest composable closure rule.
pub fn strict_replay_closure(atlas: &FrozenAtlas, table: &ActivationTable) -> Result<usize> {
    let assignment = assign_rows(atlas, table)?;
    let aggregate = aggregate_chart(&atlas.charts)?;
    let mut count = 0usize;
    for (i, assigned) in assignment.iter().enumerate() {
        let Some(chart_idx) = assigned else { continue };
        let x = table.data.row(i).transpose();
        let own = reentry_check(&table.meta[i].row_id, &x, &atlas.charts[*chart_idx], atlas);
        if !own.accepted {
            continue;
        }
        let agg = reentry_check(&table.meta[i].row_id, &x, &aggregate, atlas);
        if agg.accepted {
            count += 1;
        }
    }
    Ok(count)
}
