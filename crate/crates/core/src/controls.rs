//! Control suite: matched nulls for the behavioural-coupling claim.
//!
//! A positive coupling at the frozen site means little unless it beats
//! matched controls. Four families are generated here:
//!
//! - `null_labels`: keep the frozen chart and scorer, permute the condition
//!   labels (breaks behaviour linkage, preserves geometry);
//! - `random_subspace`: score by projection onto a random frame of the same
//!   rank (breaks geometry, preserves rank);
//! - `orthogonal_complement`: score by projection onto a frame orthogonal to
//!   the frozen basis (maximally wrong geometry);
//! - `nearby_same_span`: score with a real chart from a different layer at
//!   the same span (plausible-but-wrong geometry).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chart::{check_orthonormal, principal_angles, TangentChart};
use crate::dataset::{ActivationTable, ConditionGroups, Site, Span};
use crate::error::{Error, Result};
use crate::freeze::axis_scores;
use crate::stats::{couple, substream_rng, CouplingConfig, CouplingReport, STREAM_CONTROLS};

/// Which control family to run, with its own seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    NullLabels,
    RandomSubspace,
    OrthogonalComplement,
    NearbySameSpan,
}

/// One control job. `site` is required for `nearby_same_span` (a layer/span
/// pair distinct from the frozen site's layer but sharing its span) and
/// ignored otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub kind: ControlKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<(u32, Span)>,
}

/// Everything a battery run needs besides the specs themselves.
#[derive(Debug, Clone)]
pub struct BatteryContext<'a> {
    /// Frozen condition-difference axis (ambient space).
    pub axis: &'a DVector<f64>,
    /// Authoritative positive/negative row split of `data`.
    pub groups: &'a ConditionGroups,
    /// Charts available to `nearby_same_span` controls.
    pub nearby_charts: &'a [TangentChart],
    /// Resampling configuration for each control's coupling report.
    pub coupling: CouplingConfig,
}

/// One control's full result. `basis_angle_mean_deg` is the mean principal
/// angle of the control frame against the frozen basis (absent for label
/// permutations, which keep the frozen geometry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlOutcome {
    pub spec: ControlSpec,
    pub report: CouplingReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_angle_mean_deg: Option<f64>,
}

/// Orthonormal `d x k` frame drawn rotation-invariantly (QR of a standard
/// Gaussian matrix). Deterministic given the seed.
pub fn random_subspace(d: usize, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "random subspace rank {k} must lie in 1..={d}"
        )));
    }
    let mut rng = substream_rng(seed, STREAM_CONTROLS);
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q().columns(0, k).into_owned();
    check_orthonormal(&q)?;
    Ok(q)
}

/// Orthonormal `d x k_out` frame orthogonal to every column of `basis`
/// (all principal angles exactly 90 degrees), random within the complement.
pub fn orthogonal_complement_subspace(
    basis: &DMatrix<f64>,
    k_out: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    check_orthonormal(basis)?;
    let d = basis.nrows();
    let k = basis.ncols();
    if k + k_out > d {
        return Err(Error::ComplementTooLarge { k, k_out, dim: d });
    }
    if k_out == 0 {
        return Err(Error::InvalidArgument("complement rank must be >= 1".into()));
    }
    let mut rng = substream_rng(seed, STREAM_CONTROLS);
    let g = DMatrix::from_fn(d, k_out, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Remove the basis components, then orthonormalize what is left.
    let residual = &g - basis * (basis.transpose() * &g);
    let q = residual.qr().q().columns(0, k_out).into_owned();
    // One more projection pass tightens orthogonality against round-off
    // introduced by the QR.
    let refined = &q - basis * (basis.transpose() * &q);
    let q = refined.qr().q().columns(0, k_out).into_owned();
    check_orthonormal(&q)?;
    Ok(q)
}

/// Row scores as projection norms onto a frame, after centring: one
/// nonnegative score per row of `points`.
pub fn projection_norm_scores(
    points: &DMatrix<f64>,
    centroid: &DVector<f64>,
    frame: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    if points.ncols() != centroid.len() || points.ncols() != frame.nrows() {
        return Err(Error::DimMismatch {
            left: points.ncols(),
            right: frame.nrows(),
            context: "projection norm scores".into(),
        });
    }
    Ok(points
        .row_iter()
        .map(|row| (frame.transpose() * (row.transpose() - centroid)).norm())
        .collect())
}

/// Runs every control in `specs` against the frozen chart and returns one
/// outcome per spec, in the listed order. Each outcome embeds its seed, so
/// re-running the battery reproduces every report bit-exactly.
pub fn run_control_battery(
    frozen_chart: &TangentChart,
    data: &ActivationTable,
    specs: &[ControlSpec],
    ctx: &BatteryContext<'_>,
) -> Result<Vec<ControlOutcome>> {
    if specs.is_empty() {
        return Err(Error::EmptyInput {
            what: "control spec list".into(),
        });
    }
    if ctx.groups.n_pos() == 0 || ctx.groups.n_neg() == 0 {
        return Err(Error::EmptyInput {
            what: "control battery denominator".into(),
        });
    }
    specs
        .iter()
        .map(|spec| run_one_control(frozen_chart, data, *spec, ctx))
        .collect()
}

fn run_one_control(
    frozen: &TangentChart,
    data: &ActivationTable,
    spec: ControlSpec,
    ctx: &BatteryContext<'_>,
) -> Result<ControlOutcome> {
    let take = |indices: &[usize], scores: &[f64]| -> Vec<f64> {
        indices.iter().map(|&i| scores[i]).collect()
    };
    let (pos_scores, neg_scores, angle_mean) = match spec.kind {
        ControlKind::NullLabels => {
            // Frozen geometry, shuffled behaviour: permute which rows of the
            // pooled denominator count as positive.
            let scores = axis_scores(&data.data, &frozen.centroid, ctx.axis)?;
            let mut pooled: Vec<usize> = ctx
                .groups
                .pos_indices
                .iter()
                .chain(ctx.groups.neg_indices.iter())
                .copied()
                .collect();
            let mut rng = substream_rng(spec.seed, STREAM_CONTROLS);
            // Fisher-Yates via the rand adapter keeps this reproducible.
            use rand::seq::SliceRandom;
            pooled.shuffle(&mut rng);
            let n_pos = ctx.groups.n_pos();
            let pos: Vec<f64> = pooled[..n_pos].iter().map(|&i| scores[i]).collect();
            let neg: Vec<f64> = pooled[n_pos..].iter().map(|&i| scores[i]).collect();
            (pos, neg, None)
        }
        ControlKind::RandomSubspace => {
            let frame = random_subspace(frozen.dim(), frozen.k(), spec.seed)?;
            let scores = projection_norm_scores(&data.data, &frozen.centroid, &frame)?;
            let angles = principal_angles(&frame, &frozen.basis)?;
            let mean = angles.iter().sum::<f64>() / angles.len() as f64;
            (
                take(&ctx.groups.pos_indices, &scores),
                take(&ctx.groups.neg_indices, &scores),
                Some(mean),
            )
        }
        ControlKind::OrthogonalComplement => {
            let frame = orthogonal_complement_subspace(&frozen.basis, frozen.k(), spec.seed)?;
            let scores = projection_norm_scores(&data.data, &frozen.centroid, &frame)?;
            let angles = principal_angles(&frame, &frozen.basis)?;
            let mean = angles.iter().sum::<f64>() / angles.len() as f64;
            (
                take(&ctx.groups.pos_indices, &scores),
                take(&ctx.groups.neg_indices, &scores),
                Some(mean),
            )
        }
        ControlKind::NearbySameSpan => {
            let (layer, span) = spec.site.ok_or_else(|| {
                Error::InvalidArgument("nearby_same_span control needs a (layer, span) site".into())
            })?;
            if span != frozen.site.span || layer == frozen.site.layer {
                return Err(Error::InvalidArgument(format!(
                    "nearby control site (layer={layer}, span={span}) must differ in layer \
                     and share span {} with the frozen site",
                    frozen.site.span
                )));
            }
            let want = Site::new(layer, span, frozen.site.surface);
            let chart = ctx
                .nearby_charts
                .iter()
                .find(|c| c.site == want)
                .ok_or_else(|| Error::MissingChart {
                    site: want.to_string(),
                })?;
            let scores = projection_norm_scores(&data.data, &chart.centroid, &chart.basis)?;
            let angles = principal_angles(&chart.basis, &frozen.basis)?;
            let mean = angles.iter().sum::<f64>() / angles.len() as f64;
            (
                take(&ctx.groups.pos_indices, &scores),
                take(&ctx.groups.neg_indices, &scores),
                Some(mean),
            )
        }
    };
    let report = couple(&pos_scores, &neg_scores, spec.seed, &ctx.coupling)?;
    Ok(ControlOutcome {
        spec,
        report,
        basis_angle_mean_deg: angle_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::{estimate_tangent, ChartConfig};
    use crate::dataset::{RowMeta, Surface};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_frame(d: usize, axes: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(d, axes.len());
        for (j, &a) in axes.iter().enumerate() {
            m[(a, j)] = 1.0;
        }
        m
    }

    #[test]
    fn random_subspace_is_orthonormal_and_deterministic() {
        let a = random_subspace(10, 3, 42).unwrap();
        let b = random_subspace(10, 3, 42).unwrap();
        assert_eq!(a, b);
        check_orthonormal(&a).unwrap();
        let c = random_subspace(10, 3, 43).unwrap();
        assert_ne!(a, c);
        assert!(random_subspace(3, 4, 0).is_err());

        // Full-rank frame spans everything: angles to any frame are zero.
        let full = random_subspace(4, 4, 7).unwrap();
        let probe = axis_frame(4, &[1, 3]);
        let angles = principal_angles(&full, &probe).unwrap();
        assert!(angles.iter().all(|a| a.abs() < 1e-7), "{angles:?}");
    }

    #[test]
    fn random_frames_concentrate_near_ninety_degrees() {
        // In high ambient dimension, independent low-rank frames are nearly
        // orthogonal: mean principal angle above 80 degrees.
        let d = 512;
        let k = 6;
        let mut mean_sum = 0.0;
        let draws = 100;
        for s in 0..draws {
            let a = random_subspace(d, k, 1000 + s).unwrap();
            let b = random_subspace(d, k, 5000 + s).unwrap();
            let angles = principal_angles(&a, &b).unwrap();
            mean_sum += angles.iter().sum::<f64>() / angles.len() as f64;
        }
        let grand_mean = mean_sum / draws as f64;
        assert!(grand_mean > 80.0, "mean angle {grand_mean}");
    }

    #[test]
    fn orthogonal_complement_is_exactly_orthogonal() {
        let basis = axis_frame(8, &[0, 1, 2]);
        let comp = orthogonal_complement_subspace(&basis, 3, 9).unwrap();
        let angles = principal_angles(&comp, &basis).unwrap();
        for a in &angles {
            assert_abs_diff_eq!(*a, 90.0, epsilon = 1e-9);
        }
        // D=3, basis e1, k_out=2: the complement is forced to span {e2,e3}.
        // acos is ill-conditioned at cosine 1, so aligned frames read as a
        // few microdegrees rather than exactly zero.
        let b1 = axis_frame(3, &[0]);
        let comp = orthogonal_complement_subspace(&b1, 2, 4).unwrap();
        let e23 = axis_frame(3, &[1, 2]);
        let angles = principal_angles(&comp, &e23).unwrap();
        assert!(angles.iter().all(|a| a.abs() < 1e-4), "{angles:?}");
        // Too large: k + k_out > D.
        assert!(matches!(
            orthogonal_complement_subspace(&basis, 6, 0),
            Err(Error::ComplementTooLarge { .. })
        ));
    }

    /// Synthetic separable table: positives shifted along e0, chart spans
    /// (e0, e1), signal entirely inside the frozen basis.
    fn separable_fixture(seed: u64) -> (TangentChart, ActivationTable, ConditionGroups, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let n_per = 32;
        let mut data = DMatrix::zeros(2 * n_per, d);
        let mut meta = Vec::new();
        for i in 0..2 * n_per {
            let positive = i < n_per;
            data[(i, 0)] = rng.sample::<f64, _>(StandardNormal) + if positive { 3.0 } else { -3.0 };
            data[(i, 1)] = 1.5 * rng.sample::<f64, _>(StandardNormal);
            meta.push(RowMeta::bare(
                format!("r{i}"),
                if positive { "on" } else { "off" },
                4,
                Span::Reason,
                Surface::Delta,
            ));
        }
        let table = ActivationTable::new(data, meta).unwrap();
        let chart = estimate_tangent(
            &table.data,
            Site::new(4, Span::Reason, Surface::Delta),
            &ChartConfig::default(),
        )
        .unwrap();
        let groups = ConditionGroups {
            pos_indices: (0..n_per).collect(),
            neg_indices: (n_per..2 * n_per).collect(),
            excluded_unresolved: 0,
            excluded_comparator: 0,
        };
        let mut axis = DVector::zeros(d);
        axis[0] = 6.0;
        (chart, table, groups, axis)
    }

    fn quick_coupling() -> CouplingConfig {
        CouplingConfig {
            bootstrap: crate::stats::BootstrapConfig {
                replicates: 200,
                alpha: 0.05,
            },
            permutation: crate::stats::PermutationConfig {
                permutations: 199,
                exhaustive_limit: 10,
            },
        }
    }

    #[test]
    fn battery_runs_all_kinds_and_is_reproducible() {
        let (chart, table, groups, axis) = separable_fixture(3);
        // A second chart at a different layer, same span, for the nearby kind.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut other = DMatrix::zeros(40, 8);
        for i in 0..40 {
            other[(i, 2)] = rng.sample::<f64, _>(StandardNormal);
            other[(i, 3)] = rng.sample::<f64, _>(StandardNormal);
        }
        let nearby = estimate_tangent(
            &other,
            Site::new(6, Span::Reason, Surface::Delta),
            &ChartConfig::default(),
        )
        .unwrap();
        let ctx = BatteryContext {
            axis: &axis,
            groups: &groups,
            nearby_charts: std::slice::from_ref(&nearby),
            coupling: quick_coupling(),
        };
        let specs = vec![
            ControlSpec { kind: ControlKind::NullLabels, seed: 1, site: None },
            ControlSpec { kind: ControlKind::RandomSubspace, seed: 2, site: None },
            ControlSpec { kind: ControlKind::OrthogonalComplement, seed: 3, site: None },
            ControlSpec {
                kind: ControlKind::NearbySameSpan,
                seed: 4,
                site: Some((6, Span::Reason)),
            },
        ];
        let outcomes = run_control_battery(&chart, &table, &specs, &ctx).unwrap();
        assert_eq!(outcomes.len(), 4);
        // Order-stable by spec, seeds embedded.
        for (o, s) in outcomes.iter().zip(&specs) {
            assert_eq!(o.spec, *s);
            assert_eq!(o.report.seed, s.seed);
        }
        // Orthogonal control reports 90-degree mean angle.
        assert_abs_diff_eq!(outcomes[2].basis_angle_mean_deg.unwrap(), 90.0, epsilon = 1e-9);
        // Bit-exact reproduction.
        let again = run_control_battery(&chart, &table, &specs, &ctx).unwrap();
        assert_eq!(outcomes, again);
    }

    #[test]
    fn null_labels_center_at_half_on_separable_data() {
        let (chart, table, groups, axis) = separable_fixture(8);
        let ctx = BatteryContext {
            axis: &axis,
            groups: &groups,
            nearby_charts: &[],
            coupling: quick_coupling(),
        };
        let mut sum = 0.0;
        let n_seeds = 50;
        for s in 0..n_seeds {
            let specs = [ControlSpec {
                kind: ControlKind::NullLabels,
                seed: s,
                site: None,
            }];
            let out = run_control_battery(&chart, &table, &specs, &ctx).unwrap();
            sum += out[0].report.auc;
        }
        let mean_auc = sum / n_seeds as f64;
        assert!(
            (mean_auc - 0.5).abs() < 0.05,
            "null AUC mean {mean_auc} strays from 0.5"
        );
    }

    #[test]
    fn orthogonal_control_near_chance_when_signal_in_basis() {
        let (chart, table, groups, axis) = separable_fixture(5);
        let ctx = BatteryContext {
            axis: &axis,
            groups: &groups,
            nearby_charts: &[],
            coupling: quick_coupling(),
        };
        let specs = [ControlSpec {
            kind: ControlKind::OrthogonalComplement,
            seed: 11,
            site: None,
        }];
        let out = run_control_battery(&chart, &table, &specs, &ctx).unwrap();
        // Signal lives inside the frozen basis; its orthogonal complement
        // sees pure noise.
        assert!(
            (out[0].report.auc - 0.5).abs() < 0.2,
            "orthogonal AUC {}",
            out[0].report.auc
        );
        // The frozen site itself separates essentially perfectly.
        let frozen_scores = axis_scores(&table.data, &chart.centroid, &axis).unwrap();
        let pos: Vec<f64> = groups.pos_indices.iter().map(|&i| frozen_scores[i]).collect();
        let neg: Vec<f64> = groups.neg_indices.iter().map(|&i| frozen_scores[i]).collect();
        assert!(crate::stats::auc(&pos, &neg).unwrap() > 0.99);
    }

    #[test]
    fn nearby_control_validation() {
        let (chart, table, groups, axis) = separable_fixture(2);
        let ctx = BatteryContext {
            axis: &axis,
            groups: &groups,
            nearby_charts: &[],
            coupling: quick_coupling(),
        };
        // Same layer as frozen: invalid.
        let bad = [ControlSpec {
            kind: ControlKind::NearbySameSpan,
            seed: 0,
            site: Some((4, Span::Reason)),
        }];
        assert!(run_control_battery(&chart, &table, &bad, &ctx).is_err());
        // Different span: invalid.
        let bad = [ControlSpec {
            kind: ControlKind::NearbySameSpan,
            seed: 0,
            site: Some((6, Span::Answer)),
        }];
        assert!(run_control_battery(&chart, &table, &bad, &ctx).is_err());
        // Valid site but no chart available: MissingChart.
        let missing = [ControlSpec {
            kind: ControlKind::NearbySameSpan,
            seed: 0,
            site: Some((6, Span::Reason)),
        }];
        assert!(matches!(
            run_control_battery(&chart, &table, &missing, &ctx),
            Err(Error::MissingChart { .. })
        ));
    }
}
