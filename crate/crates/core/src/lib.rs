//! Representational-geometry toolkit: tangent charts, witness metrics,
//! behavioural coupling, and the search/freeze/replay protocol.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: activation tables, row metadata, condition aliases, input
//!   manifests and hashing.
//! - [`chart`]: tangent-chart estimation and subspace geometry.
//! - [`occupancy`]: distribution metrics inside a chart.
//! - [`stats`]: deterministic resampling statistics.
//! - [`witness`]: threshold gates and the claim ladder.
//! - [`controls`]: matched control batteries.
//! - [`freeze`]: candidate search, freezing, and audited replay.
//! - [`bridge`]: held-out fold protocol and re-entry diagnostics.
//! - [`synth`]: synthetic scenario generators with analytic expectations.

pub mod bridge;
pub mod chart;
pub mod controls;
pub mod dataset;
pub mod error;
pub mod freeze;
pub mod occupancy;
pub mod stats;
pub mod synth;
pub mod witness;

pub use bridge::{
    aggregate_chart, aggregate_folds, assign_rows, realization_counts, reentry_check,
    reentry_results, run_folds, strict_replay_closure, BridgeSummary, FoldConfig, FoldResult,
    FoldScores, FrozenAtlas, RealizationCounts, ReentryResult, RejectReason,
};
pub use chart::{
    empirical_tangent_angles, estimate_tangent, grassmann_chordal, principal_angles, ChartConfig,
    EmpiricalAngles, TangentChart,
};
pub use controls::{
    orthogonal_complement_subspace, projection_norm_scores, random_subspace, run_control_battery,
    BatteryContext, ControlKind, ControlOutcome, ControlSpec,
};
pub use dataset::{
    build_contrast, condition_groups, resolve_conditions, ActivationTable, ConditionAliasMap,
    ConditionGroups, ConditionRole, DatasetManifest, FileDigest, ResolvedConditions, ReviewedLabel,
    RowMeta, Site, Span, Surface,
};
pub use error::{Error, Result};
pub use freeze::{
    axis_scores, condition_axis, enumerate_band, freeze, rank_candidates, replay, score_candidates,
    CandidateScore, FreezeInputs, FreezeManifest, ReplayOutcome, SearchConfig, WitnessChartMode,
};
pub use occupancy::{
    energy_distance_norm, gaussian_w2_sq, mean_shift_norm, occ_w2_sq_norm, project_into_chart,
    sample_moments, EnergyDistance, OccupancySample,
};
pub use stats::{
    auc, bootstrap_mean_ci, control_percentile, couple, mean_gap, permutation_p,
    sign_test_one_sided, stratified_bootstrap_ci, substream_rng, BootstrapCi, BootstrapConfig,
    CouplingConfig, CouplingReport, PermutationConfig, PermutationTest,
};
pub use synth::{
    evaluate_pair, generate, generate_target_replicate, grid_scenario, mcq_displacement_scenario,
    planted_frame, synth_aliases, ExpectedOutcome, McqDisplacement, ScenarioEvaluation,
    ScenarioSpec,
};
pub use witness::{
    adjudicate, coupling_positive, gate_witness, witness_nu_against_chart, witness_nu_between,
    witness_q, ClaimVerdict, CouplingGate, ThresholdPolicy, Verdict, WitnessNu, WitnessQ,
    WitnessReport,
};
