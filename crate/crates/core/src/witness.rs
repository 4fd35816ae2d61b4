//! Witness gating, support scoring, and claim-ladder adjudication.
//!
//! The witness has two halves. The q metrics ask whether two sites share a
//! tangent structure (basis principal angles between charts, plus per-point
//! empirical angles of the confirmatory sample against the frozen chart).
//! The nu metrics ask whether the occupancy inside the shared plane also
//! matches. A claim must additionally survive behavioural coupling and a
//! control battery; the four booleans feed a fixed claim ladder.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::chart::{empirical_tangent_angles, principal_angles, TangentChart};
use crate::error::{Error, Result};
use crate::occupancy::{
    energy_distance_norm, gaussian_w2_sq, mean_shift_norm, occ_w2_sq_norm, project_into_chart,
    sample_moments, OccupancySample,
};
use crate::stats::{quantile, CouplingReport};

/// Canonical retained thresholds for structural support, plus the coupling
/// and control gates. All comparisons are inclusive (`<=` / `>=`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub basis_mean_max_deg: f64,
    pub basis_max_max_deg: f64,
    pub emp_mean_max_deg: f64,
    pub emp_max_max_deg: f64,
    pub occ_w2_max: f64,
    pub energy_max: f64,
    /// Coupling passes only when AUC >= 0.5 + this margin.
    pub coupling_auc_margin: f64,
    /// Controls are clean when the observed AUC exceeds this quantile of the
    /// control AUC distribution.
    pub control_percentile_min: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            basis_mean_max_deg: 35.0,
            basis_max_max_deg: 70.0,
            emp_mean_max_deg: 35.0,
            emp_max_max_deg: 70.0,
            occ_w2_max: 0.55,
            energy_max: 0.65,
            coupling_auc_margin: 0.05,
            control_percentile_min: 0.95,
        }
    }
}

/// Chart-agreement (q) metrics, all in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessQ {
    pub basis_mean_deg: f64,
    pub basis_max_deg: f64,
    pub emp_mean_deg: f64,
    pub emp_max_deg: f64,
}

/// Occupancy-agreement (nu) metrics. `mean_shift_norm` is reported but never
/// gated; the raw energy estimator is kept for diagnostics when it was
/// clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessNu {
    pub occ_w2_sq_norm: f64,
    pub energy_distance_norm: f64,
    pub mean_shift_norm: f64,
    #[serde(default)]
    pub energy_raw: f64,
    #[serde(default)]
    pub energy_clamped: bool,
}

/// Gated witness metrics plus the continuous support score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    pub q: WitnessQ,
    pub nu: WitnessNu,
    pub q_pass: bool,
    pub nu_pass: bool,
    /// Mean over the six gated metrics of `clamp(1 - value/threshold, 0, 1)`.
    pub support_score: f64,
}

/// Applies the threshold policy to witness metrics.
///
/// q passes when all four angle metrics are at or under their thresholds;
/// nu passes when both occupancy metrics are. The support score averages the
/// clamped margins of the six gated metrics, so it is 1.0 for a perfect
/// match and degrades monotonically as any metric grows.
pub fn gate_witness(q: WitnessQ, nu: WitnessNu, policy: &ThresholdPolicy) -> WitnessReport {
    let q_pass = q.basis_mean_deg <= policy.basis_mean_max_deg
        && q.basis_max_deg <= policy.basis_max_max_deg
        && q.emp_mean_deg <= policy.emp_mean_max_deg
        && q.emp_max_deg <= policy.emp_max_max_deg;
    let nu_pass =
        nu.occ_w2_sq_norm <= policy.occ_w2_max && nu.energy_distance_norm <= policy.energy_max;
    let margin = |value: f64, threshold: f64| (1.0 - value / threshold).clamp(0.0, 1.0);
    let support_score = [
        margin(q.basis_mean_deg, policy.basis_mean_max_deg),
        margin(q.basis_max_deg, policy.basis_max_max_deg),
        margin(q.emp_mean_deg, policy.emp_mean_max_deg),
        margin(q.emp_max_deg, policy.emp_max_max_deg),
        margin(nu.occ_w2_sq_norm, policy.occ_w2_max),
        margin(nu.energy_distance_norm, policy.energy_max),
    ]
    .iter()
    .sum::<f64>()
        / 6.0;
    WitnessReport {
        q,
        nu,
        q_pass,
        nu_pass,
        support_score,
    }
}

/// Final rung of the claim ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ExactIdentity,
    Redistribution,
    LocalisationWithoutClosure,
    NoSupport,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::ExactIdentity => write!(f, "exact_identity"),
            Verdict::Redistribution => write!(f, "redistribution"),
            Verdict::LocalisationWithoutClosure => write!(f, "localisation_without_closure"),
            Verdict::NoSupport => write!(f, "no_support"),
        }
    }
}

/// Verdict plus the four booleans it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimVerdict {
    pub verdict: Verdict,
    pub q_pass: bool,
    pub nu_pass: bool,
    pub coupling_positive: bool,
    pub controls_clean: bool,
}

/// Pure claim ladder:
///
/// - `exact_identity` iff q ∧ nu ∧ coupling ∧ controls
/// - `redistribution` iff q ∧ ¬nu ∧ coupling ∧ controls
/// - `localisation_without_closure` iff q ∧ (¬coupling ∨ ¬controls)
/// - `no_support` iff ¬q
pub fn adjudicate(
    q_pass: bool,
    nu_pass: bool,
    coupling_positive: bool,
    controls_clean: bool,
) -> ClaimVerdict {
    let verdict = if !q_pass {
        Verdict::NoSupport
    } else if !(coupling_positive && controls_clean) {
        Verdict::LocalisationWithoutClosure
    } else if nu_pass {
        Verdict::ExactIdentity
    } else {
        Verdict::Redistribution
    };
    ClaimVerdict {
        verdict,
        q_pass,
        nu_pass,
        coupling_positive,
        controls_clean,
    }
}

/// Coupling and control gate flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGate {
    /// AUC at least `0.5 + margin` and mean gap positive.
    pub coupling_positive: bool,
    /// Observed AUC exceeds the configured quantile of the control AUCs.
    pub controls_clean: bool,
    /// Set when the control list was empty: `controls_clean` then defaults
    /// to true but must be read as unverified.
    pub controls_empty_warning: bool,
}

/// Gates a coupling report against the policy and a control AUC battery.
pub fn coupling_positive(
    report: &CouplingReport,
    control_aucs: &[f64],
    policy: &ThresholdPolicy,
) -> CouplingGate {
    let positive = report.auc >= 0.5 + policy.coupling_auc_margin && report.mean_gap > 0.0;
    if control_aucs.is_empty() {
        return CouplingGate {
            coupling_positive: positive,
            controls_clean: true,
            controls_empty_warning: true,
        };
    }
    let cutoff = quantile(control_aucs, policy.control_percentile_min)
        .expect("nonempty control list");
    CouplingGate {
        coupling_positive: positive,
        controls_clean: report.auc > cutoff,
        controls_empty_warning: false,
    }
}

/// Computes the q metrics of `candidate` against a frozen chart: principal
/// angles between the two bases, and empirical angles of the candidate's
/// points against the frozen chart's plane.
pub fn witness_q(
    frozen: &TangentChart,
    candidate: &TangentChart,
    candidate_points: &DMatrix<f64>,
) -> Result<WitnessQ> {
    let basis_angles = principal_angles(&frozen.basis, &candidate.basis)?;
    let basis_mean = basis_angles.iter().sum::<f64>() / basis_angles.len() as f64;
    let basis_max = basis_angles.iter().copied().fold(0.0f64, f64::max);
    let emp = empirical_tangent_angles(candidate_points, frozen)?;
    Ok(WitnessQ {
        basis_mean_deg: basis_mean,
        basis_max_deg: basis_max,
        emp_mean_deg: emp.mean_deg,
        emp_max_deg: emp.max_deg,
    })
}

/// Computes the nu metrics between two point sets, both expressed in the
/// *source* chart's coordinates. The source sample is the reference for all
/// normalisers.
pub fn witness_nu_between(
    source: &TangentChart,
    source_points: &DMatrix<f64>,
    target_points: &DMatrix<f64>,
) -> Result<WitnessNu> {
    let x = project_into_chart(source_points, source)?;
    let y = project_into_chart(target_points, source)?;
    let energy = energy_distance_norm(&x, &y)?;
    Ok(WitnessNu {
        occ_w2_sq_norm: occ_w2_sq_norm(&x, &y)?,
        energy_distance_norm: energy.normalized,
        mean_shift_norm: mean_shift_norm(&x, &y)?,
        energy_raw: energy.raw,
        energy_clamped: energy.clamped,
    })
}

/// Computes the nu metrics of a point set against a frozen chart when the
/// original fitting sample is no longer available (the replay case).
///
/// The chart itself serves as the reference distribution: a Gaussian in
/// chart coordinates with mean zero and diagonal covariance given by the
/// chart's spectrum. W2 and mean shift use that surrogate in closed form;
/// the energy distance compares against a seeded surrogate draw (at least
/// [`SURROGATE_MIN_POINTS`] points, or the target size if larger), which
/// keeps replays bit-deterministic.
pub fn witness_nu_against_chart(
    frozen: &TangentChart,
    target_points: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<WitnessNu> {
    let y = project_into_chart(target_points, frozen)?;
    let (my, cy) = sample_moments(&y)?;
    let k = frozen.k();
    let m0 = DVector::zeros(k);
    let c0 = DMatrix::from_diagonal(&DVector::from_iterator(
        k,
        frozen.spectrum.iter().copied(),
    ));
    let w2 = gaussian_w2_sq(&m0, &c0, &my, &cy)? / frozen.occupancy_scale_sq;
    let n_ref = SURROGATE_MIN_POINTS.max(y.n());
    let x = surrogate_sample(frozen, n_ref, rng)?;
    let energy = energy_distance_norm(&x, &y)?;
    Ok(WitnessNu {
        occ_w2_sq_norm: w2,
        energy_distance_norm: energy.normalized,
        mean_shift_norm: my.norm() / frozen.occupancy_scale_sq.sqrt(),
        energy_raw: energy.raw,
        energy_clamped: energy.clamped,
    })
}

/// Minimum surrogate-sample size for chart-referenced energy distance.
pub const SURROGATE_MIN_POINTS: usize = 512;

/// Draws `n` points from the chart's Gaussian surrogate (mean zero,
/// covariance `diag(spectrum)`) in chart coordinates.
pub fn surrogate_sample(
    chart: &TangentChart,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<OccupancySample> {
    if n < 2 {
        return Err(Error::InsufficientSupport { needed: 2, found: n });
    }
    let k = chart.k();
    let stds: Vec<f64> = chart.spectrum.iter().map(|v| v.max(0.0).sqrt()).collect();
    let coords = DMatrix::from_fn(n, k, |_, j| stds[j] * rng.sample::<f64, _>(StandardNormal));
    OccupancySample::new(coords, chart.occupancy_scale_sq)
}
