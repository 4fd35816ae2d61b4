//! Tangent-chart estimation and subspace geometry.
//!
//! A tangent chart is a local linear approximation of the activation manifold
//! at one measurement site: a centroid, an orthonormal basis for the leading
//! principal directions, and the variance spectrum along them. Charts are the
//! unit of comparison everywhere else in the crate: witness angles compare
//! chart bases, occupancy metrics compare distributions inside a chart, and
//! the freeze/replay protocol stores charts verbatim.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Site;
use crate::error::{Error, Result};

/// Orthonormality tolerance: a frame whose Gram matrix deviates from the
/// identity by more than this (max absolute entry) is rejected.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

/// Entries below this magnitude are treated as zero when picking the sign
/// convention for a basis column.
const SIGN_EPS: f64 = 1e-12;

/// Configuration for [`estimate_tangent`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartConfig {
    /// Keep the smallest rank whose cumulative explained variance reaches
    /// this fraction.
    pub variance_explained: f64,
    /// Hard cap on the chart rank.
    pub max_tangent_dim: usize,
}

impl Default for ChartConfig {
    fn default() -> Self {
        ChartConfig {
            variance_explained: 0.90,
            max_tangent_dim: 6,
        }
    }
}

/// Local linear chart of the activation manifold at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentChart {
    pub site: Site,
    /// Mean of the points the chart was fitted on (length `dim`).
    pub centroid: DVector<f64>,
    /// `dim x k` orthonormal basis of the leading principal directions.
    pub basis: DMatrix<f64>,
    /// Per-direction variances (PCA eigenvalues), descending, length `k`.
    pub spectrum: Vec<f64>,
    /// Trace of the full sample covariance (sum of *all* eigenvalues, not
    /// just the retained ones). Used to normalise occupancy metrics.
    pub occupancy_scale_sq: f64,
    /// Number of points the chart was fitted on.
    pub n_points: usize,
}

impl TangentChart {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    /// Fraction of total variance captured by the retained directions.
    pub fn explained_fraction(&self) -> f64 {
        if self.occupancy_scale_sq == 0.0 {
            0.0
        } else {
            self.spectrum.iter().sum::<f64>() / self.occupancy_scale_sq
        }
    }
}

/// Fits a tangent chart to `points` (rows are observations) at `site`.
///
/// The basis comes from an SVD of the centred point matrix. The rank is the
/// smallest `r` whose cumulative explained variance reaches
/// `config.variance_explained` (a tie keeps the smaller rank), capped at
/// `config.max_tangent_dim`. Each basis column is sign-fixed so its first
/// coordinate larger than 1e-12 in magnitude is positive, which makes the
/// fit deterministic across runs and row orderings up to SVD round-off.
pub fn estimate_tangent(
    points: &DMatrix<f64>,
    site: Site,
    config: &ChartConfig,
) -> Result<TangentChart> {
    let n = points.nrows();
    let dim = points.ncols();
    if n < 2 {
        return Err(Error::InsufficientSupport { needed: 2, found: n });
    }
    if !(config.variance_explained > 0.0 && config.variance_explained <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance_explained must lie in (0, 1], got {}",
            config.variance_explained
        )));
    }
    if config.max_tangent_dim == 0 {
        return Err(Error::InvalidArgument("max_tangent_dim must be >= 1".into()));
    }

    let centroid = column_means(points);
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= centroid.transpose();
    }

    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested right singular vectors");
    let denom = (n - 1) as f64;
    // Eigenvalues of the sample covariance, descending (nalgebra sorts).
    let eigenvalues: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s * s / denom)
        .collect();
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroVariance { n });
    }

    let target = config.variance_explained * total;
    let mut cum = 0.0;
    let mut k = eigenvalues.len();
    for (i, ev) in eigenvalues.iter().enumerate() {
        cum += ev;
        if cum >= target {
            k = i + 1;
            break;
        }
    }
    let k = k.min(config.max_tangent_dim).min(dim);

    let mut basis = DMatrix::zeros(dim, k);
    for j in 0..k {
        let col = v_t.row(j).transpose();
        basis.column_mut(j).copy_from(&col);
    }
    fix_signs(&mut basis);

    Ok(TangentChart {
        site,
        centroid,
        basis,
        spectrum: eigenvalues[..k].to_vec(),
        occupancy_scale_sq: total,
        n_points: n,
    })
}

/// Flips each column so that its first coordinate with magnitude above
/// `SIGN_EPS` is positive.
fn fix_signs(basis: &mut DMatrix<f64>) {
    for mut col in basis.column_iter_mut() {
        let lead = col.iter().find(|v| v.abs() > SIGN_EPS).copied();
        if let Some(v) = lead {
            if v < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Column-wise mean of a matrix, as a column vector.
pub fn column_means(points: &DMatrix<f64>) -> DVector<f64> {
    let n = points.nrows() as f64;
    DVector::from_iterator(
        points.ncols(),
        points.column_iter().map(|c| c.sum() / n),
    )
}

/// Verifies that `frame` has orthonormal columns within [`ORTHONORMALITY_TOL`].
pub fn check_orthonormal(frame: &DMatrix<f64>) -> Result<()> {
    let gram = frame.transpose() * frame;
    let k = frame.ncols();
    let mut deviation = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let expect = if i == j { 1.0 } else { 0.0 };
            deviation = deviation.max((gram[(i, j)] - expect).abs());
        }
    }
    if deviation > ORTHONORMALITY_TOL {
        return Err(Error::NonOrthonormal {
            deviation,
            tolerance: ORTHONORMALITY_TOL,
        });
    }
    Ok(())
}

/// Principal angles between the column spans of `a` and `b`, in degrees,
/// ascending. Both frames must have orthonormal columns and share an ambient
/// dimension; the result has `min(k_a, k_b)` entries.
///
/// Angles are `acos` of the singular values of `a^T b`, with the values
/// clamped to `[0, 1]` so round-off can never produce NaN.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimMismatch {
            left: a.nrows(),
            right: b.nrows(),
            context: "principal angles ambient dimension".into(),
        });
    }
    check_orthonormal(a)?;
    check_orthonormal(b)?;
    let m = a.transpose() * b;
    let svd = m.svd(false, false);
    let mut sigmas: Vec<f64> = svd.singular_values.iter().copied().collect();
    // Descending singular values give ascending angles.
    sigmas.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(sigmas
        .iter()
        .map(|s| s.clamp(0.0, 1.0).acos().to_degrees())
        .collect())
}

/// Grassmann chordal distance `sqrt(k - ||a^T b||_F^2)` between two
/// equal-rank frames. Equals `sqrt(sum_i sin^2 theta_i)` over the principal
/// angles; zero iff the spans coincide.
pub fn grassmann_chordal(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::RankMismatch {
            left: a.ncols(),
            right: b.ncols(),
            context: "grassmann chordal distance".into(),
        });
    }
    if a.nrows() != b.nrows() {
        return Err(Error::DimMismatch {
            left: a.nrows(),
            right: b.nrows(),
            context: "grassmann chordal ambient dimension".into(),
        });
    }
    check_orthonormal(a)?;
    check_orthonormal(b)?;
    let m = a.transpose() * b;
    let fro_sq: f64 = m.iter().map(|v| v * v).sum();
    Ok((a.ncols() as f64 - fro_sq).max(0.0).sqrt())
}

/// Per-point angles to a chart's tangent plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalAngles {
    pub mean_deg: f64,
    pub max_deg: f64,
    /// Points retained (centred norm above the negligibility cutoff).
    pub n_used: usize,
    /// Points dropped as numerically indistinguishable from the centroid.
    pub n_dropped: usize,
}

/// Angle of each centred point to the chart's tangent plane, summarised as
/// mean and max in degrees.
///
/// For a centred point `v = x - centroid`, the angle is
/// `acos(||B^T v|| / ||v||)`. Points with `||v||` at or below
/// `1e-12 * sqrt(occupancy_scale_sq)` carry no directional information and
/// are dropped (and counted); dropping them, rather than treating 0/0 as
/// zero, keeps degenerate exports from faking perfect tangency.
pub fn empirical_tangent_angles(
    points: &DMatrix<f64>,
    chart: &TangentChart,
) -> Result<EmpiricalAngles> {
    if points.ncols() != chart.dim() {
        return Err(Error::DimMismatch {
            left: points.ncols(),
            right: chart.dim(),
            context: "empirical tangent angles".into(),
        });
    }
    check_orthonormal(&chart.basis)?;
    let cutoff = 1e-12 * chart.occupancy_scale_sq.sqrt();

    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut n_used = 0usize;
    let mut n_dropped = 0usize;
    for row in points.row_iter() {
        let v = row.transpose() - &chart.centroid;
        let norm = v.norm();
        if norm <= cutoff {
            n_dropped += 1;
            continue;
        }
        let proj = chart.basis.transpose() * &v;
        let cos = (proj.norm() / norm).clamp(0.0, 1.0);
        let angle = cos.acos().to_degrees();
        sum += angle;
        max = max.max(angle);
        n_used += 1;
    }
    if n_used == 0 {
        return Err(Error::EmptyInput {
            what: "empirical angle sample (all points at the centroid)".into(),
        });
    }
    Ok(EmpiricalAngles {
        mean_deg: sum / n_used as f64,
        max_deg: max,
        n_used,
        n_dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Span, Surface};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn test_site() -> Site {
        Site::new(24, Span::Reason, Surface::Delta)
    }

    fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    /// Random orthogonal matrix via QR of a Gaussian square matrix.
    fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let g = gaussian_matrix(rng, d, d);
        g.qr().q()
    }

    /// Canonical frame holding coordinate axes `axes` of R^d.
    fn axis_frame(d: usize, axes: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(d, axes.len());
        for (j, &a) in axes.iter().enumerate() {
            m[(a, j)] = 1.0;
        }
        m
    }

    #[test]
    fn recovers_planted_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 6;
        let n = 400;
        // Points on the (e0, e1) plane with balanced in-plane variances so
        // neither direction alone explains 90% of the variance.
        let mut points = DMatrix::zeros(n, d);
        for i in 0..n {
            points[(i, 0)] = 2.0 * rng.sample::<f64, _>(StandardNormal);
            points[(i, 1)] = 1.5 * rng.sample::<f64, _>(StandardNormal);
        }
        let chart = estimate_tangent(&points, test_site(), &ChartConfig::default()).unwrap();
        assert_eq!(chart.k(), 2);
        assert_eq!(chart.n_points, n);
        let truth = axis_frame(d, &[0, 1]);
        let angles = principal_angles(&chart.basis, &truth).unwrap();
        assert!(angles.iter().all(|a| a.abs() < 1e-9), "angles = {angles:?}");
        // Scale equals the trace of the sample covariance, computed directly.
        let c = column_means(&points);
        let direct: f64 = points
            .row_iter()
            .map(|r| (r.transpose() - &c).norm_squared())
            .sum::<f64>()
            / (n - 1) as f64;
        assert_abs_diff_eq!(chart.occupancy_scale_sq, direct, epsilon = 1e-9);
        assert_abs_diff_eq!(chart.explained_fraction(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn variance_threshold_tie_keeps_smaller_rank() {
        // Four points giving a sample covariance of exactly diag(9c, 1c):
        // cumulative fraction at rank 1 is exactly 0.9, so k must be 1.
        let points = DMatrix::from_row_slice(
            4,
            2,
            &[3.0, 0.0, -3.0, 0.0, 0.0, 1.0, 0.0, -1.0],
        );
        let chart = estimate_tangent(&points, test_site(), &ChartConfig::default()).unwrap();
        assert_eq!(chart.k(), 1);
        assert_abs_diff_eq!(chart.explained_fraction(), 0.9, epsilon = 1e-12);

        // Nudge the minor axis up so rank 1 falls short of 0.9: k becomes 2.
        let points = DMatrix::from_row_slice(
            4,
            2,
            &[3.0, 0.0, -3.0, 0.0, 0.0, 1.01, 0.0, -1.01],
        );
        let chart = estimate_tangent(&points, test_site(), &ChartConfig::default()).unwrap();
        assert_eq!(chart.k(), 2);
    }

    #[test]
    fn rank_is_capped_at_max_tangent_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Isotropic 8-D cloud: 90% of variance needs 8 directions, cap wins.
        let points = gaussian_matrix(&mut rng, 600, 8);
        let chart = estimate_tangent(&points, test_site(), &ChartConfig::default()).unwrap();
        assert_eq!(chart.k(), 6);
        assert_eq!(chart.spectrum.len(), 6);
        // Spectrum is descending.
        for w in chart.spectrum.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn degenerate_inputs_error() {
        let one = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            estimate_tangent(&one, test_site(), &ChartConfig::default()),
            Err(Error::InsufficientSupport { needed: 2, found: 1 })
        ));
        let same = DMatrix::from_row_slice(3, 2, &[4.0, 5.0, 4.0, 5.0, 4.0, 5.0]);
        assert!(matches!(
            estimate_tangent(&same, test_site(), &ChartConfig::default()),
            Err(Error::ZeroVariance { n: 3 })
        ));
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points = gaussian_matrix(&mut rng, 50, 4);
        let chart = estimate_tangent(&points, test_site(), &ChartConfig::default()).unwrap();
        for col in chart.basis.column_iter() {
            let lead = col.iter().find(|v| v.abs() > 1e-12).copied().unwrap();
            assert!(lead > 0.0);
        }
        // Negating the data flips no basis signs: same convention applies.
        let neg = -points.clone();
        let chart_neg = estimate_tangent(&neg, test_site(), &ChartConfig::default()).unwrap();
        for (a, b) in chart.basis.iter().zip(chart_neg.basis.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn principal_angles_identity_and_orthogonal() {
        let a = axis_frame(5, &[0, 1]);
        let same = principal_angles(&a, &a).unwrap();
        assert_eq!(same.len(), 2);
        assert!(same.iter().all(|v| v.abs() < 1e-9));

        let b = axis_frame(5, &[2, 3]);
        let orth = principal_angles(&a, &b).unwrap();
        assert!(orth.iter().all(|v| (v - 90.0).abs() < 1e-9));

        // Mixed ranks: result length is the smaller rank.
        let c = axis_frame(5, &[0]);
        assert_eq!(principal_angles(&a, &c).unwrap().len(), 1);
    }

    #[test]
    fn principal_angles_planted_rotation() {
        let d = 7;
        let theta = 33.0f64.to_radians();
        let a = axis_frame(d, &[0, 1]);
        // Rotate the first basis vector by theta towards e4 (outside span(a)).
        let mut b = a.clone();
        b[(0, 0)] = theta.cos();
        b[(4, 0)] = theta.sin();
        let angles = principal_angles(&a, &b).unwrap();
        assert_abs_diff_eq!(angles[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(angles[1], 33.0, epsilon = 1e-9);
    }

    #[test]
    fn principal_angles_rejects_non_orthonormal() {
        let mut a = axis_frame(4, &[0, 1]);
        a[(0, 0)] = 2.0;
        let b = axis_frame(4, &[0, 1]);
        assert!(matches!(
            principal_angles(&a, &b),
            Err(Error::NonOrthonormal { .. })
        ));
        let short = axis_frame(3, &[0]);
        let tall = axis_frame(4, &[0]);
        assert!(matches!(
            principal_angles(&short, &tall),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn grassmann_matches_sine_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 6;
        let r = random_rotation(&mut rng, d);
        let a = r.columns(0, 2).into_owned();
        let r2 = random_rotation(&mut rng, d);
        let b = r2.columns(0, 2).into_owned();
        let dist = grassmann_chordal(&a, &b).unwrap();
        let angles = principal_angles(&a, &b).unwrap();
        let sine_form: f64 = angles
            .iter()
            .map(|deg| deg.to_radians().sin().powi(2))
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(dist, sine_form, epsilon = 1e-9);

        assert_abs_diff_eq!(grassmann_chordal(&a, &a).unwrap(), 0.0, epsilon = 1e-9);
        let e01 = axis_frame(d, &[0, 1]);
        let e23 = axis_frame(d, &[2, 3]);
        assert_abs_diff_eq!(
            grassmann_chordal(&e01, &e23).unwrap(),
            (2.0f64).sqrt(),
            epsilon = 1e-12
        );
        let e0 = axis_frame(d, &[0]);
        assert!(matches!(
            grassmann_chordal(&a, &e0),
            Err(Error::RankMismatch { .. })
        ));
    }

    #[test]
    fn empirical_angles_in_plane_and_out() {
        let d = 4;
        let chart = TangentChart {
            site: test_site(),
            centroid: DVector::zeros(d),
            basis: axis_frame(d, &[0, 1]),
            spectrum: vec![1.0, 1.0],
            occupancy_scale_sq: 2.0,
            n_points: 10,
        };
        // In-plane points: zero angle.
        let inplane = DMatrix::from_row_slice(2, d, &[1.0, 2.0, 0.0, 0.0, -3.0, 0.5, 0.0, 0.0]);
        let res = empirical_tangent_angles(&inplane, &chart).unwrap();
        assert_abs_diff_eq!(res.mean_deg, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(res.max_deg, 0.0, epsilon = 1e-9);
        assert_eq!((res.n_used, res.n_dropped), (2, 0));

        // Orthogonal point: 90 degrees; near-zero point: dropped.
        let mixed = DMatrix::from_row_slice(2, d, &[0.0, 0.0, 2.0, 0.0, 1e-16, 0.0, 0.0, 0.0]);
        let res = empirical_tangent_angles(&mixed, &chart).unwrap();
        assert_abs_diff_eq!(res.max_deg, 90.0, epsilon = 1e-9);
        assert_eq!((res.n_used, res.n_dropped), (1, 1));

        // 45-degree point.
        let diag = DMatrix::from_row_slice(1, d, &[1.0, 0.0, 1.0, 0.0]);
        let res = empirical_tangent_angles(&diag, &chart).unwrap();
        assert_abs_diff_eq!(res.mean_deg, 45.0, epsilon = 1e-9);

        // All points at the centroid: no usable directions.
        let zeros = DMatrix::zeros(3, d);
        assert!(matches!(
            empirical_tangent_angles(&zeros, &chart),
            Err(Error::EmptyInput { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_principal_angles_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let a = random_rotation(&mut rng, d).columns(0, 3).into_owned();
            let b = random_rotation(&mut rng, d).columns(0, 3).into_owned();
            let ab = principal_angles(&a, &b).unwrap();
            let ba = principal_angles(&b, &a).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            // Ascending order and range.
            for w in ab.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
            prop_assert!(ab.iter().all(|v| (0.0..=90.0 + 1e-9).contains(v)));
        }

        #[test]
        fn prop_angles_invariant_under_basis_change(seed in any::<u64>()) {
            // Angles depend on the span only: right-multiplying a frame by a
            // k x k orthogonal matrix must not change them.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let k = 3;
            let a = random_rotation(&mut rng, d).columns(0, k).into_owned();
            let b = random_rotation(&mut rng, d).columns(0, k).into_owned();
            let q = random_rotation(&mut rng, k);
            let before = principal_angles(&a, &b).unwrap();
            let after = principal_angles(&(&a * &q), &b).unwrap();
            for (x, y) in before.iter().zip(&after) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }

        #[test]
        fn prop_grassmann_triangle_inequality(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 5;
            let k = 2;
            let a = random_rotation(&mut rng, d).columns(0, k).into_owned();
            let b = random_rotation(&mut rng, d).columns(0, k).into_owned();
            let c = random_rotation(&mut rng, d).columns(0, k).into_owned();
            let ab = grassmann_chordal(&a, &b).unwrap();
            let bc = grassmann_chordal(&b, &c).unwrap();
            let ac = grassmann_chordal(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
            // Symmetry.
            prop_assert!((ab - grassmann_chordal(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn prop_chart_invariant_to_translation_and_rotation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 5;
            let n = 60;
            let pts = {
                // Anisotropic cloud so the chart is well-defined.
                let mut m = gaussian_matrix(&mut rng, n, d);
                for i in 0..n {
                    m[(i, 0)] *= 3.0;
                    m[(i, 1)] *= 2.0;
                }
                m
            };
            let cfg = ChartConfig::default();
            let base = estimate_tangent(&pts, test_site(), &cfg).unwrap();

            // Translation: same basis and spectrum, shifted centroid.
            let t = DVector::from_fn(d, |_, _| rng.random_range(-4.0..4.0f64));
            let mut shifted = pts.clone();
            for mut row in shifted.row_iter_mut() {
                row += t.transpose();
            }
            let chart_t = estimate_tangent(&shifted, test_site(), &cfg).unwrap();
            prop_assert_eq!(chart_t.k(), base.k());
            prop_assert!((chart_t.occupancy_scale_sq - base.occupancy_scale_sq).abs() < 1e-6);
            let angles = principal_angles(&chart_t.basis, &base.basis).unwrap();
            prop_assert!(angles.iter().all(|a| a.abs() < 1e-5));
            let dc = (&chart_t.centroid - &base.centroid - &t).norm();
            prop_assert!(dc < 1e-9);

            // Rotation: basis rotates with the data, spectrum unchanged.
            let r = random_rotation(&mut rng, d);
            let rotated = &pts * &r; // row vectors x -> x R, i.e. v -> R^T v
            let chart_r = estimate_tangent(&rotated, test_site(), &cfg).unwrap();
            prop_assert_eq!(chart_r.k(), base.k());
            let rotated_basis = r.transpose() * &base.basis;
            let angles = principal_angles(&chart_r.basis, &rotated_basis).unwrap();
            prop_assert!(angles.iter().all(|a| a.abs() < 1e-5), "angles = {:?}", angles);
            for (a, b) in chart_r.spectrum.iter().zip(&base.spectrum) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
