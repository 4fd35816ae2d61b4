//! Occupancy metrics: how a sample fills a tangent chart.
//!
//! Matching tangent planes is necessary but not sufficient for two sites to
//! host the same structure; the distributions *inside* the shared plane must
//! also match. This module compares occupancy with two complementary
//! distances, both dimensionless after normalisation by the reference
//! sample's source scale:
//!
//! - a Gaussian-surrogate squared 2-Wasserstein distance (moment-level), and
//! - an energy distance (distribution-level, catches non-Gaussian shape).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::chart::TangentChart;

/// Points expressed in a chart's coordinates, tagged with the squared scale
/// of the chart that defined the frame (used to normalise metrics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancySample {
    /// `n x k` coordinates.
    pub coords: DMatrix<f64>,
    /// Squared occupancy scale of the source chart; strictly positive.
    pub source_scale_sq: f64,
}

impl OccupancySample {
    pub fn new(coords: DMatrix<f64>, source_scale_sq: f64) -> Result<Self> {
        if !(source_scale_sq > 0.0) {
            return Err(Error::NonPositiveScale {
                scale: source_scale_sq,
            });
        }
        for (i, row) in coords.row_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(OccupancySample {
            coords,
            source_scale_sq,
        })
    }

    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    pub fn k(&self) -> usize {
        self.coords.ncols()
    }
}

/// Centres `points` on the chart's centroid and expresses them in the chart
/// basis. The sample inherits the chart's occupancy scale.
pub fn project_into_chart(
    points: &DMatrix<f64>,
    chart: &TangentChart,
) -> Result<OccupancySample> {
    if points.ncols() != chart.dim() {
        return Err(Error::DimMismatch {
            left: points.ncols(),
            right: chart.dim(),
            context: "projection into chart".into(),
        });
    }
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= chart.centroid.transpose();
    }
    OccupancySample::new(centered * &chart.basis, chart.occupancy_scale_sq)
}

/// Sample mean and (n-1)-normalised sample covariance of an occupancy sample.
pub fn sample_moments(sample: &OccupancySample) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::InsufficientSupport { needed: 2, found: n });
    }
    let k = sample.k();
    let mean = DVector::from_iterator(
        k,
        sample.coords.column_iter().map(|c| c.sum() / n as f64),
    );
    let mut centered = sample.coords.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Squared 2-Wasserstein distance between two Gaussians:
/// `||m_x - m_y||^2 + tr(C_x + C_y - 2 (C_x^{1/2} C_y C_x^{1/2})^{1/2})`.
///
/// Covariances are symmetrised before eigendecomposition and eigenvalues are
/// clamped at zero, so nearly-singular sample covariances cannot produce NaN.
pub fn gaussian_w2_sq(
    mean_x: &DVector<f64>,
    cov_x: &DMatrix<f64>,
    mean_y: &DVector<f64>,
    cov_y: &DMatrix<f64>,
) -> Result<f64> {
    let k = mean_x.len();
    if mean_y.len() != k || cov_x.nrows() != k || cov_y.nrows() != k {
        return Err(Error::DimMismatch {
            left: k,
            right: mean_y.len(),
            context: "gaussian w2 moments".into(),
        });
    }
    let sqrt_cx = psd_sqrt(cov_x);
    let inner = &sqrt_cx * cov_y * &sqrt_cx;
    let cross = psd_trace_sqrt(&inner);
    let mean_term = (mean_x - mean_y).norm_squared();
    let trace_term = cov_x.trace() + cov_y.trace() - 2.0 * cross;
    // The Bures term is non-negative in exact arithmetic; round-off can push
    // it marginally below zero.
    Ok(mean_term + trace_term.max(-0.0).max(0.0))
}

/// Symmetric PSD square root via eigendecomposition, clamping negative
/// eigenvalues (round-off) to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (j, ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Trace of the PSD square root of a (nearly) symmetric matrix.
fn psd_trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|ev| ev.max(0.0).sqrt())
        .sum()
}

/// Gaussian-surrogate squared W2 between two occupancy samples, normalised by
/// the reference (`x`) sample's source scale.
pub fn occ_w2_sq_norm(x: &OccupancySample, y: &OccupancySample) -> Result<f64> {
    if x.k() != y.k() {
        return Err(Error::DimMismatch {
            left: x.k(),
            right: y.k(),
            context: "occupancy w2 coordinates".into(),
        });
    }
    let (mx, cx) = sample_moments(x)?;
    let (my, cy) = sample_moments(y)?;
    Ok(gaussian_w2_sq(&mx, &cx, &my, &cy)? / x.source_scale_sq)
}

/// Energy-distance result. `normalized` is the gated value; `raw` keeps the
/// unclamped estimator for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyDistance {
    /// `max(raw, 0) / within_x`, the value the witness gates on.
    pub normalized: f64,
    /// Unclamped estimator `2 E||x-y|| - E||x-x'|| - E||y-y'||`.
    pub raw: f64,
    /// True when the raw estimator went negative and was clamped.
    pub clamped: bool,
    /// Mean within-sample distance of the reference sample `x`.
    pub within_x: f64,
    /// Mean within-sample distance of `y`.
    pub within_y: f64,
    /// Mean cross distance.
    pub cross: f64,
}

/// Energy distance between two occupancy samples, normalised by the
/// reference sample's mean within-distance.
///
/// Within-sample means exclude self-pairs. The population energy distance is
/// non-negative, but the plug-in estimator can dip below zero on finite
/// samples; the normalised value clamps at zero and records the excursion.
pub fn energy_distance_norm(x: &OccupancySample, y: &OccupancySample) -> Result<EnergyDistance> {
    if x.k() != y.k() {
        return Err(Error::DimMismatch {
            left: x.k(),
            right: y.k(),
            context: "energy distance coordinates".into(),
        });
    }
    let (n, m) = (x.n(), y.n());
    if n < 2 {
        return Err(Error::InsufficientSupport { needed: 2, found: n });
    }
    if m < 2 {
        return Err(Error::InsufficientSupport { needed: 2, found: m });
    }

    let within_x = mean_pairwise_within(&x.coords);
    if within_x == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let within_y = mean_pairwise_within(&y.coords);
    let cross = mean_pairwise_cross(&x.coords, &y.coords);
    let raw = 2.0 * cross - within_x - within_y;
    let clamped = raw < 0.0;
    Ok(EnergyDistance {
        normalized: raw.max(0.0) / within_x,
        raw,
        clamped,
        within_x,
        within_y,
        cross,
    })
}

fn mean_pairwise_within(coords: &DMatrix<f64>) -> f64 {
    let n = coords.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        let ri = coords.row(i);
        for j in (i + 1)..n {
            sum += (ri - coords.row(j)).norm();
        }
    }
    // Mean over unordered distinct pairs equals the mean over ordered pairs
    // excluding self-pairs.
    sum / (n as f64 * (n as f64 - 1.0) / 2.0)
}

fn mean_pairwise_cross(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut sum = 0.0;
    for ra in a.row_iter() {
        for rb in b.row_iter() {
            sum += (ra - rb).norm();
        }
    }
    sum / (a.nrows() as f64 * b.nrows() as f64)
}

/// Distance between the two sample means, normalised by the reference
/// sample's source scale. Reported for context; never gated.
pub fn mean_shift_norm(x: &OccupancySample, y: &OccupancySample) -> Result<f64> {
    if x.k() != y.k() {
        return Err(Error::DimMismatch {
            left: x.k(),
            right: y.k(),
            context: "mean shift coordinates".into(),
        });
    }
    if x.n() == 0 || y.n() == 0 {
        return Err(Error::EmptyInput {
            what: "mean shift sample".into(),
        });
    }
    let mean = |s: &OccupancySample| {
        DVector::from_iterator(
            s.k(),
            s.coords.column_iter().map(|c| c.sum() / s.n() as f64),
        )
    };
    Ok((mean(x) - mean(y)).norm() / x.source_scale_sq.sqrt())
}
