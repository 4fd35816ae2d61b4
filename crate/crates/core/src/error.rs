//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. The variants are
//! deliberately fine-grained: callers (in particular the CLI) route them to
//! distinct exit codes, and replay refusals must carry a machine-readable
//! reason code so that a refusal is auditable after the fact.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Underlying filesystem failure (open, read, write, rename).
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialisation failure for a metadata, manifest, or report file.
    #[error("json failure on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Activation file did not start with the expected magic/version header.
    #[error("malformed activation file {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    /// Declared row/dim counts disagree with the payload length.
    #[error("activation file {path} declares {declared} rows but payload holds {actual}")]
    RowCountMismatch {
        path: PathBuf,
        declared: u64,
        actual: u64,
    },

    /// A NaN or infinity was found in an activation row.
    #[error("non-finite activation value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    /// Metadata and activation rows could not be matched one-to-one.
    #[error("metadata row {row_id:?} has no matching activation row (activations: {n_rows}, metadata: {n_meta})")]
    UnmatchedRow {
        row_id: String,
        n_rows: usize,
        n_meta: usize,
    },

    /// Metadata line count disagrees with the activation row count.
    #[error("metadata file {path} holds {n_meta} rows but the activation file holds {n_rows}")]
    MetaCountMismatch {
        path: PathBuf,
        n_rows: usize,
        n_meta: usize,
    },

    /// A row id appears more than once in one table.
    #[error("duplicate row id {row_id:?}")]
    DuplicateRowId { row_id: String },

    /// Two tables that must share an ambient dimension do not.
    #[error("dimension mismatch: {left} vs {right} ({context})")]
    DimMismatch {
        left: usize,
        right: usize,
        context: String,
    },

    /// A condition tag had no entry in the alias map.
    #[error("condition tag {tag:?} is not covered by the alias map")]
    UnmappedTag { tag: String },

    /// An operation received an empty input it cannot work with.
    #[error("empty input: {what}")]
    EmptyInput { what: String },

    /// Fewer usable points than the chart estimator needs.
    #[error("insufficient support: need at least {needed} points, found {found}")]
    InsufficientSupport { needed: usize, found: usize },

    /// All points coincide; no tangent direction is identifiable.
    #[error("zero variance: all {n} points coincide with the centroid")]
    ZeroVariance { n: usize },

    /// A matrix expected to have orthonormal columns does not.
    #[error("frame is not orthonormal: max Gram deviation {deviation:.3e} exceeds {tolerance:.1e}")]
    NonOrthonormal { deviation: f64, tolerance: f64 },

    /// Grassmann chordal distance requires equal ranks.
    #[error("rank mismatch: {left} vs {right} ({context})")]
    RankMismatch {
        left: usize,
        right: usize,
        context: String,
    },

    /// Energy-distance reference sample has zero mean within-distance.
    #[error("degenerate reference sample: mean within-distance is zero")]
    DegenerateReference,

    /// Occupancy normalisation needs a strictly positive reference scale.
    #[error("non-positive reference scale {scale}")]
    NonPositiveScale { scale: f64 },

    /// Requested orthogonal-complement control does not fit in the ambient space.
    #[error("control rank {k_out} plus chart rank {k} exceeds ambient dimension {dim}")]
    ComplementTooLarge { k: usize, k_out: usize, dim: usize },

    /// No chart is available for a site that the operation requires.
    #[error("no chart available for site {site}")]
    MissingChart { site: String },

    /// A site selection matched no rows.
    #[error("no rows matched site {site}")]
    NoRowsAtSite { site: String },

    /// Fold protocol needs at least two groups.
    #[error("need at least {needed} groups for the fold protocol, found {found}")]
    TooFewGroups { needed: usize, found: usize },

    /// Freeze refused: a confirmatory row id already appeared in discovery.
    /// This is a refusal (reason code `freeze_violation`), not a warning.
    #[error("freeze violation: row id {row_id:?} appears in both discovery and confirmatory sets")]
    FreezeViolation { row_id: String },

    /// Replay refused: on-disk input hash differs from the frozen manifest.
    /// Reason code `hash_mismatch`.
    #[error("hash mismatch for {path}: manifest records {expected}, file hashes to {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    /// Replay refused: realised group sizes differ from the declared
    /// denominators. Reason code `denominator_mismatch`.
    #[error(
        "denominator mismatch: declared {declared_pos} positive / {declared_neg} negative, \
         found {found_pos} / {found_neg}"
    )]
    DenominatorMismatch {
        declared_pos: usize,
        declared_neg: usize,
        found_pos: usize,
        found_neg: usize,
    },

    /// Catch-all for invalid arguments to library entry points.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Stable machine-readable reason code for refusals.
    ///
    /// Returns `Some` only for the three refusal variants; everything else is
    /// an ordinary error. The CLI maps refusals to exit code 3 and prints the
    /// code verbatim so logs can be grepped.
    pub fn refusal_code(&self) -> Option<&'static str> {
        match self {
            Error::HashMismatch { .. } => Some("hash_mismatch"),
            Error::DenominatorMismatch { .. } => Some("denominator_mismatch"),
            Error::FreezeViolation { .. } => Some("freeze_violation"),
            _ => None,
        }
    }

    /// True for errors caused by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    /// Helper to wrap an `std::io::Error` with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Helper to wrap a `serde_json::Error` with the offending path.
    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
