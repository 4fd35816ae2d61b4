//! Activation tables, row metadata, condition aliasing, and input manifests.
//!
//! An activation table is a dense `n_rows x dim` matrix of exported residual
//! activations plus one metadata record per row. The on-disk pairing is a
//! binary activation file and a JSONL metadata file; row `i` of the matrix is
//! described by line `i` of the metadata.
//!
//! Binary activation format (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "ATLG"
//! version u32      1
//! n_rows  u64
//! dim     u64
//! data    n_rows * dim * 8 bytes, f64 LE, row-major
//! ```
//!
//! The reader is strict: wrong magic/version, payload length disagreement,
//! non-finite values, metadata count mismatch, and duplicate row ids are all
//! hard errors. Analysis stages downstream assume a table that loaded at all
//! is fully usable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Magic bytes at the start of every activation file.
pub const ACTIVATION_MAGIC: [u8; 4] = *b"ATLG";
/// The only activation format version this crate reads or writes.
pub const ACTIVATION_VERSION: u32 = 1;

/// Token span a row was pooled over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Span {
    Reason,
    LateReason,
    Answer,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Span::Reason => write!(f, "reason"),
            Span::LateReason => write!(f, "late_reason"),
            Span::Answer => write!(f, "answer"),
        }
    }
}

/// Which side of the hidden-condition contrast a row carries.
///
/// `Delta` marks rows that are already differences of a matched on/off pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    HiddenOn,
    HiddenOff,
    Delta,
}

impl fmt::Display for Surface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Surface::HiddenOn => write!(f, "hidden_on"),
            Surface::HiddenOff => write!(f, "hidden_off"),
            Surface::Delta => write!(f, "delta"),
        }
    }
}

/// Manual review outcome for a row, when a review happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewedLabel {
    Positive,
    Negative,
    Unresolved,
}

/// Role a canonical condition plays in the coupling contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionRole {
    /// Condition expected to carry the signal; its rows form the positive group.
    Informative,
    /// Matched null condition; its rows form the negative group.
    NullControl,
    /// Reported alongside but excluded from the authoritative denominator.
    Comparator,
}

impl fmt::Display for ConditionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionRole::Informative => write!(f, "informative"),
            ConditionRole::NullControl => write!(f, "null_control"),
            ConditionRole::Comparator => write!(f, "comparator"),
        }
    }
}

/// A measurement site: where in the network a row was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub layer: u32,
    pub span: Span,
    pub surface: Surface,
}

impl Site {
    pub fn new(layer: u32, span: Span, surface: Surface) -> Self {
        Site {
            layer,
            span,
            surface,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer={} span={} surface={}",
            self.layer, self.span, self.surface
        )
    }
}

/// Per-row metadata, one JSONL object per activation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub row_id: String,
    pub condition_tag: String,
    pub layer: u32,
    pub span: Span,
    pub surface: Surface,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewed_label: Option<ReviewedLabel>,
    /// Fold unit (e.g. an animal identifier) for held-out protocols.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    /// Paired-question identity, carried through contrasts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    /// Upstream scalar score attached to the row, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signed_score: Option<f64>,
    /// Marks score-flip rows for realization accounting. May only be set when
    /// `reviewed_label` is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_flag: Option<bool>,
}

impl RowMeta {
    /// A row with only the required fields set; optional metadata defaults
    /// to absent.
    pub fn bare(
        row_id: impl Into<String>,
        condition_tag: impl Into<String>,
        layer: u32,
        span: Span,
        surface: Surface,
    ) -> Self {
        RowMeta {
            row_id: row_id.into(),
            condition_tag: condition_tag.into(),
            layer,
            span,
            surface,
            reviewed_label: None,
            group_id: None,
            pair_id: None,
            signed_score: None,
            flip_flag: None,
        }
    }

    pub fn site(&self) -> Site {
        Site::new(self.layer, self.span, self.surface)
    }
}

/// Dense activation matrix plus aligned row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTable {
    /// `n_rows x dim`, row-major semantics (row `i` is one exported vector).
    pub data: DMatrix<f64>,
    pub meta: Vec<RowMeta>,
}

impl ActivationTable {
    /// Builds a table from parts, enforcing the row/meta alignment and
    /// uniqueness invariants that the file reader also enforces.
    pub fn new(data: DMatrix<f64>, meta: Vec<RowMeta>) -> Result<Self> {
        if data.nrows() != meta.len() {
            return Err(Error::MetaCountMismatch {
                path: PathBuf::from("<memory>"),
                n_rows: data.nrows(),
                n_meta: meta.len(),
            });
        }
        for (i, row) in data.row_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
        }
        let mut seen = HashSet::with_capacity(meta.len());
        for m in &meta {
            if !seen.insert(m.row_id.as_str()) {
                return Err(Error::DuplicateRowId {
                    row_id: m.row_id.clone(),
                });
            }
            if m.flip_flag.is_some() && m.reviewed_label.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "row {} sets flip_flag without a reviewed_label",
                    m.row_id
                )));
            }
        }
        Ok(ActivationTable { data, meta })
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Reads the binary activation file and its JSONL metadata companion.
    pub fn read(activations: &Path, metadata: &Path) -> Result<Self> {
        let data = read_activation_matrix(activations)?;
        let meta = read_metadata(metadata)?;
        if meta.len() != data.nrows() {
            return Err(Error::MetaCountMismatch {
                path: metadata.to_path_buf(),
                n_rows: data.nrows(),
                n_meta: meta.len(),
            });
        }
        ActivationTable::new(data, meta)
    }

    /// Writes the binary activation file and JSONL metadata. Values round-trip
    /// bit-exactly (`f64::to_le_bytes` on write, `from_le_bytes` on read).
    pub fn write(&self, activations: &Path, metadata: &Path) -> Result<()> {
        let mut payload =
            Vec::with_capacity(4 + 4 + 8 + 8 + self.n_rows() * self.dim() * 8);
        payload.extend_from_slice(&ACTIVATION_MAGIC);
        payload.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
        payload.extend_from_slice(&(self.n_rows() as u64).to_le_bytes());
        payload.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for i in 0..self.n_rows() {
            for j in 0..self.dim() {
                let v = self.data[(i, j)];
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        atomic_write(activations, &payload)?;

        let mut lines = Vec::new();
        for m in &self.meta {
            let line = serde_json::to_string(m)
                .map_err(|e| Error::json(metadata, e))?;
            lines.extend_from_slice(line.as_bytes());
            lines.push(b'\n');
        }
        atomic_write(metadata, &lines)
    }

    /// Returns the subset of rows at `indices`, preserving the given order.
    pub fn subset(&self, indices: &[usize]) -> ActivationTable {
        let dim = self.dim();
        let mut data = DMatrix::zeros(indices.len(), dim);
        let mut meta = Vec::with_capacity(indices.len());
        for (out, &i) in indices.iter().enumerate() {
            data.row_mut(out).copy_from(&self.data.row(i));
            meta.push(self.meta[i].clone());
        }
        ActivationTable { data, meta }
    }

    /// Indices of rows taken at `site`.
    pub fn rows_at_site(&self, site: Site) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.site() == site)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row index by id, if present.
    pub fn index_of(&self, row_id: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.row_id == row_id)
    }
}

/// Reads just the binary activation matrix, checking the header, the
/// declared row/dim counts against the payload size, and value finiteness.
pub fn read_activation_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 4 + 4 + 8 + 8];
    file.read_exact(&mut header).map_err(|_| Error::MalformedHeader {
        path: path.to_path_buf(),
        detail: "file shorter than the 24-byte header".into(),
    })?;
    if header[..4] != ACTIVATION_MAGIC {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            detail: format!("bad magic {:?}, expected \"ATLG\"", &header[..4]),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != ACTIVATION_VERSION {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}, expected {ACTIVATION_VERSION}"),
        });
    }
    let n_rows = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let dim = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let n_values = n_rows
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            detail: format!("declared size {n_rows} x {dim} overflows"),
        })?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() as u64 != n_values {
        // Report the mismatch in whole rows where possible; a truncated file
        // is the common failure and row counts are what people check first.
        let actual_rows = if dim == 0 { 0 } else { payload.len() as u64 / (dim * 8) };
        return Err(Error::RowCountMismatch {
            path: path.to_path_buf(),
            declared: n_rows,
            actual: actual_rows,
        });
    }

    let (n_rows, dim) = (n_rows as usize, dim as usize);
    let mut data = DMatrix::zeros(n_rows, dim);
    for i in 0..n_rows {
        for j in 0..dim {
            let off = (i * dim + j) * 8;
            let v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
            data[(i, j)] = v;
        }
    }
    Ok(data)
}

/// Reads JSONL row metadata on its own (one object per non-empty line).
pub fn read_metadata(path: &Path) -> Result<Vec<RowMeta>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut meta = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let m: RowMeta = serde_json::from_str(line).map_err(|e| Error::json(path, e))?;
        meta.push(m);
    }
    Ok(meta)
}

/// Writes `bytes` to `path` atomically: write to a sibling temp file, then
/// rename over the target. A crashed run leaves either the old file or the
/// new one, never a torn write.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp.{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Pairs `on` and `off` rows by `row_id` and returns the per-row difference
/// (`on - off`) with surface `delta`.
///
/// Pairing is strict: both tables must hold exactly the same row ids, the
/// same ambient dimension, and matched rows must agree on layer and span.
/// The output keeps the row order of `on`.
pub fn build_contrast(on: &ActivationTable, off: &ActivationTable) -> Result<ActivationTable> {
    if on.dim() != off.dim() {
        return Err(Error::DimMismatch {
            left: on.dim(),
            right: off.dim(),
            context: "contrast inputs".into(),
        });
    }
    let off_index: HashMap<&str, usize> = off
        .meta
        .iter()
        .enumerate()
        .map(|(i, m)| (m.row_id.as_str(), i))
        .collect();
    for m in &off.meta {
        if on.index_of(&m.row_id).is_none() {
            return Err(Error::UnmatchedRow {
                row_id: m.row_id.clone(),
                n_rows: on.n_rows(),
                n_meta: off.n_rows(),
            });
        }
    }

    let mut data = DMatrix::zeros(on.n_rows(), on.dim());
    let mut meta = Vec::with_capacity(on.n_rows());
    for (i, m) in on.meta.iter().enumerate() {
        let j = *off_index.get(m.row_id.as_str()).ok_or_else(|| Error::UnmatchedRow {
            row_id: m.row_id.clone(),
            n_rows: off.n_rows(),
            n_meta: on.n_rows(),
        })?;
        let other = &off.meta[j];
        if other.layer != m.layer || other.span != m.span {
            return Err(Error::InvalidArgument(format!(
                "row {:?} pairs sites that disagree: layer={} span={} vs layer={} span={}",
                m.row_id, m.layer, m.span, other.layer, other.span
            )));
        }
        let diff = on.data.row(i) - off.data.row(j);
        data.row_mut(i).copy_from(&diff);
        let mut out = m.clone();
        out.surface = Surface::Delta;
        meta.push(out);
    }
    ActivationTable::new(data, meta)
}

/// Maps raw export condition tags to canonical condition names and roles.
///
/// Export pipelines tag rows with legacy switch names; analysis works in
/// terms of canonical conditions. Resolution is strict: a tag without an
/// entry, or a canonical name without a role, is an error rather than a
/// silently dropped row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionAliasMap {
    /// raw tag -> canonical condition name
    pub entries: BTreeMap<String, String>,
    /// canonical condition name -> role
    pub roles: BTreeMap<String, ConditionRole>,
}

impl ConditionAliasMap {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        atomic_write(path, text.as_bytes())
    }

    /// Resolves one raw tag to `(canonical_name, role)`.
    pub fn resolve(&self, tag: &str) -> Result<(&str, ConditionRole)> {
        let canonical = self.entries.get(tag).ok_or_else(|| Error::UnmappedTag {
            tag: tag.to_string(),
        })?;
        let role = self.roles.get(canonical).copied().ok_or_else(|| Error::UnmappedTag {
            tag: format!("{canonical} (canonical name has no role)"),
        })?;
        Ok((canonical.as_str(), role))
    }
}

/// Canonical condition name and role for every row of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConditions {
    /// Per row, aligned with the table: (canonical name, role).
    pub rows: Vec<(String, ConditionRole)>,
    /// Row count per canonical condition name.
    pub counts: BTreeMap<String, usize>,
}

/// Resolves every row's condition tag through the alias map.
pub fn resolve_conditions(
    table: &ActivationTable,
    aliases: &ConditionAliasMap,
) -> Result<ResolvedConditions> {
    let mut rows = Vec::with_capacity(table.n_rows());
    let mut counts = BTreeMap::new();
    for m in &table.meta {
        let (canonical, role) = aliases.resolve(&m.condition_tag)?;
        *counts.entry(canonical.to_string()).or_insert(0) += 1;
        rows.push((canonical.to_string(), role));
    }
    Ok(ResolvedConditions { rows, counts })
}

/// Positive/negative row groups for coupling statistics.
///
/// This is the authoritative denominator: positives are rows whose resolved
/// condition role is `informative`, negatives are `null_control` rows.
/// Comparator rows never enter either group. Rows manually reviewed as
/// `unresolved` are excluded (and counted); rows without any review are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionGroups {
    pub pos_indices: Vec<usize>,
    pub neg_indices: Vec<usize>,
    pub excluded_unresolved: usize,
    pub excluded_comparator: usize,
}

impl ConditionGroups {
    pub fn n_pos(&self) -> usize {
        self.pos_indices.len()
    }

    pub fn n_neg(&self) -> usize {
        self.neg_indices.len()
    }
}

/// Splits a table's rows into the authoritative positive/negative groups.
pub fn condition_groups(
    table: &ActivationTable,
    aliases: &ConditionAliasMap,
) -> Result<ConditionGroups> {
    let resolved = resolve_conditions(table, aliases)?;
    let mut groups = ConditionGroups {
        pos_indices: Vec::new(),
        neg_indices: Vec::new(),
        excluded_unresolved: 0,
        excluded_comparator: 0,
    };
    for (i, (m, (_, role))) in table.meta.iter().zip(&resolved.rows).enumerate() {
        if m.reviewed_label == Some(ReviewedLabel::Unresolved) {
            groups.excluded_unresolved += 1;
            continue;
        }
        match role {
            ConditionRole::Informative => groups.pos_indices.push(i),
            ConditionRole::NullControl => groups.neg_indices.push(i),
            ConditionRole::Comparator => groups.excluded_comparator += 1,
        }
    }
    if groups.pos_indices.is_empty() {
        return Err(Error::EmptyInput {
            what: "positive (informative) group".into(),
        });
    }
    if groups.neg_indices.is_empty() {
        return Err(Error::EmptyInput {
            what: "negative (null_control) group".into(),
        });
    }
    Ok(groups)
}

/// Digest record for one input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path as recorded (relative paths are resolved against the manifest's
    /// own directory at verification time).
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Frozen identity of a set of input files.
///
/// `content_hash` commits to the file *names* as well as their bytes: each
/// file contributes `len(path) ++ path ++ len(content) ++ content` (lengths
/// as u64 LE), files sorted by path. Renaming a file therefore changes the
/// hash even if its bytes do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<FileDigest>,
    pub content_hash: String,
}

impl DatasetManifest {
    /// Hashes `paths` (recorded as given) into a manifest.
    pub fn freeze(paths: &[PathBuf]) -> Result<Self> {
        DatasetManifest::freeze_in(Path::new(""), paths)
    }

    /// Hashes `paths` into a manifest, resolving relative paths against
    /// `base_dir` while recording them as given. Recording relative paths
    /// keeps the manifest valid when the dataset directory moves.
    pub fn freeze_in(base_dir: &Path, paths: &[PathBuf]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::EmptyInput {
                what: "manifest file list".into(),
            });
        }
        let mut files = Vec::with_capacity(paths.len());
        for p in paths {
            let resolved = resolve_recorded_path(base_dir, &path_key(p));
            let bytes = fs::read(&resolved).map_err(|e| Error::io(&resolved, e))?;
            files.push(FileDigest {
                path: path_key(p),
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let mut hasher = Sha256::new();
        for f in &files {
            let resolved = resolve_recorded_path(base_dir, &f.path);
            let content = fs::read(&resolved).map_err(|e| Error::io(&resolved, e))?;
            hasher.update((f.path.len() as u64).to_le_bytes());
            hasher.update(f.path.as_bytes());
            hasher.update((content.len() as u64).to_le_bytes());
            hasher.update(&content);
        }
        Ok(DatasetManifest {
            files,
            content_hash: hex::encode(hasher.finalize()),
        })
    }

    /// Re-hashes every referenced file and compares. Relative recorded paths
    /// are resolved against `base_dir`. Any difference is a `hash_mismatch`
    /// refusal naming the offending file.
    pub fn verify(&self, base_dir: &Path) -> Result<()> {
        for f in &self.files {
            let path = resolve_recorded_path(base_dir, &f.path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let found = hex::encode(Sha256::digest(&bytes));
            if found != f.sha256 {
                return Err(Error::HashMismatch {
                    path,
                    expected: f.sha256.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Resolves a path recorded in a manifest against the manifest's directory.
pub fn resolve_recorded_path(base_dir: &Path, recorded: &str) -> PathBuf {
    let p = Path::new(recorded);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

fn path_key(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// SHA-256 of a byte slice as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
