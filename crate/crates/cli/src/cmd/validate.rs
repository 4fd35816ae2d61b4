//! `chartwit validate`: offline checks of file formats, denominators, and
//! alias coverage.
//!
//! Problems are findings, printed one per line on stdout; nothing is
//! refused. The command exits 2 when any finding exists and 0 otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::{json, Value};

use chartwit_core::dataset::read_activation_matrix;
use chartwit_core::{
    condition_groups, ActivationTable, ConditionAliasMap, Error, FoldResult, FreezeManifest,
    Result, RowMeta,
};

use crate::envelope::Envelope;
use crate::Ctx;

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    /// Files to check: .atlg matrices, .jsonl metadata, alias maps, freeze
    /// manifests, and fold results. Matrix/metadata pairs sharing a file
    /// stem are cross-checked, as are alias maps against metadata files.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Finding {
    path: String,
    message: String,
}

#[derive(Debug, Serialize)]
struct Checked {
    path: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<Value>,
}

/// How many per-line findings a single file may contribute before the rest
/// are folded into one summary finding.
const MAX_LINE_FINDINGS: usize = 5;

struct Validator {
    findings: Vec<Finding>,
    checked: Vec<Checked>,
    /// stem -> row count, for matrix/metadata cross-checks.
    matrix_rows: BTreeMap<String, usize>,
    meta_files: Vec<(PathBuf, Vec<RowMeta>)>,
    alias_maps: Vec<(PathBuf, ConditionAliasMap)>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl Validator {
    fn finding(&mut self, path: &Path, message: impl Into<String>) {
        self.findings.push(Finding {
            path: path.display().to_string(),
            message: message.into(),
        });
    }

    fn checked(&mut self, path: &Path, kind: &str, detail: Option<Value>) {
        self.checked.push(Checked {
            path: path.display().to_string(),
            kind: kind.into(),
            detail,
        });
    }

    fn check_matrix(&mut self, path: &Path) {
        match read_activation_matrix(path) {
            Ok(m) => {
                self.matrix_rows.insert(stem(path), m.nrows());
                self.checked(
                    path,
                    "activations",
                    Some(json!({"n_rows": m.nrows(), "dim": m.ncols()})),
                );
            }
            Err(e) => self.finding(path, e.to_string()),
        }
    }

    fn check_metadata(&mut self, path: &Path) {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                self.finding(path, format!("could not read: {e}"));
                return;
            }
        };
        let mut meta = Vec::new();
        let mut bad_lines = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RowMeta>(line) {
                Ok(m) => meta.push(m),
                Err(e) => {
                    bad_lines += 1;
                    if bad_lines <= MAX_LINE_FINDINGS {
                        self.finding(path, format!("line {}: {e}", lineno + 1));
                    }
                }
            }
        }
        if bad_lines > MAX_LINE_FINDINGS {
            self.finding(
                path,
                format!("...and {} more malformed lines", bad_lines - MAX_LINE_FINDINGS),
            );
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &meta {
            if !seen.insert(m.row_id.clone()) {
                self.finding(path, format!("duplicate row id {:?}", m.row_id));
            }
        }
        self.checked(path, "metadata", Some(json!({"n_rows": meta.len()})));
        self.meta_files.push((path.to_path_buf(), meta));
    }

    fn check_json(&mut self, path: &Path) {
        let value: Value = match std::fs::read_to_string(path)
            .map_err(|e| format!("could not read: {e}"))
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(v) => v,
            Err(msg) => {
                self.finding(path, msg);
                return;
            }
        };
        if value.get("entries").is_some() && value.get("roles").is_some() {
            self.check_alias_map(path, value);
        } else if value.get("dataset_manifest").is_some() && value.get("selected").is_some() {
            self.check_freeze_manifest(path, value);
        } else if value.is_array()
            && value
                .get(0)
                .is_some_and(|v| v.get("held_out_group").is_some())
        {
            match serde_json::from_value::<Vec<FoldResult>>(value) {
                Ok(folds) => {
                    self.checked(path, "fold_results", Some(json!({"n_folds": folds.len()})))
                }
                Err(e) => self.finding(path, format!("malformed fold results: {e}")),
            }
        } else {
            self.checked(path, "json", None);
        }
    }

    fn check_alias_map(&mut self, path: &Path, value: Value) {
        let aliases: ConditionAliasMap = match serde_json::from_value(value) {
            Ok(a) => a,
            Err(e) => {
                self.finding(path, format!("malformed alias map: {e}"));
                return;
            }
        };
        for canonical in aliases.entries.values() {
            if !aliases.roles.contains_key(canonical) {
                self.finding(
                    path,
                    format!("canonical condition {canonical:?} has no role"),
                );
            }
        }
        self.checked(
            path,
            "alias_map",
            Some(json!({
                "n_entries": aliases.entries.len(),
                "n_roles": aliases.roles.len(),
            })),
        );
        self.alias_maps.push((path.to_path_buf(), aliases));
    }

    fn check_freeze_manifest(&mut self, path: &Path, value: Value) {
        let manifest: FreezeManifest = match serde_json::from_value(value) {
            Ok(m) => m,
            Err(e) => {
                self.finding(path, format!("malformed freeze manifest: {e}"));
                return;
            }
        };
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        if let Err(e) = manifest.dataset_manifest.verify(&base) {
            self.finding(path, e.to_string());
        }
        match self.realized_denominators(&manifest, &base) {
            Ok((found_pos, found_neg)) => {
                if found_pos != manifest.declared_pos || found_neg != manifest.declared_neg {
                    self.finding(
                        path,
                        format!(
                            "denominator mismatch: declared {}/{} positive/negative rows, \
                             found {found_pos}/{found_neg}",
                            manifest.declared_pos, manifest.declared_neg
                        ),
                    );
                }
            }
            Err(e) => self.finding(path, format!("could not check denominators: {e}")),
        }
        self.checked(
            path,
            "freeze_manifest",
            Some(json!({
                "site": manifest.selected.site,
                "declared_pos": manifest.declared_pos,
                "declared_neg": manifest.declared_neg,
                "n_pinned_files": manifest.dataset_manifest.files.len(),
            })),
        );
    }

    fn realized_denominators(
        &self,
        manifest: &FreezeManifest,
        base: &Path,
    ) -> Result<(usize, usize)> {
        let resolve = |recorded: &str| -> PathBuf {
            let p = Path::new(recorded);
            if p.is_relative() {
                base.join(p)
            } else {
                p.to_path_buf()
            }
        };
        let table = ActivationTable::read(
            &resolve(&manifest.confirmatory_activations),
            &resolve(&manifest.confirmatory_metadata),
        )?;
        let rows = table.rows_at_site(manifest.selected.site);
        if rows.is_empty() {
            return Err(Error::NoRowsAtSite {
                site: manifest.selected.site.to_string(),
            });
        }
        let groups = condition_groups(&table.subset(&rows), &manifest.aliases)?;
        Ok((groups.n_pos(), groups.n_neg()))
    }

    fn cross_checks(&mut self) {
        // Matrix vs metadata row counts, paired by file stem.
        let pairs: Vec<(PathBuf, usize, usize)> = self
            .meta_files
            .iter()
            .filter_map(|(path, meta)| {
                self.matrix_rows
                    .get(&stem(path))
                    .map(|&rows| (path.clone(), meta.len(), rows))
            })
            .collect();
        for (path, n_meta, n_rows) in pairs {
            if n_meta != n_rows {
                self.finding(
                    &path,
                    format!("{n_meta} metadata rows but the matrix holds {n_rows}"),
                );
            }
        }
        // Alias coverage: every tag in every metadata file must resolve.
        let mut unresolved: Vec<(PathBuf, String, String)> = Vec::new();
        for (alias_path, aliases) in &self.alias_maps {
            for (meta_path, meta) in &self.meta_files {
                let mut seen = BTreeMap::new();
                for m in meta {
                    if seen.insert(m.condition_tag.clone(), ()).is_none()
                        && aliases.resolve(&m.condition_tag).is_err()
                    {
                        unresolved.push((
                            meta_path.clone(),
                            m.condition_tag.clone(),
                            alias_path.display().to_string(),
                        ));
                    }
                }
            }
        }
        for (path, tag, alias_path) in unresolved {
            self.finding(
                &path,
                format!("condition tag {tag:?} does not resolve through {alias_path}"),
            );
        }
    }
}

pub fn run(ctx: &Ctx, args: &ValidateArgs) -> Result<u8> {
    let mut v = Validator {
        findings: Vec::new(),
        checked: Vec::new(),
        matrix_rows: BTreeMap::new(),
        meta_files: Vec::new(),
        alias_maps: Vec::new(),
    };
    for path in &args.paths {
        match path.extension().and_then(|e| e.to_str()) {
            Some("atlg") => v.check_matrix(path),
            Some("jsonl") => v.check_metadata(path),
            Some("json") => v.check_json(path),
            _ => v.finding(
                path,
                "unrecognised file type; expected .atlg, .jsonl, or .json",
            ),
        }
    }
    v.cross_checks();

    for f in &v.findings {
        println!("finding: {}: {}", f.path, f.message);
    }
    println!(
        "checked {} files, {} findings",
        v.checked.len(),
        v.findings.len()
    );

    if let Some(out) = &ctx.out {
        let result = json!({"checked": v.checked, "findings": v.findings});
        Envelope::new("validate", ctx.seed, args, None, result)?.emit(Some(out))?;
    }
    Ok(if v.findings.is_empty() { 0 } else { 2 })
}
