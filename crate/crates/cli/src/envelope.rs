//! Report envelopes and JSON file helpers.
//!
//! Every report carries the command name, the seed, the exact configuration
//! the run resolved to, and content digests of its input files, so any
//! archived report can be reproduced by re-running its embedded config.
//! Reports never contain timestamps: identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use chartwit_core::dataset::atomic_write;
use chartwit_core::{
    CandidateScore, DatasetManifest, Error, FrozenAtlas, Result, TangentChart,
};

#[derive(Debug, Serialize)]
pub struct Envelope {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<DatasetManifest>,
    /// Content digests of the stage reports this one was derived from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upstream: Option<BTreeMap<String, String>>,
    pub result: Value,
}

impl Envelope {
    pub fn new(
        command: &str,
        seed: u64,
        config: impl Serialize,
        inputs: Option<DatasetManifest>,
        result: impl Serialize,
    ) -> Result<Envelope> {
        Ok(Envelope {
            command: command.to_string(),
            seed,
            config: to_value(config)?,
            inputs,
            upstream: None,
            result: to_value(result)?,
        })
    }

    /// Pretty JSON plus a trailing newline.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::json(PathBuf::from("<report>"), e))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Writes the report to `out`, or to stdout when no path was given.
    pub fn emit(&self, out: Option<&Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        match out {
            Some(path) => atomic_write(path, &bytes),
            None => std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Error::io("<stdout>", e)),
        }
    }
}

pub fn to_value(v: impl Serialize) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::json(PathBuf::from("<report>"), e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Steps into the `result` field when `v` looks like a report envelope.
pub fn unwrap_report(v: Value) -> Value {
    match v {
        Value::Object(ref m) if m.contains_key("result") && m.contains_key("command") => {
            m["result"].clone()
        }
        other => other,
    }
}

/// Reads a single chart: a bare chart object, an object with a `chart`
/// field, or a tangent report holding exactly one chart.
pub fn read_chart(path: &Path) -> Result<TangentChart> {
    let v = unwrap_report(read_json(path)?);
    let candidate = if let Some(c) = v.get("chart") {
        c.clone()
    } else if let Some(Value::Array(charts)) = v.get("charts") {
        if charts.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "{} holds {} charts; pass a single-site chart",
                path.display(),
                charts.len()
            )));
        }
        charts[0].clone()
    } else {
        v
    };
    serde_json::from_value(candidate).map_err(|e| Error::json(path, e))
}

/// Reads a chart list: a tangent report, a bare array, or a single chart.
pub fn read_charts(path: &Path) -> Result<Vec<TangentChart>> {
    let v = unwrap_report(read_json(path)?);
    let candidate = if let Some(c) = v.get("charts") { c.clone() } else { v };
    match candidate {
        arr @ Value::Array(_) => {
            serde_json::from_value(arr).map_err(|e| Error::json(path, e))
        }
        single => Ok(vec![
            serde_json::from_value(single).map_err(|e| Error::json(path, e))?
        ]),
    }
}

/// Reads a frozen candidate (chart plus scoring axis): a search report or
/// freeze manifest (their `selected` field), or a bare candidate object.
pub fn read_candidate(path: &Path) -> Result<CandidateScore> {
    let v = unwrap_report(read_json(path)?);
    let candidate = if let Some(sel) = v.get("selected") { sel.clone() } else { v };
    serde_json::from_value(candidate).map_err(|e| Error::json(path, e))
}

/// Reads a frozen atlas, or builds the one-chart atlas a freeze manifest
/// implies (its selected candidate's chart, default thresholds).
pub fn read_atlas(path: &Path) -> Result<FrozenAtlas> {
    let v = unwrap_report(read_json(path)?);
    if v.get("dataset_manifest").is_some() {
        let selected: CandidateScore = serde_json::from_value(
            v.get("selected")
                .cloned()
                .unwrap_or(Value::Null),
        )
        .map_err(|e| Error::json(path, e))?;
        return FrozenAtlas::new(vec![selected.chart]);
    }
    serde_json::from_value(v).map_err(|e| Error::json(path, e))
}
