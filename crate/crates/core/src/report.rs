//! Versioned, line-oriented JSON report documents.
//!
//! Objects are indented one key per line; flat records (such as per-epoch
//! rows) and scalar arrays are written compactly on a single line so the
//! epoch table diffs row by row.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::trainer::TrainReport;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// Input path, or `"synthetic"`.
    pub source: String,
    pub shape: Vec<usize>,
    pub entries: usize,
    pub train_entries: usize,
    pub validation_entries: usize,
    pub test_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub dataset: DatasetSummary,
    /// Settings that were not given explicitly and took built-in defaults.
    pub defaulted_settings: Vec<String>,
    /// One block per trained rank.
    pub results: Vec<TrainReport>,
}

impl ReportDocument {
    pub fn new(dataset: DatasetSummary, results: Vec<TrainReport>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset,
            defaulted_settings: Vec::new(),
            results,
        }
    }
}

pub fn report_to_string(doc: &ReportDocument) -> Result<String> {
    let value = serde_json::to_value(doc).map_err(|e| Error::Report(e.to_string()))?;
    let mut out = String::new();
    write_value(&mut out, &value, 0, false)?;
    out.push('\n');
    Ok(out)
}

pub fn parse_report(text: &str) -> Result<ReportDocument> {
    let doc: ReportDocument = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Report(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    Ok(doc)
}

pub fn write_report(doc: &ReportDocument, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_to_string(doc)?).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ReportDocument> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_report(&text)
}

fn is_flat(value: &Value) -> bool {
    match value {
        Value::Array(items) => items.iter().all(|v| !v.is_array() && !v.is_object()),
        Value::Object(map) => map
            .values()
            .all(|v| (!v.is_object() && !v.is_array()) || is_short_scalar_array(v)),
        _ => true,
    }
}

fn is_short_scalar_array(value: &Value) -> bool {
    matches!(value, Value::Array(items) if items.len() <= 8 && items.iter().all(|v| !v.is_array() && !v.is_object()))
}

fn compact(value: &Value) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Report(e.to_string()))
}

fn write_value(out: &mut String, value: &Value, depth: usize, in_array: bool) -> Result<()> {
    let pad = "  ".repeat(depth + 1);
    let close = "  ".repeat(depth);
    match value {
        Value::Object(map) if !map.is_empty() && !(in_array && is_flat(value)) => {
            out.push_str("{\n");
            for (i, (key, v)) in map.iter().enumerate() {
                let _ = write!(out, "{pad}{}: ", compact(&Value::String(key.clone()))?);
                write_value(out, v, depth + 1, false)?;
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            let _ = write!(out, "{close}}}");
        }
        Value::Array(items) if !items.is_empty() && !is_flat(value) => {
            out.push_str("[\n");
            for (i, v) in items.iter().enumerate() {
                out.push_str(&pad);
                write_value(out, v, depth + 1, true)?;
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            let _ = write!(out, "{close}]");
        }
        other => out.push_str(&compact(other)?),
    }
    Ok(())
}
