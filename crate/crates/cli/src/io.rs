//! File formats: JSONL with a provenance header line, JSON summaries, and
//! atomic writes.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use editdiff_core::{EditCase, Image};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const TOOL_NAME: &str = "editdiff";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const STAGE2_FILE: &str = "stage2.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const GT_VERDICTS_FILE: &str = "gt_verdicts.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const EVAL_DETECT_FILE: &str = "eval_detect.json";
pub const EVAL_PIPELINE_FILE: &str = "eval_pipeline.json";
pub const RANKING_FILE: &str = "ranking.json";
pub const RANKING_CSV: &str = "ranking.csv";
pub const CORRELATION_FILE: &str = "correlation.json";
pub const CORRELATION_CSV: &str = "correlation.csv";
pub const REPORT_FILE: &str = "report.txt";

pub fn summary_file(command: &str) -> String {
    format!("{command}.summary.json")
}

pub fn calls_file(command: &str) -> String {
    format!("calls.{command}.jsonl")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), sorted(&m[k]))).collect())
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    sorted(v).to_string()
}

/// Identifies the tool, settings and input behind an output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
}

impl Provenance {
    pub fn new(command: &str, config_hash: &str, dataset_hash: Option<&str>) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            config_hash: config_hash.into(),
            dataset_hash: dataset_hash.map(str::to_string),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    provenance: Provenance,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, provenance: &Provenance, records: &[T]) -> Result<()> {
    let mut out = serde_json::to_string(&HeaderLine {
        provenance: provenance.clone(),
    })
    .expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| CliError::Other(e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Writes `{"provenance": ..., <body fields>}` as pretty JSON.
pub fn write_summary<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<()> {
    let mut v = serde_json::to_value(body).map_err(|e| CliError::Other(e.to_string()))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| CliError::Other("summary body must be an object".into()))?;
    obj.insert(
        "provenance".into(),
        serde_json::to_value(provenance).expect("provenance"),
    );
    let mut text = serde_json::to_string_pretty(&v).expect("summary serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_summary<T: DeserializeOwned>(path: &Path) -> Result<(Provenance, T)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let schema = |message: String| CliError::Schema {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let v: Value = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    let prov: Provenance = serde_json::from_value(v.get("provenance").cloned().unwrap_or(Value::Null))
        .map_err(|e| schema(format!("provenance: {e}")))?;
    let body: T = serde_json::from_value(v).map_err(|e| schema(e.to_string()))?;
    Ok((prov, body))
}

/// Reads a JSONL file written by [`write_jsonl`].
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Provenance, Vec<T>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let schema = |line: usize, message: String| CliError::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let (i, first) = lines
        .next()
        .ok_or_else(|| schema(1, "missing provenance header".into()))?;
    let header: HeaderLine =
        serde_json::from_str(first).map_err(|e| schema(i + 1, format!("bad provenance header: {e}")))?;
    let records = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| schema(i + 1, e.to_string())))
        .collect::<Result<Vec<T>>>()?;
    Ok((header.provenance, records))
}

/// Reads plain JSONL without a header. Blank lines are skipped; errors name
/// the 1-based line.
pub fn read_plain_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let hash = sha256_hex(&bytes);
    let text = String::from_utf8(bytes).map_err(|e| CliError::Schema {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<T>>>()?;
    Ok((records, hash))
}

/// Evaluation cases and the dataset hash (SHA-256 of the file bytes).
pub fn load_cases(path: &Path) -> Result<(Vec<EditCase>, String)> {
    let (cases, hash): (Vec<EditCase>, String) = read_plain_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for (i, c) in cases.iter().enumerate() {
        let schema = |message: String| CliError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        c.validate().map_err(|e| schema(e.to_string()))?;
        if !seen.insert(c.case_id.as_str()) {
            return Err(schema(format!("duplicate case_id {}", c.case_id)));
        }
    }
    Ok((cases, hash))
}

/// Resolves an image reference: a `file://` URI, an absolute path, or a path
/// relative to `base`.
pub fn resolve_image_ref(base: &Path, reference: &str) -> Result<PathBuf> {
    if let Some(rest) = reference.strip_prefix("file://") {
        // file:///abs and file://localhost/abs
        let rest = rest.strip_prefix("localhost").unwrap_or(rest);
        return Ok(PathBuf::from(rest));
    }
    if let Some((scheme, _)) = reference.split_once("://") {
        return Err(CliError::Config(format!(
            "unsupported image reference scheme {scheme}://"
        )));
    }
    let p = Path::new(reference);
    Ok(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
}

/// Loads a case's images and checks their size against the case.
pub fn load_case_images(base: &Path, case: &EditCase) -> Result<(Image, Image)> {
    let load = |r: &str| -> Result<Image> {
        let p = resolve_image_ref(base, r)?;
        let img = Image::open(&p)?;
        if (img.width(), img.height()) != (case.width, case.height) {
            return Err(CliError::Other(format!(
                "{}: image is {}x{}, case declares {}x{}",
                p.display(),
                img.width(),
                img.height(),
                case.width,
                case.height
            )));
        }
        Ok(img)
    };
    Ok((load(&case.original_image)?, load(&case.edited_image)?))
}
