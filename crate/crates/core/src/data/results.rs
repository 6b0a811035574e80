//! Newline-delimited result records: one JSON object per attack outcome,
//! optionally preceded by a config header line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackOutcome;
use crate::error::{Error, Result};

fn default_record_kind() -> String {
    "outcome".into()
}

/// One persisted attack result.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultRecord {
    #[serde(default = "default_record_kind")]
    pub record: String,
    pub method: String,
    pub model: String,
    pub defense: String,
    #[serde(default)]
    pub input_index: Option<usize>,
    #[serde(default)]
    pub true_class: Option<usize>,
    /// Target class for targeted attacks; absent for untargeted.
    pub target: Option<usize>,
    pub success: bool,
    pub flow_tv: Option<f64>,
    pub flow_l2: Option<f64>,
    pub tau: Option<f64>,
    pub seed: u64,
    pub wall_ms: f64,
}

/// Build the persisted record for an outcome.
pub fn outcome_record(o: &AttackOutcome, model: &str, defense: &str, seed: u64) -> ResultRecord {
    ResultRecord {
        record: default_record_kind(),
        method: o.method.name().to_string(),
        model: model.to_string(),
        defense: defense.to_string(),
        input_index: o.input_index,
        true_class: Some(o.goal.true_class()),
        target: o.goal.target(),
        success: o.success,
        flow_tv: o.flow_tv,
        flow_l2: o.flow_l2,
        tau: o.tau,
        seed,
        wall_ms: o.wall_ms,
    }
}

/// Write records as NDJSON; an empty list produces an empty file.
pub fn write_results(records: &[ResultRecord], path: &Path) -> Result<()> {
    write_results_with_header(None, records, path)
}

/// Write records as NDJSON with an optional leading config line
/// (`{"record":"config", ...}`), which readers skip.
pub fn write_results_with_header(
    header: Option<&serde_json::Value>,
    records: &[ResultRecord],
    path: &Path,
) -> Result<()> {
    let mut out = Vec::new();
    if let Some(h) = header {
        let mut obj = serde_json::Map::new();
        obj.insert("record".into(), serde_json::Value::String("config".into()));
        if let serde_json::Value::Object(fields) = h {
            for (k, v) in fields {
                obj.insert(k.clone(), v.clone());
            }
        } else {
            obj.insert("config".into(), h.clone());
        }
        writeln!(out, "{}", serde_json::Value::Object(obj)).expect("vec write");
    }
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).expect("vec write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read outcome records back, skipping config/header lines.
pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            Error::parse(path, lineno as u64, format!("line {}: {e}", lineno + 1))
        })?;
        if value.get("record").and_then(|v| v.as_str()) == Some("config") {
            continue;
        }
        let record: ResultRecord = serde_json::from_value(value).map_err(|e| {
            Error::parse(path, lineno as u64, format!("line {}: {e}", lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(success: bool) -> ResultRecord {
        ResultRecord {
            record: "outcome".into(),
            method: "stadv".into(),
            model: "A".into(),
            defense: "none".into(),
            input_index: Some(3),
            true_class: Some(7),
            target: Some(2),
            success,
            flow_tv: Some(0.01),
            flow_l2: Some(0.05),
            tau: Some(0.05),
            seed: 7,
            wall_ms: 123.0,
        }
    }

    #[test]
    fn empty_list_writes_an_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ndjson");
        write_results(&[], &p).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 0);
        assert!(read_results(&p).unwrap().is_empty());
    }

    #[test]
    fn one_record_round_trips_field_complete() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ndjson");
        let rec = sample(true);
        write_results(std::slice::from_ref(&rec), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        for field in [
            "method", "model", "defense", "target", "success", "flow_tv", "flow_l2", "tau",
            "seed", "wall_ms",
        ] {
            assert!(text.contains(&format!("\"{field}\"")), "missing {field}: {text}");
        }
        let back = read_results(&p).unwrap();
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn config_header_is_skipped_by_the_reader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ndjson");
        let header = serde_json::json!({"seed": 7, "method": "stadv"});
        write_results_with_header(Some(&header), &[sample(true), sample(false)], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"record\":\"config\""));
        let back = read_results(&p).unwrap();
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn malformed_lines_are_hard_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ndjson");
        fs::write(&p, "{\"record\":\"outcome\", nope}\n").unwrap();
        assert!(read_results(&p).is_err());
    }
}
