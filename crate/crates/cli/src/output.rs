//! Result-document assembly. JSON key order is deterministic (sorted maps),
//! so identical `(config, seed)` runs produce byte-identical files except
//! for the `timestamp_unix` field.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

use crate::config::ExperimentConfig;
use crate::{CliError, Format};

pub struct CommandOutput {
    pub results: Value,
    /// `Some(true/false)` for verifier commands, `None` for plain reports.
    pub verdict: Option<bool>,
    /// `(file stem, csv text)` time series to emit in csv/both mode.
    pub csv: Vec<(String, String)>,
}

pub fn write_output(
    out_dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    out: &CommandOutput,
    format: Format,
) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", out_dir.display())))?;

    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut doc = Map::new();
    doc.insert("command".into(), json!(command));
    doc.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    doc.insert("timestamp_unix".into(), json!(timestamp));
    doc.insert("seed".into(), json!(cfg.seed().unwrap_or_default()));
    doc.insert("config".into(), json!(cfg.raw()));
    doc.insert("config_hash".into(), json!(cfg.hash()));
    doc.insert(
        "verdict".into(),
        match out.verdict {
            Some(true) => json!("pass"),
            Some(false) => json!("fail"),
            None => Value::Null,
        },
    );
    doc.insert("results".into(), out.results.clone());

    let json_path = out_dir.join(format!("{command}.json"));
    let text = serde_json::to_string_pretty(&Value::Object(doc))
        .map_err(|e| CliError::config(format!("serialization failed: {e}")))?;
    std::fs::write(&json_path, text + "\n")
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", json_path.display())))?;

    if matches!(format, Format::Csv | Format::Both) {
        for (stem, csv) in &out.csv {
            let csv_path = out_dir.join(format!("{stem}.csv"));
            std::fs::write(&csv_path, csv).map_err(|e| {
                CliError::config(format!("cannot write {}: {e}", csv_path.display()))
            })?;
        }
    }
    Ok(json_path)
}
