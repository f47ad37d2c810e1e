//! Run reports: `report.json` carries `{run_id, config, metrics, reports}`
//! as canonical JSON (sorted keys, trailing newline); `metrics.csv` mirrors
//! the flat metrics. Wall-clock measurements are deliberately never written
//! here so that artifacts stay byte-reproducible across reruns.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use curlib::store::canonical_json;

use crate::error::{CliError, CliResult};

/// First 16 hex digits of the SHA-256 of the canonical config JSON, so
/// identical configurations share a run id across machines and reruns.
pub fn run_id(config: &Value) -> CliResult<String> {
    let canon = canonical_json(config)?;
    let digest = Sha256::digest(canon.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(hex[..16].to_string())
}

#[derive(Serialize)]
pub struct Metric {
    pub name: String,
    pub value: Value,
}

/// A structured sub-report (bound reports, ablation tables, rankings, ...),
/// tagged so consumers can dispatch without guessing at the payload shape.
#[derive(Serialize)]
pub struct SubReport {
    pub kind: String,
    pub data: Value,
}

#[derive(Serialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: Value,
    pub metrics: Vec<Metric>,
    pub reports: Vec<SubReport>,
}

impl RunReport {
    pub fn new(config: Value) -> CliResult<Self> {
        let run_id = run_id(&config)?;
        Ok(RunReport {
            run_id,
            config,
            metrics: Vec::new(),
            reports: Vec::new(),
        })
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) -> CliResult<()> {
        let value = serde_json::to_value(value)
            .map_err(|e| CliError::Config(format!("metric {name}: {e}")))?;
        self.metrics.push(Metric {
            name: name.to_string(),
            value,
        });
        Ok(())
    }

    pub fn sub_report(&mut self, kind: &str, data: impl Serialize) -> CliResult<()> {
        let data = serde_json::to_value(data)
            .map_err(|e| CliError::Config(format!("report {kind}: {e}")))?;
        self.reports.push(SubReport {
            kind: kind.to_string(),
            data,
        });
        Ok(())
    }

    /// Writes `report.json` and `metrics.csv` into `out_dir`.
    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        create_dir(out_dir)?;
        write_file(&out_dir.join("report.json"), canonical_json(self)?.as_bytes())?;
        let mut csv = String::from("name,value\n");
        for m in &self.metrics {
            csv.push_str(&format!("{},{}\n", m.name, m.value));
        }
        write_file(&out_dir.join("metrics.csv"), csv.as_bytes())
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| curlib::Error::io(format!("creating {}", dir.display()), e).into())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes)
        .map_err(|e| curlib::Error::io(format!("writing {}", path.display()), e).into())
}
