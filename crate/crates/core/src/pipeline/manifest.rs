use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::eval::MetricsReport;
use crate::tensor::io::{decode_ptar, write_bytes};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Artifact role → path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Upstream stages this stage read from.
    pub inputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub crate_version: String,
    pub precision: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(run_id: String, config_hash: String, precision: String) -> Self {
        Self {
            run_id,
            config_hash,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            precision,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        write_bytes(
            &run_dir.join(MANIFEST_FILE),
            &serde_json::to_vec_pretty(self)?,
        )
    }

    /// Check every recorded artifact exists and decodes: PTAR archives,
    /// JSON files and metric CSVs.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for (stage, rec) in &self.stages {
            for rel in rec.artifacts.values() {
                let path = run_dir.join(rel);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
                let ok = match ext {
                    "ptar" => decode_ptar::<f64>(&bytes).map(|_| ()),
                    "json" => serde_json::from_slice::<serde_json::Value>(&bytes)
                        .map(|_| ())
                        .map_err(Error::from),
                    "csv" if rel.to_string_lossy().contains("spectrum") => Ok(()),
                    "csv" => MetricsReport::from_csv(&String::from_utf8_lossy(&bytes)).map(|_| ()),
                    _ => Ok(()),
                };
                ok.map_err(|e| Error::Format(format!("stage {stage}: {}: {e}", path.display())))?;
            }
        }
        Ok(())
    }
}
