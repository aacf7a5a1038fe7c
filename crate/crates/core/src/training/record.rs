//! Per-run JSON record: enough to reproduce and audit a run from the file alone.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::History;
use super::pipeline::{CropRecord, TrainPlan};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::MetricSummary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Fully resolved command configuration.
    pub config: serde_json::Value,
    pub plan: Option<TrainPlan>,
    /// Training history per trained network, keyed by role.
    pub histories: BTreeMap<String, History>,
    /// Written weight files, relative to the output directory.
    pub checkpoints: BTreeMap<String, String>,
    pub crops: Vec<CropRecord>,
    pub metrics: Option<MetricSummary>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            seed,
            config,
            plan: None,
            histories: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            crops: Vec::new(),
            metrics: None,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Data(format!("run manifest: {e}")))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
