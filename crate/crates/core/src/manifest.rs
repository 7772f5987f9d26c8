use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Full record of one optimisation run.
///
/// [`crate::optimize`] fills in the optimisation fields; front ends add the
/// command, resolved configuration, input hashes and output paths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub weights_checksum: Option<String>,
    pub seeds: Vec<u64>,
    /// Input name → SHA-256 of the file.
    pub inputs: BTreeMap<String, String>,
    pub objective: serde_json::Value,
    pub optimizer: serde_json::Value,
    pub initial_loss: f64,
    /// Term label → final loss, plus `total`.
    pub final_losses: BTreeMap<String, f64>,
    pub iterations: usize,
    pub converged: bool,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
