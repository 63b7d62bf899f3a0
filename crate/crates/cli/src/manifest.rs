//! Run manifests: enough metadata to reproduce a run bit-identically.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    pub code_version: String,
    pub metrics_schema: u32,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            command_line: std::env::args().collect(),
            config_hash: config.hash(),
            config: config.clone(),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            metrics_schema: METRICS_SCHEMA,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, result: &Result<(), CliError>) {
        self.finished_at = Some(now());
        match result {
            Ok(()) => self.status = RunStatus::Complete,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n").map_err(CliError::io(dir))
    }

    pub fn read(dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
