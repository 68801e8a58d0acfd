use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use urbanform::dataset::PipelineConfig;
use urbanform::metrics::EvalOptions;
use urbanform::raster::write_atomic;
use urbanform::trainer::TrainConfig;

use crate::error::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Every setting of a run. Each section and field is optional in the JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub evaluate: EvalOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Built-in defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        write_atomic(&dir.join(RESOLVED_CONFIG_FILE), self.to_json().as_bytes())?;
        Ok(())
    }
}
