//! JSON configuration files. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use rrtls::harness::{ExperimentSpec, Family, RankPolicy};
use rrtls::tls::QMode;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// System matrix file (`H`, or `H̃` for the tls families).
    pub h: PathBuf,
    /// Observation file, `N 1`.
    pub y: PathBuf,
    pub family: Family,
    #[serde(default)]
    pub sigma2: Option<f64>,
    #[serde(default = "auto")]
    pub rank: RankPolicy,
    /// Defaults to an unknown parameter norm treated as zero.
    #[serde(default)]
    pub tls_mode: Option<QMode>,
}

fn auto() -> RankPolicy {
    RankPolicy::Auto
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub experiment: ExperimentSpec,
    /// Values of `θᵀθ` at which the rank-q minimizers are compared.
    #[serde(default)]
    pub theta_grid: Option<Vec<f64>>,
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

/// Resolves file references relative to the config file's directory.
pub fn resolve(config: &Path, file: &Path) -> PathBuf {
    if file.is_absolute() {
        file.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(file)
    }
}
