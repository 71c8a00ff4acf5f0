use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use bayesphys::losses::LossConfig;
use bayesphys::network::NetConfig;
use bayesphys::trainer::TrainConfig;
use bayesphys::uncertainty::BenchmarkConfig;

use crate::error::CliError;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

/// Every setting of a run. All sections and keys are optional; unknown
/// keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: BenchmarkConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Usage(format!("config: {inner}"))
            } else {
                CliError::Usage(format!("config key {path}: {inner}"))
            }
        })?;
        cfg.train.loss = cfg.loss;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Writes `value` as pretty JSON to `dir/effective_config.json`.
pub fn write_effective<T: Serialize>(dir: &Path, value: &T) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(EFFECTIVE_CONFIG);
    let json = serde_json::to_string_pretty(value).expect("config serializes");
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))
}
