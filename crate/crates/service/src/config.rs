use std::path::{Path, PathBuf};

use datr_core::data::SyntheticSpec;
use datr_core::model::{FusionMode, ModelConfig};
use datr_core::retrieval::PipelineConfig;
use datr_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable that overrides the service port.
pub const PORT_ENV: &str = "DATR_PORT";

/// Settings of the HTTP session service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    pub index_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Corpus directory used for video metadata; optional.
    pub corpus_dir: Option<PathBuf>,
    pub k: usize,
    pub m: usize,
    pub stage2: bool,
    pub fusion_mode: FusionMode,
    pub session_ttl_seconds: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            index_path: PathBuf::from("artifacts/index.datri"),
            checkpoint_path: PathBuf::from("artifacts/stage2.datrw"),
            corpus_dir: None,
            k: 100,
            m: 10,
            stage2: true,
            fusion_mode: FusionMode::Full,
            session_ttl_seconds: 1800,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> CliResult<()> {
        if !(self.k >= self.m && self.m >= 1) {
            return Err(CliError::Usage(format!(
                "service needs K >= M >= 1, got K = {} and M = {}",
                self.k, self.m
            )));
        }
        Ok(())
    }

    /// Default per-turn retrieval settings.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            k: self.k,
            m: self.m,
            stage2: self.stage2,
            fusion: self.fusion_mode,
        }
    }
}

/// Everything a run can be configured with; each section falls back to its
/// defaults when absent from the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatrConfig {
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Offline evaluation settings.
    pub pipeline: PipelineConfig,
    pub service: ServiceConfig,
    pub ablation: AblationConfig,
}

impl Default for DatrConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            model: ModelConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::stage2(),
            pipeline: PipelineConfig::default(),
            service: ServiceConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
        }
    }
}

impl DatrConfig {
    pub fn from_toml(text: &str, label: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{label}: {e}")))
    }

    /// Reads a TOML file, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(p.display().to_string(), e))?;
                Self::from_toml(&text, &p.display().to_string())
            }
        }
    }
}
