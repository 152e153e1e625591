//! The JSON run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::FlowParams;
use crate::infusenet::ModelConfig;
use crate::magnify::MagConfig;
use crate::synth::CorpusConfig;
use crate::train::TrainConfig;

/// File name of the echoed, fully resolved configuration.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error at line {line}, column {column}: {msg}\n  | {context}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
        context: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The `eval` section: seeds and sweeps used by the ablation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds averaged by the fusion ablation.
    pub ablation_seeds: Vec<u64>,
    /// Magnification factors swept by the factor ablation.
    pub factors: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ablation_seeds: vec![0, 1, 2],
            factors: vec![5.0, 10.0, 15.0, 20.0],
        }
    }
}

/// The `paths` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Run directory; every stage writes into a subdirectory of it.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub flow: FlowParams,
    pub magnify: MagConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |section: &str, e: &dyn std::fmt::Display| ConfigError::Invalid(format!("{section}: {e}"));
        self.corpus.validate().map_err(|e| bad("corpus", &e))?;
        self.flow.validate().map_err(|e| bad("flow", &e))?;
        self.magnify.validate().map_err(|e| bad("magnify", &e))?;
        self.model.validate().map_err(|e| bad("model", &e))?;
        self.train.validate().map_err(|e| bad("train", &e))?;
        if self.eval.ablation_seeds.is_empty() {
            return Err(bad("eval", &"ablation_seeds must not be empty"));
        }
        if self.eval.factors.is_empty() {
            return Err(bad("eval", &"factors must not be empty"));
        }
        for &a in &self.eval.factors {
            let m = MagConfig {
                alpha: a,
                ..self.magnify
            };
            m.validate().map_err(|e| bad("eval", &e))?;
        }
        let side = 1usize << self.model.blocks;
        if self.corpus.height % side != 0 || self.corpus.width % side != 0 {
            return Err(bad(
                "corpus",
                &format!(
                    "{}x{} frames are not divisible by 2^{} as the model requires",
                    self.corpus.height, self.corpus.width, self.model.blocks
                ),
            ));
        }
        Ok(())
    }

    /// Parses JSON text, applying defaults and validating.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let line = e.line();
            let context = text.lines().nth(line.saturating_sub(1)).unwrap_or("").trim_end().to_string();
            ConfigError::Parse {
                line,
                column: e.column(),
                msg: e.to_string(),
                context,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with every key spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Writes the resolved config into `dir`, creating it if needed.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<PathBuf, ConfigError> {
        let dir = dir.as_ref();
        let io = |source| ConfigError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_json()).map_err(io)?;
        Ok(path)
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_json(&text)
}
