//! Run configuration: TOML file, flag overrides (flags win), env for
//! secrets. The resolved configuration is hashed into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use squill_core::executor::DEFAULT_TIMEOUT_MS;
use squill_core::llm::{Backend, HttpBackend, MockBackend};
use squill_core::mcp::McpOptions;
use squill_core::sqlkit::RefinementStrategy;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("no backend configured: set backend.mock_script or backend.endpoint+model")]
    NoBackend,
    #[error("ambiguous backend: both mock_script and endpoint are set")]
    TwoBackends,
    #[error("backend script error: {0}")]
    Script(#[from] squill_core::llm::LlmError),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    /// Path to a line-delimited mock script; mutually exclusive with
    /// `endpoint`.
    pub mock_script: Option<PathBuf>,
    /// OpenAI-compatible chat-completions URL.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McpConfig {
    pub enable_sl: bool,
    pub enable_nc: bool,
    pub enable_cw: bool,
    pub refinement_strategy: RefinementStrategy,
    pub oracle_schema: bool,
    pub oracle_hint: bool,
    pub timeout_ms: u64,
    pub example_rows: usize,
}

impl Default for McpConfig {
    fn default() -> Self {
        let defaults = McpOptions::default();
        McpConfig {
            enable_sl: defaults.enable_sl,
            enable_nc: defaults.enable_nc,
            enable_cw: defaults.enable_cw,
            refinement_strategy: defaults.refinement_strategy,
            oracle_schema: defaults.oracle_schema,
            oracle_hint: defaults.oracle_hint,
            timeout_ms: defaults.timeout_ms,
            example_rows: defaults.example_rows,
        }
    }
}

impl McpConfig {
    pub fn to_options(&self) -> McpOptions {
        McpOptions {
            enable_sl: self.enable_sl,
            enable_nc: self.enable_nc,
            enable_cw: self.enable_cw,
            refinement_strategy: self.refinement_strategy,
            oracle_schema: self.oracle_schema,
            oracle_hint: self.oracle_hint,
            timeout_ms: self.timeout_ms,
            example_rows: self.example_rows,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Negatives requested per pair.
    pub per_pair_negatives: usize,
    pub sl_cap: Option<usize>,
    pub nc_cap: Option<usize>,
    pub cw_cap: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_pair_negatives: 1,
            sl_cap: None,
            nc_cap: None,
            cw_cap: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus_root: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub parallelism: usize,
    pub timeout_ms: u64,
    pub backend: BackendConfig,
    pub mcp: McpConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_root: PathBuf::from("."),
            out_dir: PathBuf::from("out"),
            seed: 0,
            parallelism: 8,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            backend: BackendConfig::default(),
            mcp: McpConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&raw).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Hex SHA-256 of the resolved configuration (secrets are referenced by
    /// env-var name only, so the hash never contains key material).
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_string(self).expect("serializable config");
        squill_core::llm::prompt_sha256(&canonical)
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>, ConfigError> {
        match (&self.backend.mock_script, &self.backend.endpoint) {
            (Some(_), Some(_)) => Err(ConfigError::TwoBackends),
            (Some(script), None) => Ok(Box::new(MockBackend::from_script_file(script)?)),
            (None, Some(endpoint)) => {
                let model = self.backend.model.as_deref().unwrap_or("default");
                let api_key = self
                    .backend
                    .api_key_env
                    .as_deref()
                    .and_then(|var| std::env::var(var).ok());
                Ok(Box::new(HttpBackend::new(endpoint, model, api_key)))
            }
            (None, None) => Err(ConfigError::NoBackend),
        }
    }
}

/// Header object embedded in every artifact for provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub config_sha256: String,
    pub seed: u64,
}

impl ArtifactHeader {
    pub fn of(config: &RunConfig) -> Self {
        ArtifactHeader {
            config_sha256: config.sha256(),
            seed: config.seed,
        }
    }

    /// The `{"_header": …}` first line of line-delimited artifacts.
    pub fn jsonl_line(&self) -> String {
        format!(
            "{}\n",
            serde_json::json!({ "_header": self })
        )
    }
}

/// True for the provenance line [`ArtifactHeader::jsonl_line`] writes.
pub fn is_header_line(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .map(|v| v.get("_header").is_some())
        .unwrap_or(false)
}
