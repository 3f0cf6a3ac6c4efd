//! The optional TOML config file. Every key is optional; flags win.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use tidyhome_core::eval::{BackendSpec, EmbedderSpec, ModelSpec};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Chat backend for `chat` and `serve`.
    pub backend: Option<BackendSpec>,
    pub embedder: Option<EmbedderSpec>,
    /// Directory holding scenarios/, knowledge/, routing/ and prompts/.
    pub fixtures: Option<PathBuf>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub service: ServiceSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub out: Option<PathBuf>,
    pub repetitions: Option<u32>,
    pub jobs: Option<usize>,
    pub k: Option<usize>,
    pub max_transport_failures: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSection {
    pub host: Option<String>,
    pub port: Option<u16>,
    #[serde(default)]
    pub cors_origins: Vec<String>,
    pub memory_dir: Option<PathBuf>,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelsFile {
    models: Vec<ModelSpec>,
}

/// Reads a `[[models]]` list from TOML, or `{"models": [...]}` from JSON.
pub fn load_models(path: &Path) -> anyhow::Result<Vec<ModelSpec>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading models file {}", path.display()))?;
    let file: ModelsFile = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("invalid models file {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("invalid models file {}", path.display()))?
    };
    if file.models.is_empty() {
        bail!("models file {} lists no models", path.display());
    }
    Ok(file.models)
}
