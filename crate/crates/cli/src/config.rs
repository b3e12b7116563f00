//! Engine configuration file.

use std::path::{Path, PathBuf};

use routekit_core::bench::BenchConfig;
use routekit_core::conversation::SessionConfig;
use routekit_core::gateway::HttpConfig;
use routekit_core::sandbox::SandboxConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "ENGINE_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("no engine config: pass --config or set {CONFIG_ENV}")]
    Missing,
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{field}: file {path} does not exist")]
    MissingFile { field: &'static str, path: PathBuf },
}

/// Chat backend shared by every agent role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Http {
        #[serde(flatten)]
        http: HttpConfig,
    },
    Replay {
        path: PathBuf,
    },
    Scripted {
        path: PathBuf,
    },
}

fn yes() -> bool {
    true
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub backend: BackendConfig,
    /// Record every chat exchange to `gateway.jsonl` in the run directory.
    #[serde(default = "yes")]
    pub record: bool,
    pub agents: PathBuf,
    pub model_cards: PathBuf,
    /// Metric pool; the built-in metric cards when absent.
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    pub prices: PathBuf,
    #[serde(default)]
    pub tools: Option<PathBuf>,
    /// Directory overriding `requirements.txt` / `incontext_examples.txt`.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub session: SessionConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    /// Fixed `created_at` stamp; the run's start time when absent.
    #[serde(default)]
    pub clock: Option<String>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl EngineConfig {
    /// `explicit`, else `$ENGINE_CONFIG`.
    pub fn locate(explicit: Option<&Path>) -> Result<PathBuf, ConfigError> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
            .ok_or(ConfigError::Missing)
    }

    /// Parses the file, resolves relative paths against its directory and
    /// checks that referenced files exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg: EngineConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        match &mut self.backend {
            BackendConfig::Replay { path } | BackendConfig::Scripted { path } => resolve(base, path),
            BackendConfig::Http { .. } => {}
        }
        for p in [&mut self.agents, &mut self.model_cards, &mut self.prices, &mut self.runs_dir] {
            resolve(base, p);
        }
        for p in [&mut self.metrics, &mut self.tools, &mut self.templates].into_iter().flatten() {
            resolve(base, p);
        }
        if let Some(root) = &mut self.sandbox.workdir_root {
            resolve(base, root);
        }
    }

    pub fn check_files(&self) -> Result<(), ConfigError> {
        let mut required: Vec<(&'static str, &Path)> =
            vec![("agents", &self.agents), ("model_cards", &self.model_cards), ("prices", &self.prices)];
        match &self.backend {
            BackendConfig::Replay { path } | BackendConfig::Scripted { path } => required.push(("backend.path", path)),
            BackendConfig::Http { .. } => {}
        }
        if let Some(p) = &self.metrics {
            required.push(("metrics", p));
        }
        if let Some(p) = &self.tools {
            required.push(("tools", p));
        }
        if let Some(p) = &self.templates {
            required.push(("templates", p));
        }
        match required.into_iter().find(|(_, p)| !p.exists()) {
            Some((field, path)) => Err(ConfigError::MissingFile { field, path: path.to_path_buf() }),
            None => Ok(()),
        }
    }
}
