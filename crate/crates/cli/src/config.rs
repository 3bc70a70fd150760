//! Layered runtime configuration: built-in defaults, then `tracer.toml`,
//! then `TRACER_*` environment variables, then command-line flags. Each
//! layer only overrides what it explicitly sets, and the fully resolved
//! result is echoed into every report so outputs are reproducible.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tracer_core::diagnosis::DEFAULT_TURN_BUDGET;

/// Environment variable naming the config file.
pub const CONFIG_PATH_VAR: &str = "TRACER_CONFIG";

/// Environment variable for the model endpoint URL.
pub const MODEL_URL_VAR: &str = "TRACER_MODEL_URL";

/// Environment variable for the model API key.
pub const MODEL_KEY_VAR: &str = "TRACER_MODEL_KEY";

/// Default config filename looked up in the working directory.
pub const CONFIG_FILENAME: &str = "tracer.toml";

/// Optional settings from a `tracer.toml` file. Absent keys defer to the
/// layer below.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model_url: Option<String>,
    pub model_key: Option<String>,
    pub max_turns: Option<usize>,
    pub jobs: Option<usize>,
    pub heuristic: Option<bool>,
}

/// Flag-level overrides collected from the command line.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub model_url: Option<String>,
    pub max_turns: Option<usize>,
    pub jobs: Option<usize>,
    pub heuristic: Option<bool>,
}

/// The fully layered configuration. The key itself is held out of
/// serialized reports; only its presence is echoed.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub model_url: Option<String>,
    pub model_key: Option<String>,
    pub max_turns: usize,
    pub jobs: usize,
    pub heuristic: bool,
    /// Where each effective value came from, for the report echo.
    pub config_file: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model_url: None,
            model_key: None,
            max_turns: DEFAULT_TURN_BUDGET,
            jobs: 1,
            heuristic: false,
            config_file: None,
        }
    }
}

/// Reproducibility echo embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub version: String,
    pub model_url: Option<String>,
    pub model_key_present: bool,
    pub max_turns: usize,
    pub jobs: usize,
    pub heuristic: bool,
    pub config_file: Option<PathBuf>,
}

impl Settings {
    /// Resolve defaults, file, environment, and flags, in that order.
    pub fn resolve(flags: &FlagOverrides) -> Result<Settings> {
        let mut settings = Settings::default();

        let file_path = match std::env::var_os(CONFIG_PATH_VAR) {
            Some(p) => Some(PathBuf::from(p)),
            None => {
                let default = PathBuf::from(CONFIG_FILENAME);
                default.is_file().then_some(default)
            }
        };
        if let Some(path) = file_path {
            settings.apply_file(&path)?;
        }

        if let Ok(url) = std::env::var(MODEL_URL_VAR) {
            if !url.is_empty() {
                settings.model_url = Some(url);
            }
        }
        if let Ok(key) = std::env::var(MODEL_KEY_VAR) {
            if !key.is_empty() {
                settings.model_key = Some(key);
            }
        }

        settings.apply_flags(flags);
        Ok(settings)
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let file: FileConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        if file.model_url.is_some() {
            self.model_url = file.model_url;
        }
        if file.model_key.is_some() {
            self.model_key = file.model_key;
        }
        if let Some(turns) = file.max_turns {
            self.max_turns = turns;
        }
        if let Some(jobs) = file.jobs {
            self.jobs = jobs;
        }
        if let Some(heuristic) = file.heuristic {
            self.heuristic = heuristic;
        }
        self.config_file = Some(path.to_path_buf());
        Ok(())
    }

    fn apply_flags(&mut self, flags: &FlagOverrides) {
        if let Some(url) = &flags.model_url {
            self.model_url = Some(url.clone());
        }
        if let Some(turns) = flags.max_turns {
            self.max_turns = turns;
        }
        if let Some(jobs) = flags.jobs {
            self.jobs = jobs.max(1);
        }
        if let Some(heuristic) = flags.heuristic {
            self.heuristic = heuristic;
        }
    }

    /// The report-safe echo of this configuration.
    pub fn resolved(&self) -> ResolvedConfig {
        ResolvedConfig {
            version: env!("CARGO_PKG_VERSION").to_string(),
            model_url: self.model_url.clone(),
            model_key_present: self.model_key.is_some(),
            max_turns: self.max_turns,
            jobs: self.jobs,
            heuristic: self.heuristic,
            config_file: self.config_file.clone(),
        }
    }
}
