//! Service configuration: a TOML file with environment overrides. Backend
//! credentials are only ever read from the environment.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use storyprobe_core::narrative::GameSettings;

use crate::live::{LiveSettings, RetryPolicy};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        /// Rule file; the bundled script when absent.
        #[serde(default)]
        script: Option<PathBuf>,
    },
    Live(LiveConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveConfig {
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Environment variable that may override `base_url`.
    pub base_url_env: String,
    pub base_url: String,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            api_key_env: "OPENAI_API_KEY".into(),
            base_url_env: "OPENAI_BASE_URL".into(),
            base_url: "https://api.openai.com/v1".into(),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }
}

impl LiveConfig {
    pub fn settings(
        &self,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<LiveSettings, ConfigError> {
        let api_key = env(&self.api_key_env)
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                field_err(
                    "backend.api_key_env",
                    format!("environment variable {} is not set", self.api_key_env),
                )
            })?;
        let base_url = env(&self.base_url_env)
            .filter(|u| !u.trim().is_empty())
            .unwrap_or_else(|| self.base_url.clone());
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(field_err(
                "backend.base_url",
                format!("{base_url:?} is not an http(s) URL"),
            ));
        }
        Ok(LiveSettings {
            base_url,
            api_key,
            retry: self.retry.clone(),
            max_in_flight: self.max_in_flight,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Campaign file; the bundled campaign when absent.
    pub campaign: Option<PathBuf>,
    /// Directory of instrument files; the bundled set when absent.
    pub instrument_dir: Option<PathBuf>,
    /// Corpus document; the bundled corpus when absent.
    pub corpus: Option<PathBuf>,
    pub log_level: String,
    /// Sessions idle this long are closed.
    pub idle_timeout_secs: u64,
    /// Environment variable holding the shared research token. Requests
    /// must present it as a bearer token when the variable is set.
    pub auth_token_env: Option<String>,
    pub game: GameSettings,
    pub backend: BackendConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("storyprobe-data"),
            campaign: None,
            instrument_dir: None,
            corpus: None,
            log_level: "info".into(),
            idle_timeout_secs: 1800,
            auth_token_env: None,
            game: GameSettings::default(),
            backend: BackendConfig::Mock { script: None },
        }
    }
}

impl Config {
    pub fn parse(origin: &str, text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string(),
        })
    }

    /// Reads the file, applies process environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut config = Self::parse(&path.display().to_string(), &text)?;
        config.apply_env(|k| std::env::var(k).ok())?;
        config.validate()?;
        Ok(config)
    }

    /// `STORYPROBE_*` variables override file values:
    /// `LISTEN`, `DATA_DIR`, `CAMPAIGN`, `INSTRUMENT_DIR`, `CORPUS`, `LOG`,
    /// `IDLE_TIMEOUT_SECS`, and `BACKEND` (`mock` or `live`, switching kind
    /// with default settings when it differs from the file).
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let var = |name: &str| env(&format!("STORYPROBE_{name}")).filter(|v| !v.is_empty());
        if let Some(v) = var("LISTEN") {
            self.listen = v;
        }
        if let Some(v) = var("DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = var("CAMPAIGN") {
            self.campaign = Some(v.into());
        }
        if let Some(v) = var("INSTRUMENT_DIR") {
            self.instrument_dir = Some(v.into());
        }
        if let Some(v) = var("CORPUS") {
            self.corpus = Some(v.into());
        }
        if let Some(v) = var("LOG") {
            self.log_level = v;
        }
        if let Some(v) = var("IDLE_TIMEOUT_SECS") {
            self.idle_timeout_secs = v.parse().map_err(|_| {
                field_err("idle_timeout_secs", format!("STORYPROBE_IDLE_TIMEOUT_SECS={v:?} is not a number"))
            })?;
        }
        if let Some(v) = var("BACKEND") {
            match (v.as_str(), &self.backend) {
                ("mock", BackendConfig::Mock { .. }) | ("live", BackendConfig::Live(_)) => {}
                ("mock", _) => self.backend = BackendConfig::Mock { script: None },
                ("live", _) => self.backend = BackendConfig::Live(LiveConfig::default()),
                _ => {
                    return Err(field_err(
                        "backend.kind",
                        format!("STORYPROBE_BACKEND={v:?}; expected mock or live"),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Checks values and that the data directory is writable.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        if self.idle_timeout_secs == 0 {
            return Err(field_err("idle_timeout_secs", "must be positive"));
        }
        if self.game.prompt_budget == 0 {
            return Err(field_err("game.prompt_budget", "must be positive"));
        }
        let m = &self.game.model;
        for (field, t) in [
            ("game.model.dialogue_temperature", m.dialogue_temperature),
            ("game.model.classifier_temperature", m.classifier_temperature),
        ] {
            if !(0.0..=2.0).contains(&t) {
                return Err(field_err(field, format!("{t} outside [0, 2]")));
            }
        }
        if m.max_reply_tokens == 0 {
            return Err(field_err("game.model.max_reply_tokens", "must be at least 1"));
        }
        if m.classifier_max_tokens == 0 {
            return Err(field_err("game.model.classifier_max_tokens", "must be at least 1"));
        }
        if let BackendConfig::Live(live) = &self.backend {
            if live.max_in_flight == 0 {
                return Err(field_err("backend.max_in_flight", "must be at least 1"));
            }
        }
        self.log_level
            .parse::<log::LevelFilter>()
            .map_err(|_| field_err("log_level", format!("unknown level {:?}", self.log_level)))?;
        std::fs::create_dir_all(&self.data_dir)
            .and_then(|_| {
                let probe = self.data_dir.join(".write-probe");
                std::fs::write(&probe, b"ok")?;
                std::fs::remove_file(probe)
            })
            .map_err(|e| {
                field_err(
                    "data_dir",
                    format!("{} is not writable: {e}", self.data_dir.display()),
                )
            })?;
        Ok(())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen
            .parse()
            .map_err(|e| field_err("listen", format!("{:?}: {e}", self.listen)))
    }
}
