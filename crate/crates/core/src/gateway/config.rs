use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::broker::RetryPolicy;
use crate::store::SyncPolicy;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("environment variable {name}: {reason}")]
    Env { name: String, reason: String },
}

/// Gateway settings. Every field has a default; a TOML file may override
/// any subset and `OPENM2M_*` environment variables override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: String,
    /// Event log file. `None` keeps everything in memory.
    pub log_path: Option<PathBuf>,
    pub sync: SyncPolicy,
    pub prepare_timeout_ms: u64,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    pub session_idle_secs: u64,
    pub heartbeat_deadline_ms: u64,
    pub charge_per_message: Decimal,
    pub charge_per_event: Decimal,
    /// Offset used for `/a/do` response timestamps.
    pub utc_offset_minutes: i32,
    pub tick_ms: u64,
    pub callback_timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen: "127.0.0.1:8080".into(),
            log_path: None,
            sync: SyncPolicy::EveryAppend,
            prepare_timeout_ms: 2000,
            retry_attempts: 3,
            retry_base_ms: 500,
            session_idle_secs: 300,
            heartbeat_deadline_ms: 60_000,
            charge_per_message: Decimal::ONE,
            charge_per_event: Decimal::ONE,
            utc_offset_minutes: 0,
            tick_ms: 100,
            callback_timeout_ms: 2000,
        }
    }
}

const ENV_PREFIX: &str = "OPENM2M_";

impl GatewayConfig {
    pub fn from_toml_str(s: &str, origin: &Path) -> Result<GatewayConfig, ConfigError> {
        toml::from_str(s).map_err(|source| ConfigError::Parse { path: origin.to_owned(), source })
    }

    pub fn from_file(path: &Path) -> Result<GatewayConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        GatewayConfig::from_toml_str(&text, path)
    }

    /// Defaults, then the optional file, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<GatewayConfig, ConfigError> {
        let mut cfg = match path {
            Some(p) => GatewayConfig::from_file(p)?,
            None => GatewayConfig::default(),
        };
        cfg.apply_env(env::vars())?;
        Ok(cfg)
    }

    pub fn apply_env(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            let bad = |reason: String| ConfigError::Env { name: name.clone(), reason };
            fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.trim().parse().map_err(|e: T::Err| e.to_string())
            }
            match key {
                "LISTEN" => self.listen = value,
                "LOG_PATH" => self.log_path = (!value.is_empty()).then(|| PathBuf::from(value)),
                "PREPARE_TIMEOUT_MS" => self.prepare_timeout_ms = num(&value).map_err(bad)?,
                "RETRY_ATTEMPTS" => self.retry_attempts = num(&value).map_err(bad)?,
                "RETRY_BASE_MS" => self.retry_base_ms = num(&value).map_err(bad)?,
                "SESSION_IDLE_SECS" => self.session_idle_secs = num(&value).map_err(bad)?,
                "HEARTBEAT_DEADLINE_MS" => self.heartbeat_deadline_ms = num(&value).map_err(bad)?,
                "CHARGE_PER_MESSAGE" => self.charge_per_message = num(&value).map_err(bad)?,
                "CHARGE_PER_EVENT" => self.charge_per_event = num(&value).map_err(bad)?,
                "UTC_OFFSET_MINUTES" => self.utc_offset_minutes = num(&value).map_err(bad)?,
                "TICK_MS" => self.tick_ms = num(&value).map_err(bad)?,
                "CALLBACK_TIMEOUT_MS" => self.callback_timeout_ms = num(&value).map_err(bad)?,
                "SYNC" => {
                    self.sync = match value.trim() {
                        "always" | "every-append" => SyncPolicy::EveryAppend,
                        "never" => SyncPolicy::Never,
                        other => match other.strip_prefix("batch:") {
                            Some(n) => SyncPolicy::Batch(num(n).map_err(bad)?),
                            None => return Err(bad(format!("unknown sync mode `{other}`"))),
                        },
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn prepare_timeout(&self) -> Duration {
        Duration::from_millis(self.prepare_timeout_ms)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry_attempts.max(1),
            base: Duration::from_millis(self.retry_base_ms),
        }
    }
}
