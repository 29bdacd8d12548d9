use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ratelimit::RateTable;
use super::GatewayError;
use crate::dsn::{ChannelTemplate, DsnConfig};
use crate::profiles::EnclaveLevel;
use crate::scheduler::SchedulerConfig;

/// Gateway configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default = "default_profile")]
    pub profile: EnclaveLevel,
    /// Policy document; the built-in baseline when absent.
    #[serde(default)]
    pub policy_path: Option<PathBuf>,
    /// JSONL audit file; audit stays in memory when absent.
    #[serde(default)]
    pub audit_path: Option<PathBuf>,
    #[serde(default)]
    pub rate_limits: RateTable,
    /// HMAC key for bearer tokens.
    pub secret: String,
    #[serde(default)]
    pub token_journal: Option<PathBuf>,
    #[serde(default)]
    pub profile_overrides_path: Option<PathBuf>,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub dsn: DsnConfig,
    #[serde(default)]
    pub templates: Vec<ChannelTemplate>,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_profile() -> EnclaveLevel {
    EnclaveLevel::Development
}

fn default_scheduler() -> SchedulerConfig {
    SchedulerConfig::new(64)
}

impl GatewayConfig {
    pub fn new(secret: impl Into<String>) -> Self {
        GatewayConfig {
            listen: default_listen(),
            profile: default_profile(),
            policy_path: None,
            audit_path: None,
            rate_limits: RateTable::default(),
            secret: secret.into(),
            token_journal: None,
            profile_overrides_path: None,
            scheduler: default_scheduler(),
            dsn: DsnConfig::default(),
            templates: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        serde_json::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.policy_path, &mut cfg.audit_path, &mut cfg.token_journal, &mut cfg.profile_overrides_path]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }
}
