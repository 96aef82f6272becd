//! Named backends and embedders from a TOML document.
//!
//! ```toml
//! [backends.sim]
//! kind = "simulator"
//! [backends.sim.simulator]
//! theta_shape = 0.7
//!
//! [backends.llava]
//! kind = "openai"
//! base_url = "http://localhost:8000/v1"
//! model = "llava-v1.6-7b"
//! api_key_env = "LLAVA_KEY"
//! concurrency = 4
//! logprobs = true
//!
//! [embedders.local]
//! kind = "hashing"
//! ```
//!
//! Credentials are read only from the environment variable a backend names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    BackendError, ChatBackend, Embedder, HashingEmbedder, HttpChatBackend, HttpEmbedder, OneHotEmbedder,
    ReplayBackend, RetryPolicy,
};
use crate::simulator::{SimulatorBackend, SimulatorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Simulator {
        #[serde(default)]
        simulator: SimulatorConfig,
        #[serde(default)]
        concurrency: Option<usize>,
    },
    Openai {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "one")]
        concurrency: usize,
        #[serde(default)]
        logprobs: bool,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default)]
        retry: RetryPolicy,
    },
    Replay {
        fixture: PathBuf,
        #[serde(default)]
        concurrency: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Openai {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        retry: RetryPolicy,
    },
    Hashing {
        #[serde(default = "default_hash_dim")]
        dim: usize,
    },
    OneHot,
}

fn one() -> usize {
    1
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_hash_dim() -> usize {
    1024
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendsConfig {
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub embedders: BTreeMap<String, EmbedderSpec>,
    /// Directory that relative fixture paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn api_key(var: &Option<String>) -> Result<Option<String>, BackendError> {
    match var {
        None => Ok(None),
        Some(v) => std::env::var(v)
            .map(Some)
            .map_err(|_| BackendError::InvalidRequest(format!("environment variable `{v}` is not set"))),
    }
}

impl BackendsConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        let mut cfg =
            Self::from_toml(&text).map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn has_backend(&self, name: &str) -> bool {
        self.backends.contains_key(name)
    }

    pub fn has_embedder(&self, name: &str) -> bool {
        self.embedders.contains_key(name)
    }

    pub fn chat_backend(&self, name: &str) -> Result<Arc<dyn ChatBackend>, BackendError> {
        let spec = self
            .backends
            .get(name)
            .ok_or_else(|| BackendError::InvalidRequest(format!("unknown backend `{name}`")))?;
        Ok(match spec {
            BackendSpec::Simulator { simulator, concurrency } => {
                let mut b = SimulatorBackend::new(simulator.clone())
                    .map_err(|e| BackendError::InvalidRequest(e.to_string()))?
                    .named(name);
                if let Some(c) = concurrency {
                    b = b.with_concurrency(*c);
                }
                Arc::new(b)
            }
            BackendSpec::Openai {
                base_url,
                model,
                api_key_env,
                concurrency,
                logprobs,
                timeout_secs,
                retry,
            } => Arc::new(
                HttpChatBackend::new(name, base_url, model, api_key(api_key_env)?)?
                    .with_logprobs(*logprobs)
                    .with_concurrency(*concurrency)
                    .with_retry(retry.clone())
                    .with_timeout(Duration::from_secs(*timeout_secs))?,
            ),
            BackendSpec::Replay { fixture, concurrency } => {
                let path = self.base_dir.join(fixture);
                let mut b = ReplayBackend::load(name, &path)
                    .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
                if let Some(c) = concurrency {
                    b = b.with_concurrency(*c);
                }
                Arc::new(b)
            }
        })
    }

    pub fn embedder(&self, name: &str) -> Result<Arc<dyn Embedder>, BackendError> {
        let spec = self
            .embedders
            .get(name)
            .ok_or_else(|| BackendError::InvalidRequest(format!("unknown embedder `{name}`")))?;
        Ok(match spec {
            EmbedderSpec::Openai {
                base_url,
                model,
                api_key_env,
                retry,
            } => Arc::new(HttpEmbedder::new(name, base_url, model, api_key(api_key_env)?)?.with_retry(retry.clone())),
            EmbedderSpec::Hashing { dim } => Arc::new(HashingEmbedder::new(name, *dim)),
            EmbedderSpec::OneHot => Arc::new(OneHotEmbedder),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
[backends.sim]
kind = "simulator"
concurrency = 8
[backends.sim.simulator]
theta_shape = 0.6

[backends.remote]
kind = "openai"
base_url = "http://localhost:9/v1"
model = "m"
concurrency = 3
logprobs = true
[backends.remote.retry]
max_attempts = 2

[embedders.hash]
kind = "hashing"

[embedders.onehot]
kind = "one_hot"
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = BackendsConfig::from_toml(DOC).unwrap();
        match &cfg.backends["sim"] {
            BackendSpec::Simulator { simulator, concurrency } => {
                assert_eq!(simulator.theta_shape, 0.6);
                assert_eq!(simulator.miss_floor, SimulatorConfig::default().miss_floor);
                assert_eq!(*concurrency, Some(8));
            }
            other => panic!("{other:?}"),
        }
        let sim = cfg.chat_backend("sim").unwrap();
        assert_eq!(sim.concurrency_limit(), 8);
        assert!(!sim.wants_pixels());
        let remote = cfg.chat_backend("remote").unwrap();
        assert_eq!(remote.concurrency_limit(), 3);
        assert!(remote.supports_logprobs());
        assert_eq!(cfg.embedder("hash").unwrap().embed(&["cat".into()]).unwrap()[0].len(), 1024);
        assert!(cfg.embedder("onehot").is_ok());
        assert!(cfg.chat_backend("nope").is_err());
    }

    #[test]
    fn missing_credential_is_an_error() {
        let cfg = BackendsConfig::from_toml(
            r#"
[backends.x]
kind = "openai"
base_url = "http://localhost:9"
model = "m"
api_key_env = "CUEBIAS_TEST_SURELY_UNSET_VAR"
"#,
        )
        .unwrap();
        assert!(cfg.chat_backend("x").is_err());
    }

    #[test]
    fn invalid_simulator_config_rejected() {
        let cfg = BackendsConfig::from_toml(
            r#"
[backends.s]
kind = "simulator"
[backends.s.simulator]
refusal_rate = 2.0
"#,
        )
        .unwrap();
        assert!(cfg.chat_backend("s").is_err());
    }
}
