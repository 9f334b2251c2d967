//! Service configuration: a TOML file, then `MC_*` environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annotator::MockDecisionLlm;
use crate::gateway::{Backend, BackendDescriptor, Gateway, GatewayError, MockLlm, Role};

pub const ENV_HOME: &str = "MC_HOME";
pub const ENV_LLM: &str = "MC_LLM_ENDPOINT";
pub const ENV_VQA: &str = "MC_VQA_ENDPOINT";
pub const ENV_CAPTION: &str = "MC_CAPTION_ENDPOINT";
pub const ENV_EMBED: &str = "MC_EMBED_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub mode: BackendMode,
    pub mock_seed: u64,
    pub dim: usize,
    pub max_parallel: usize,
    /// Directory of `*.jsonl` prompt fixtures for the mock LLM.
    pub fixtures_dir: Option<PathBuf>,
    pub llm_endpoint: Option<String>,
    pub vqa_endpoint: Option<String>,
    pub caption_endpoint: Option<String>,
    pub embed_endpoint: Option<String>,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            mock_seed: 0,
            dim: 64,
            max_parallel: 8,
            fixtures_dir: None,
            llm_endpoint: None,
            vqa_endpoint: None,
            caption_endpoint: None,
            embed_endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub home: Option<PathBuf>,
    pub backends: BackendsConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceConfigError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no store root: set {ENV_HOME} or `home` in the config file")]
    NoHome,
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceConfigError::File { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml(&text).map_err(|e| ServiceConfigError::File { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Applies overrides from a variable lookup (the process environment in
    /// production, a map in tests).
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(h) = var(ENV_HOME) {
            self.home = Some(PathBuf::from(h));
        }
        let b = &mut self.backends;
        for (name, slot) in [
            (ENV_LLM, &mut b.llm_endpoint),
            (ENV_VQA, &mut b.vqa_endpoint),
            (ENV_CAPTION, &mut b.caption_endpoint),
            (ENV_EMBED, &mut b.embed_endpoint),
        ] {
            if let Some(v) = var(name) {
                *slot = Some(v);
            }
        }
    }

    pub fn home(&self) -> Result<&Path, ServiceConfigError> {
        self.home.as_deref().ok_or(ServiceConfigError::NoHome)
    }

    /// Builds the gateway. Remote mode fails here, before any work, when an
    /// endpoint is missing.
    pub fn gateway(&self) -> Result<Gateway, ServiceConfigError> {
        let b = &self.backends;
        match b.mode {
            BackendMode::Mock => {
                let mut llm = MockLlm::new(b.mock_seed).with_responder(Arc::new(MockDecisionLlm));
                if let Some(dir) = &b.fixtures_dir {
                    llm.load_fixtures(dir)?;
                }
                Ok(Gateway::mock(llm, b.mock_seed, b.dim, b.max_parallel)?)
            }
            BackendMode::Remote => {
                let desc = |role: Role, endpoint: &Option<String>| -> Result<BackendDescriptor, GatewayError> {
                    let e = endpoint.as_deref().filter(|e| !e.trim().is_empty()).ok_or_else(|| {
                        GatewayError::Config(format!("remote mode needs an endpoint for the {role} backend"))
                    })?;
                    Ok(BackendDescriptor::remote(role, e, b.max_parallel))
                };
                let descriptors = [
                    desc(Role::Llm, &b.llm_endpoint)?,
                    desc(Role::Vqa, &b.vqa_endpoint)?,
                    desc(Role::Captioner, &b.caption_endpoint)?,
                    desc(Role::Embedder, &b.embed_endpoint)?,
                ];
                let [llm, vqa, captioner, embedder] = descriptors;
                Ok(Gateway {
                    llm: Arc::new(Backend::remote(llm)?),
                    vqa: Arc::new(Backend::remote(vqa)?),
                    captioner: Arc::new(Backend::remote(captioner)?),
                    embedder: Arc::new(Backend::remote_embedder(embedder, b.dim)?),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn toml_and_env_overrides() {
        let mut c = ServiceConfig::from_toml(
            "home = \"/tmp/a\"\n[backends]\nmode = \"remote\"\nllm_endpoint = \"tcp://x:1\"\ndim = 32\n",
        )
        .unwrap();
        assert_eq!(c.backends.dim, 32);
        assert_eq!(c.backends.max_parallel, 8);
        let env: HashMap<&str, &str> = [(ENV_HOME, "/tmp/b"), (ENV_VQA, "tcp://y:2")].into();
        c.apply_env(|k| env.get(k).map(|s| s.to_string()));
        assert_eq!(c.home().unwrap(), Path::new("/tmp/b"));
        assert_eq!(c.backends.vqa_endpoint.as_deref(), Some("tcp://y:2"));
        assert!(ServiceConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn remote_without_endpoints_fails_before_work() {
        let mut c = ServiceConfig::default();
        c.backends.mode = BackendMode::Remote;
        c.backends.llm_endpoint = Some("tcp://127.0.0.1:9".into());
        let err = c.gateway().unwrap_err();
        assert!(err.to_string().contains("vqa"), "{err}");
        assert!(matches!(ServiceConfig::default().home(), Err(ServiceConfigError::NoHome)));
    }

    #[test]
    fn mock_gateway_builds() {
        assert!(ServiceConfig::default().gateway().is_ok());
    }
}
