use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mock::MockWorld;
use super::remote::{RemoteCaptioner, RemoteEncoder, RemoteLlm};
use super::{BackendError, CaptionBackend, EncoderBackend, LlmBackend, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Local,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "local" => Ok(Self::Local),
            "remote" => Ok(Self::Remote),
            other => Err(format!(
                "unknown backend kind {other:?} (mock | local | remote)"
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_id: Option<String>,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// Mock world file (mock kind only).
    pub world: Option<PathBuf>,
    /// Embedding dimension (remote encoders).
    pub dimension: Option<usize>,
    /// Prompt window in tokens (remote language models).
    pub context_window: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub encoder: BackendConfig,
    pub captioner: BackendConfig,
    pub llm: BackendConfig,
}

/// The three backends a pipeline runs against.
#[derive(Clone)]
pub struct BackendSet {
    pub encoder: Arc<dyn EncoderBackend>,
    pub captioner: Arc<dyn CaptionBackend>,
    pub llm: Arc<dyn LlmBackend>,
}

impl std::fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSet")
            .field("encoder", &self.encoder.identity())
            .field("captioner", &self.captioner.identity())
            .field("llm", &self.llm.identity())
            .finish()
    }
}

impl BackendSet {
    /// All three mocks from one world.
    pub fn from_world(world: &MockWorld) -> Self {
        Self {
            encoder: Arc::new(world.encoder()),
            captioner: Arc::new(world.captioner()),
            llm: Arc::new(world.llm()),
        }
    }

    pub fn identities(&self) -> [(&'static str, String); 3] {
        [
            ("encoder", self.encoder.identity().to_string()),
            ("captioner", self.captioner.identity().to_string()),
            ("llm", self.llm.identity().to_string()),
        ]
    }
}

impl BackendConfig {
    fn world(&self, base: &Path) -> Result<MockWorld> {
        match &self.world {
            None => Ok(MockWorld::default()),
            Some(p) => {
                let path = if p.is_absolute() {
                    p.clone()
                } else {
                    base.join(p)
                };
                MockWorld::load(&path).map_err(|e| {
                    BackendError::Unavailable(format!("mock world {}: {e}", path.display()))
                })
            }
        }
    }

    fn endpoint(&self, role: &str) -> Result<String> {
        self.endpoint
            .clone()
            .ok_or_else(|| BackendError::Unavailable(format!("remote {role} needs an endpoint")))
    }

    fn api_key(&self) -> Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                BackendError::Unavailable(format!("environment variable {var} is not set"))
            }),
        }
    }

    fn model_id(&self) -> &str {
        self.model_id.as_deref().unwrap_or("default")
    }

    fn local_unavailable(&self, role: &str) -> BackendError {
        BackendError::Unavailable(format!(
            "local {role} {:?}: this build has no in-process model runtime; serve the model and use kind = \"remote\"",
            self.model_id()
        ))
    }

    pub fn build_encoder(&self, base: &Path) -> Result<Arc<dyn EncoderBackend>> {
        match self.kind {
            BackendKind::Mock => {
                let mut enc = self.world(base)?.encoder();
                if let Some(id) = &self.model_id {
                    enc = enc.with_identity(id.clone());
                }
                Ok(Arc::new(enc))
            }
            BackendKind::Local => Err(self.local_unavailable("encoder")),
            BackendKind::Remote => {
                let dimension = self.dimension.ok_or_else(|| {
                    BackendError::Unavailable("remote encoder needs `dimension`".into())
                })?;
                Ok(Arc::new(RemoteEncoder::new(
                    self.model_id(),
                    dimension,
                    self.endpoint("encoder")?,
                    self.api_key()?,
                )))
            }
        }
    }

    pub fn build_captioner(&self, base: &Path) -> Result<Arc<dyn CaptionBackend>> {
        match self.kind {
            BackendKind::Mock => {
                let mut cap = self.world(base)?.captioner();
                if let Some(id) = &self.model_id {
                    cap = cap.with_identity(id.clone());
                }
                Ok(Arc::new(cap))
            }
            BackendKind::Local => Err(self.local_unavailable("captioner")),
            BackendKind::Remote => Ok(Arc::new(RemoteCaptioner::new(
                self.model_id(),
                self.endpoint("captioner")?,
                self.api_key()?,
            ))),
        }
    }

    pub fn build_llm(&self, base: &Path) -> Result<Arc<dyn LlmBackend>> {
        match self.kind {
            BackendKind::Mock => {
                let mut llm = self.world(base)?.llm();
                if let Some(id) = &self.model_id {
                    llm = llm.with_identity(id.clone());
                }
                Ok(Arc::new(llm))
            }
            BackendKind::Local => Err(self.local_unavailable("llm")),
            BackendKind::Remote => Ok(Arc::new(
                RemoteLlm::new(self.model_id(), self.endpoint("llm")?, self.api_key()?)
                    .with_context_window(self.context_window),
            )),
        }
    }
}

impl BackendsConfig {
    /// Relative mock world paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<BackendSet> {
        Ok(BackendSet {
            encoder: self.encoder.build_encoder(base)?,
            captioner: self.captioner.build_captioner(base)?,
            llm: self.llm.build_llm(base)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_builds_mocks() {
        let set = BackendsConfig::default().build(Path::new(".")).unwrap();
        assert_eq!(set.encoder.dimension(), 16);
        assert_eq!(set.llm.context_window(), Some(512));
    }

    #[test]
    fn local_kind_reports_unavailable() {
        let cfg = BackendConfig {
            kind: BackendKind::Local,
            ..Default::default()
        };
        assert!(matches!(
            cfg.build_llm(Path::new(".")),
            Err(BackendError::Unavailable(_))
        ));
    }

    #[test]
    fn remote_requires_endpoint_and_key() {
        let cfg = BackendConfig {
            kind: BackendKind::Remote,
            ..Default::default()
        };
        assert!(cfg.build_llm(Path::new(".")).is_err());
        let cfg = BackendConfig {
            kind: BackendKind::Remote,
            endpoint: Some("http://localhost:1".into()),
            api_key_env: Some("LENS_TEST_SURELY_UNSET_KEY".into()),
            ..Default::default()
        };
        assert!(cfg.build_llm(Path::new(".")).is_err());
    }
}
