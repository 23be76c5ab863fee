use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lens_core::backends::{
    BackendConfig, BackendKind, BackendSet, BackendsConfig, GenerationParams,
};
use lens_core::vision::Module;
use lens_core::vocabulary::{load_attribute_vocabulary, load_tag_vocabulary};
use lens_core::vocabulary::{AttributeVocabulary, TagVocabulary};
use lens_core::Pipeline;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularyPaths {
    pub tags: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub addr: String,
    pub session_ttl_secs: u64,
    /// Support manifest few-shot requests draw from.
    pub support: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            session_ttl_secs: 1800,
            support: None,
        }
    }
}

/// Contents of the `--config` TOML file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensConfig {
    pub backends: BackendsConfig,
    pub vocabulary: VocabularyPaths,
    pub generation: Option<GenerationParams>,
    pub server: ServerConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Captioner,
    Llm,
}

impl LensConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self {
                base_dir: PathBuf::from("."),
                ..Default::default()
            }),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn backend_mut(&mut self, role: Role) -> &mut BackendConfig {
        match role {
            Role::Encoder => &mut self.backends.encoder,
            Role::Captioner => &mut self.backends.captioner,
            Role::Llm => &mut self.backends.llm,
        }
    }

    /// Applies a `KIND[=ENDPOINT]` override such as `mock` or
    /// `remote=http://127.0.0.1:9000/generate`.
    pub fn apply_override(&mut self, role: Role, spec: &str) -> Result<(), CliError> {
        let (kind, endpoint) = match spec.split_once('=') {
            Some((k, e)) => (k, Some(e.to_string())),
            None => (spec, None),
        };
        let kind: BackendKind = kind.parse().map_err(CliError::Usage)?;
        let b = self.backend_mut(role);
        b.kind = kind;
        if endpoint.is_some() {
            b.endpoint = endpoint;
        }
        Ok(())
    }

    fn check_worlds(&self) -> Result<(), CliError> {
        for b in [
            &self.backends.encoder,
            &self.backends.captioner,
            &self.backends.llm,
        ] {
            if let (BackendKind::Mock, Some(w)) = (b.kind, &b.world) {
                let path = self.resolve(w);
                if !path.is_file() {
                    return Err(CliError::Config(format!(
                        "mock world {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn backends(&self) -> Result<BackendSet, CliError> {
        self.check_worlds()?;
        Ok(self.backends.build(&self.base_dir)?)
    }

    pub fn vocabularies(
        &self,
    ) -> Result<(Option<TagVocabulary>, Option<AttributeVocabulary>), CliError> {
        let tags = self
            .vocabulary
            .tags
            .as_ref()
            .map(|p| load_tag_vocabulary(self.resolve(p)))
            .transpose()?;
        let attrs = self
            .vocabulary
            .attributes
            .as_ref()
            .map(|p| load_attribute_vocabulary(self.resolve(p)))
            .transpose()?;
        Ok((tags, attrs))
    }

    pub fn pipeline(&self) -> Result<Pipeline, CliError> {
        let backends = self.backends()?;
        let (tags, attrs) = self.vocabularies()?;
        let pipeline = Pipeline::new(&backends, tags.as_ref(), attrs.as_ref())?;
        Ok(match &self.generation {
            Some(p) => pipeline.with_params(p.clone()),
            None => pipeline,
        })
    }

    /// Modules that can run with this configuration: tags and attributes
    /// when their vocabulary is configured, captions always.
    pub fn available_modules(&self) -> BTreeSet<Module> {
        let mut m = BTreeSet::from([Module::Captions]);
        if self.vocabulary.tags.is_some() {
            m.insert(Module::Tags);
            if self.vocabulary.attributes.is_some() {
                m.insert(Module::Attributes);
            }
        }
        m
    }
}
