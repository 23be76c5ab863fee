use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Where the pixels of an image live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Path(PathBuf),
    Uri(String),
    #[serde(with = "bytes_b64")]
    Bytes(Vec<u8>),
}

/// Handle to an input image. The id must be unique within a run; mock
/// backends key their lookup tables on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub source: ImageSource,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, source: ImageSource) -> Self {
        Self {
            id: id.into(),
            source,
        }
    }

    /// An image known only by id. Enough for mock backends.
    pub fn from_id(id: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            source: ImageSource::Uri(format!("mock://{id}")),
            id,
        }
    }

    /// Uses the file stem as id.
    pub fn from_path(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Self {
            id,
            source: ImageSource::Path(path.to_path_buf()),
        }
    }

    pub fn from_bytes(id: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            id: id.into(),
            source: ImageSource::Bytes(bytes),
        }
    }

    /// Loads the raw payload. `Uri` sources have no local payload.
    pub fn read_bytes(&self) -> std::io::Result<Option<Vec<u8>>> {
        match &self.source {
            ImageSource::Path(p) => std::fs::read(p).map(Some),
            ImageSource::Bytes(b) => Ok(Some(b.clone())),
            ImageSource::Uri(_) => Ok(None),
        }
    }
}

mod bytes_b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}
