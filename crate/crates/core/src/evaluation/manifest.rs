use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{Gold, MetricKind};
use super::registry::registry_entry;
use super::EvalError;
use crate::image::{ImageRef, ImageSource};
use crate::prompting::{TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Scored against a fixed answer space.
    Close,
    /// Free-form generation (binary-scored tasks included).
    Open,
}

/// First line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub name: String,
    pub split: String,
    pub evaluation: MetricKind,
    pub mode: EvalMode,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_space: Option<Vec<String>>,
    /// Gold label counted as the positive class for ROC-AUC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestExample {
    pub id: String,
    /// File path relative to the manifest, or a `scheme://` URI.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
}

impl ManifestExample {
    pub fn image_ref(&self, base_dir: &Path) -> ImageRef {
        let source = if self.image.contains("://") {
            ImageSource::Uri(self.image.clone())
        } else {
            ImageSource::Path(base_dir.join(&self.image))
        };
        let id = self.image_id.clone().unwrap_or_else(|| match &source {
            ImageSource::Uri(u) => u
                .split_once("://")
                .map_or(u.as_str(), |(_, r)| r)
                .to_string(),
            _ => ImageRef::from_path(&self.image).id,
        });
        ImageRef::new(id, source)
    }

    pub fn gold(&self) -> Gold {
        Gold {
            answers: self.answers.clone(),
            label: self.label.clone(),
        }
    }

    /// The answer shown when this example is used as a shot.
    pub fn shot_answer(&self) -> Option<&str> {
        self.label
            .as_deref()
            .or_else(|| self.answers.first().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub examples: Vec<ManifestExample>,
    /// Directory relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(header: ManifestHeader, examples: Vec<ManifestExample>) -> Self {
        Self {
            header,
            examples,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut header = None;
        let mut examples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |e: serde_json::Error| EvalError::Manifest {
                line: i + 1,
                reason: e.to_string(),
            };
            if header.is_none() {
                header = Some(serde_json::from_str(&line).map_err(malformed)?);
            } else {
                examples.push(serde_json::from_str(&line).map_err(malformed)?);
            }
        }
        let header = header.ok_or(EvalError::Manifest {
            line: 1,
            reason: "missing header".into(),
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self {
            header,
            examples,
            base_dir,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for e in &self.examples {
            serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut spec = TaskSpec::default_for(self.header.task);
        if let Some(t) = &self.header.question_template {
            spec.question_template = t.clone();
        }
        if let Some(space) = &self.header.answer_space {
            spec.answer_space = Some(space.clone());
        }
        spec
    }

    pub fn image_refs(&self) -> Vec<ImageRef> {
        self.examples
            .iter()
            .map(|e| e.image_ref(&self.base_dir))
            .collect()
    }

    /// Checks that every example carries what the metric needs, and that a
    /// known dataset uses its registered metric.
    pub fn validate(&self) -> Result<(), EvalError> {
        let h = &self.header;
        let bad = |reason: String| Err(EvalError::InvalidManifest(reason));
        if let Some(entry) = registry_entry(&h.name, &h.split) {
            if entry.metric != h.evaluation {
                return bad(format!(
                    "{} {} is evaluated with {}, not {}",
                    h.name, h.split, entry.metric, h.evaluation
                ));
            }
        }
        let spec = self.task_spec();
        if let Err(e) = spec.validate() {
            return bad(e);
        }
        if h.mode == EvalMode::Close && h.answer_space.as_ref().is_none_or(Vec::is_empty) {
            return bad("close-ended manifest needs an answer_space".into());
        }
        if h.evaluation == MetricKind::RocAuc && h.positive_label.is_none() {
            return bad("roc-auc manifest needs a positive_label".into());
        }
        let mut ids = HashSet::new();
        for e in &self.examples {
            if !ids.insert(e.id.as_str()) {
                return bad(format!("duplicate example id {}", e.id));
            }
            let needs_label = matches!(
                h.evaluation,
                MetricKind::Accuracy | MetricKind::MeanPerClass | MetricKind::RocAuc
            );
            if needs_label && e.label.is_none() {
                return bad(format!("example {} has no label", e.id));
            }
            if h.evaluation == MetricKind::VqaAccuracy && e.answers.is_empty() {
                return bad(format!("example {} has no reference answers", e.id));
            }
            if let (EvalMode::Close, Some(label), Some(space)) = (h.mode, &e.label, &h.answer_space)
            {
                if !space.contains(label) {
                    return bad(format!(
                        "label {label:?} of {} is not in the answer space",
                        e.id
                    ));
                }
            }
        }
        Ok(())
    }

    /// Support examples must share neither example ids nor images with the
    /// evaluation set.
    pub fn check_disjoint(&self, support: &DatasetManifest) -> Result<(), EvalError> {
        let ids: HashSet<&str> = self.examples.iter().map(|e| e.id.as_str()).collect();
        let images: HashSet<String> = self.image_refs().into_iter().map(|r| r.id).collect();
        for (e, r) in support.examples.iter().zip(support.image_refs()) {
            if ids.contains(e.id.as_str()) {
                return Err(EvalError::SupportOverlap(format!("example id {}", e.id)));
            }
            if images.contains(&r.id) {
                return Err(EvalError::SupportOverlap(format!("image {}", r.id)));
            }
        }
        Ok(())
    }
}
