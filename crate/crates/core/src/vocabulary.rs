//! Tag and attribute vocabularies.
//!
//! The tag vocabulary is the canonicalized union of class-name lists from
//! several source datasets. The attribute vocabulary maps each tag to short
//! visual descriptors generated by a language model.
//!
//! Both persist as line-delimited JSON: a header record followed by one
//! record per entry.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{llm_generate, BackendError, GenerationParams, LlmBackend};

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_ATTRIBUTE_TEMPLATE: &str =
    "What are useful visual features for distinguishing a {classname} in a photo?";

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("source {0:?} has no class names")]
    EmptySource(String),
    #[error("no sources given")]
    NoSources,
    #[error("attribute template must contain {{classname}}")]
    MissingPlaceholder,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported vocabulary schema version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u32 },
    #[error("malformed vocabulary file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("attribute class {0:?} is not in the tag vocabulary")]
    UnknownClass(String),
}

/// Lowercase, trim, and collapse inner whitespace.
pub fn canonicalize(tag: &str) -> String {
    tag.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocabulary {
    tags: Vec<String>,
    sources: Vec<String>,
    version: String,
}

impl TagVocabulary {
    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn with_version(mut self, version: impl Into<String>) -> Self {
        self.version = version.into();
        self
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    /// A vocabulary straight from one list, e.g. a dataset's class names.
    pub fn from_classes<S: AsRef<str>>(
        source: &str,
        classes: &[S],
    ) -> Result<Self, VocabularyError> {
        build_tag_vocabulary(&[(
            source.to_string(),
            classes.iter().map(|c| c.as_ref().to_string()).collect(),
        )])
    }
}

/// Canonicalized union of the class lists, in first-occurrence order across
/// sources.
pub fn build_tag_vocabulary(
    class_lists: &[(String, Vec<String>)],
) -> Result<TagVocabulary, VocabularyError> {
    if class_lists.is_empty() {
        return Err(VocabularyError::NoSources);
    }
    let mut seen = HashSet::new();
    let mut tags = Vec::new();
    let mut sources = Vec::new();
    for (source, classes) in class_lists {
        let canonical: Vec<String> = classes
            .iter()
            .map(|c| canonicalize(c))
            .filter(|c| !c.is_empty())
            .collect();
        if canonical.is_empty() {
            return Err(VocabularyError::EmptySource(source.clone()));
        }
        if !sources.contains(source) {
            sources.push(source.clone());
        }
        for tag in canonical {
            if seen.insert(tag.clone()) {
                tags.push(tag);
            }
        }
    }
    Ok(TagVocabulary {
        tags,
        sources,
        version: SCHEMA_VERSION.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    entries: IndexMap<String, Vec<String>>,
    generator_identity: String,
}

/// A class whose generation produced no usable descriptors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttributeWarning {
    pub class: String,
    pub reason: String,
}

impl AttributeVocabulary {
    /// Descriptor lists are deduplicated; blank descriptors dropped.
    pub fn new(
        entries: impl IntoIterator<Item = (String, Vec<String>)>,
        generator_identity: impl Into<String>,
    ) -> Self {
        let entries = entries
            .into_iter()
            .map(|(class, descriptors)| {
                let cleaned = crate::backends::dedup_preserving_order(
                    descriptors
                        .into_iter()
                        .map(|d| d.trim().to_string())
                        .filter(|d| !d.is_empty()),
                );
                (class, cleaned)
            })
            .collect();
        Self {
            entries,
            generator_identity: generator_identity.into(),
        }
    }

    pub fn entries(&self) -> &IndexMap<String, Vec<String>> {
        &self.entries
    }

    pub fn descriptors(&self, class: &str) -> Option<&[String]> {
        self.entries.get(class).map(Vec::as_slice)
    }

    pub fn generator_identity(&self) -> &str {
        &self.generator_identity
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Every class key must be a tag.
    pub fn check_against(&self, tags: &TagVocabulary) -> Result<(), VocabularyError> {
        match self.entries.keys().find(|k| !tags.contains(k)) {
            Some(k) => Err(VocabularyError::UnknownClass(k.clone())),
            None => Ok(()),
        }
    }
}

/// Splits raw model output into descriptors: one per line, list markers
/// ("-", "*", "•", "1.", "2)") removed, blanks dropped.
pub fn parse_descriptors(raw: &str) -> Vec<String> {
    let items = raw.lines().filter_map(|line| {
        let mut s = line.trim();
        s = s.trim_start_matches(['-', '*', '•']).trim_start();
        let digits = s.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                s = r.trim_start();
            }
        }
        let s = s.trim();
        (!s.is_empty()).then(|| s.to_string())
    });
    crate::backends::dedup_preserving_order(items)
}

/// Asks the language model for descriptors of every tag. A class whose
/// generation fails or parses to nothing maps to an empty list and is
/// reported; an unreachable backend aborts the whole run.
pub fn generate_attributes(
    vocab: &TagVocabulary,
    llm: &dyn LlmBackend,
    template: &str,
) -> Result<(AttributeVocabulary, Vec<AttributeWarning>), VocabularyError> {
    if !template.contains("{classname}") {
        return Err(VocabularyError::MissingPlaceholder);
    }
    let params = GenerationParams::default().with_max_new_tokens(128);
    let mut entries = Vec::with_capacity(vocab.len());
    let mut warnings = Vec::new();
    for class in vocab.tags() {
        let prompt = template.replace("{classname}", class);
        let descriptors = match llm_generate(llm, &prompt, &params) {
            Ok(raw) => parse_descriptors(&raw),
            Err(e @ BackendError::Unavailable(_)) => return Err(e.into()),
            Err(e) => {
                warnings.push(AttributeWarning {
                    class: class.clone(),
                    reason: e.to_string(),
                });
                entries.push((class.clone(), Vec::new()));
                continue;
            }
        };
        if descriptors.is_empty() {
            warnings.push(AttributeWarning {
                class: class.clone(),
                reason: "no descriptors in model output".into(),
            });
        }
        entries.push((class.clone(), descriptors));
    }
    Ok((AttributeVocabulary::new(entries, llm.identity()), warnings))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vocabulary {
    Tags(TagVocabulary),
    Attributes(AttributeVocabulary),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Tags,
    Attributes,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator_identity: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TagRecord {
    tag: String,
}

#[derive(Serialize, Deserialize)]
struct AttributeRecord {
    class: String,
    descriptors: Vec<String>,
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<(), VocabularyError> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn save_vocabulary(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<(), VocabularyError> {
    let mut w = BufWriter::new(File::create(path)?);
    match vocab {
        Vocabulary::Tags(t) => {
            write_line(
                &mut w,
                &Header {
                    kind: Kind::Tags,
                    version: SCHEMA_VERSION,
                    generator_identity: None,
                    sources: t.sources.clone(),
                    label: Some(t.version.clone()),
                },
            )?;
            for tag in &t.tags {
                write_line(&mut w, &TagRecord { tag: tag.clone() })?;
            }
        }
        Vocabulary::Attributes(a) => {
            write_line(
                &mut w,
                &Header {
                    kind: Kind::Attributes,
                    version: SCHEMA_VERSION,
                    generator_identity: Some(a.generator_identity.clone()),
                    sources: Vec::new(),
                    label: None,
                },
            )?;
            for (class, descriptors) in &a.entries {
                write_line(
                    &mut w,
                    &AttributeRecord {
                        class: class.clone(),
                        descriptors: descriptors.clone(),
                    },
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, n: usize) -> Result<T, VocabularyError> {
    serde_json::from_str(line).map_err(|e| VocabularyError::Malformed {
        line: n,
        reason: e.to_string(),
    })
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary, VocabularyError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()));
    let (n, first) = lines
        .next()
        .transpose()?
        .ok_or(VocabularyError::Malformed {
            line: 1,
            reason: "missing header".into(),
        })?;
    // Check the version before the full header so newer schemas with
    // unfamiliar fields still report a version mismatch.
    let raw: serde_json::Value = parse_line(&first, n)?;
    let version =
        raw.get("version")
            .and_then(|v| v.as_u64())
            .ok_or(VocabularyError::Malformed {
                line: n,
                reason: "header lacks a numeric version".into(),
            })?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(VocabularyError::SchemaVersionMismatch {
            found: version as u32,
        });
    }
    let header: Header = parse_line(&first, n)?;
    match header.kind {
        Kind::Tags => {
            let mut tags = Vec::new();
            for line in lines {
                let (n, line) = line?;
                tags.push(parse_line::<TagRecord>(&line, n)?.tag);
            }
            Ok(Vocabulary::Tags(TagVocabulary {
                tags,
                sources: header.sources,
                version: header.label.unwrap_or_else(|| SCHEMA_VERSION.to_string()),
            }))
        }
        Kind::Attributes => {
            let mut entries = IndexMap::new();
            for line in lines {
                let (n, line) = line?;
                let rec: AttributeRecord = parse_line(&line, n)?;
                entries.insert(rec.class, rec.descriptors);
            }
            Ok(Vocabulary::Attributes(AttributeVocabulary {
                entries,
                generator_identity: header.generator_identity.unwrap_or_default(),
            }))
        }
    }
}

pub fn load_tag_vocabulary(path: impl AsRef<Path>) -> Result<TagVocabulary, VocabularyError> {
    match load_vocabulary(path)? {
        Vocabulary::Tags(t) => Ok(t),
        Vocabulary::Attributes(_) => Err(VocabularyError::Malformed {
            line: 1,
            reason: "expected a tags vocabulary, found attributes".into(),
        }),
    }
}

pub fn load_attribute_vocabulary(
    path: impl AsRef<Path>,
) -> Result<AttributeVocabulary, VocabularyError> {
    match load_vocabulary(path)? {
        Vocabulary::Attributes(a) => Ok(a),
        Vocabulary::Tags(_) => Err(VocabularyError::Malformed {
            line: 1,
            reason: "expected an attributes vocabulary, found tags".into(),
        }),
    }
}
