//! Vision modules: tagger, attribute classifier, intensive captioner and OCR
//! passthrough. Each turns an image into one field of a
//! [`VisualDescription`]; [`VisionStack::describe`] runs the enabled ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{
    embed_image, embed_texts, generate_captions, BackendError, BackendSet, CaptionBackend,
    EmbeddingVector, EncoderBackend, GenerationParams, MAX_CAPTIONS,
};
use crate::image::ImageRef;
use crate::prompting::TaskKind;
use crate::vocabulary::{AttributeVocabulary, TagVocabulary};

/// The single tag prompt. No prompt ensembling.
pub const TAG_PROMPT: &str = "A photo of {classname}";

/// Default token-level k for intensive captioning.
pub const DEFAULT_CAPTION_TOP_K: u32 = 50;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("attribute scope contains no descriptors")]
    EmptyScope,
    #[error("class {0:?} is not in the attribute vocabulary")]
    UnknownClass(String),
    #[error("module {0} is enabled but no {0} vocabulary was loaded")]
    MissingVocabulary(&'static str),
    #[error("invalid module configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn tag_prompt(tag: &str) -> String {
    TAG_PROMPT.replace("{classname}", tag)
}

/// Descriptor sentence in the classification-by-description style:
/// `A photo of {class}, which has {descriptor}` and its variants.
pub fn attribute_prompt(class: &str, descriptor: &str) -> String {
    let first = descriptor
        .split_whitespace()
        .next()
        .unwrap_or("")
        .to_lowercase();
    let clause = match first.as_str() {
        "a" | "an" | "used" => format!("which is {descriptor}"),
        "has" | "have" | "is" | "are" | "often" | "typically" | "may" | "can" => {
            format!("which {descriptor}")
        }
        _ => format!("which has {descriptor}"),
    };
    format!("{}, {clause}", tag_prompt(class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    pub score: f64,
}

/// Indices of the `k` highest scores, best first. Equal scores keep index
/// order, so the vocabulary order breaks ties.
pub fn rank_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Precomputed prompt embeddings for every tag.
#[derive(Debug, Clone)]
pub struct TagIndex {
    tags: Vec<String>,
    embeddings: Vec<EmbeddingVector>,
}

impl TagIndex {
    pub fn build(encoder: &dyn EncoderBackend, vocab: &TagVocabulary) -> Result<Self, VisionError> {
        if vocab.is_empty() {
            return Err(VisionError::EmptyVocabulary);
        }
        let prompts: Vec<String> = vocab.tags().iter().map(|t| tag_prompt(t)).collect();
        Ok(Self {
            tags: vocab.tags().to_vec(),
            embeddings: embed_texts(encoder, &prompts)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn rank(&self, image: &EmbeddingVector, k: usize) -> Result<Vec<ScoredText>, VisionError> {
        if k == 0 {
            return Err(VisionError::InvalidK);
        }
        let scores: Vec<f64> = self.embeddings.iter().map(|e| image.dot(e)).collect();
        Ok(rank_top_k(&scores, k)
            .into_iter()
            .map(|i| ScoredText {
                text: self.tags[i].clone(),
                score: scores[i],
            })
            .collect())
    }
}

/// Top-k tags by cosine similarity between the image and
/// `A photo of {tag}`.
pub fn tag_image(
    image: &ImageRef,
    vocab: &TagVocabulary,
    encoder: &dyn EncoderBackend,
    k: usize,
) -> Result<Vec<ScoredText>, VisionError> {
    if k == 0 {
        return Err(VisionError::InvalidK);
    }
    let index = TagIndex::build(encoder, vocab)?;
    index.rank(&embed_image(encoder, image)?, k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum AttributeScope {
    /// Descriptors of the best `n` tagged classes.
    TopTagged(usize),
    AllClasses,
    Classes(Vec<String>),
}

#[derive(Debug, Clone)]
struct AttributeEntry {
    class: usize,
    descriptor: String,
}

/// Precomputed descriptor-sentence embeddings for every (class, descriptor).
#[derive(Debug, Clone)]
pub struct AttributeIndex {
    classes: Vec<String>,
    entries: Vec<AttributeEntry>,
    embeddings: Vec<EmbeddingVector>,
}

impl AttributeIndex {
    pub fn build(
        encoder: &dyn EncoderBackend,
        attrs: &AttributeVocabulary,
    ) -> Result<Self, VisionError> {
        let classes: Vec<String> = attrs.classes().map(str::to_string).collect();
        let mut entries = Vec::new();
        let mut prompts = Vec::new();
        for (ci, (class, descriptors)) in attrs.entries().iter().enumerate() {
            for d in descriptors {
                prompts.push(attribute_prompt(class, d));
                entries.push(AttributeEntry {
                    class: ci,
                    descriptor: d.clone(),
                });
            }
        }
        let embeddings = if prompts.is_empty() {
            Vec::new()
        } else {
            embed_texts(encoder, &prompts)?
        };
        Ok(Self {
            classes,
            entries,
            embeddings,
        })
    }

    /// Ranks descriptors of the listed classes. Descriptors shared across
    /// classes appear once, at their best score.
    pub fn rank(
        &self,
        image: &EmbeddingVector,
        k: usize,
        classes: &[String],
    ) -> Result<Vec<ScoredText>, VisionError> {
        if k == 0 {
            return Err(VisionError::InvalidK);
        }
        let mut wanted = BTreeSet::new();
        for c in classes {
            let i = self
                .classes
                .iter()
                .position(|x| x == c)
                .ok_or_else(|| VisionError::UnknownClass(c.clone()))?;
            wanted.insert(i);
        }
        let pool: Vec<usize> = (0..self.entries.len())
            .filter(|&i| wanted.contains(&self.entries[i].class))
            .collect();
        if pool.is_empty() {
            return Err(VisionError::EmptyScope);
        }
        let scores: Vec<f64> = pool
            .iter()
            .map(|&i| image.dot(&self.embeddings[i]))
            .collect();
        let mut seen = BTreeSet::new();
        Ok(rank_top_k(&scores, scores.len())
            .into_iter()
            .filter(|&j| seen.insert(self.entries[pool[j]].descriptor.as_str()))
            .take(k)
            .map(|j| ScoredText {
                text: self.entries[pool[j]].descriptor.clone(),
                score: scores[j],
            })
            .collect())
    }

    pub fn all_classes(&self) -> &[String] {
        &self.classes
    }
}

/// Resolves a scope to concrete classes. `TopTagged` needs the ranked tags.
fn scope_classes(
    scope: &AttributeScope,
    index: &AttributeIndex,
    ranked_tags: Option<&[ScoredText]>,
) -> Result<Vec<String>, VisionError> {
    match scope {
        AttributeScope::AllClasses => Ok(index.all_classes().to_vec()),
        AttributeScope::Classes(c) => Ok(c.clone()),
        AttributeScope::TopTagged(n) => Ok(ranked_tags
            .unwrap_or_default()
            .iter()
            .filter(|t| index.all_classes().contains(&t.text))
            .take(*n)
            .map(|t| t.text.clone())
            .collect()),
    }
}

/// Top-k descriptors over the in-scope classes. `TopTagged` scopes run the
/// tagger over the attribute vocabulary's classes first.
pub fn attribute_image(
    image: &ImageRef,
    attrs: &AttributeVocabulary,
    encoder: &dyn EncoderBackend,
    k: usize,
    scope: &AttributeScope,
) -> Result<Vec<ScoredText>, VisionError> {
    if k == 0 {
        return Err(VisionError::InvalidK);
    }
    let index = AttributeIndex::build(encoder, attrs)?;
    let emb = embed_image(encoder, image)?;
    let tags = match scope {
        AttributeScope::TopTagged(n) => {
            let vocab = TagVocabulary::from_classes("attributes", index.all_classes())
                .map_err(|_| VisionError::EmptyScope)?;
            Some(TagIndex::build(encoder, &vocab)?.rank(&emb, *n)?)
        }
        _ => None,
    };
    let classes = scope_classes(scope, &index, tags.as_deref())?;
    index.rank(&emb, k, &classes)
}

/// Intensive captioning: deduplicated captions in generation order.
pub fn caption_image(
    image: &ImageRef,
    captioner: &dyn CaptionBackend,
    params: &GenerationParams,
) -> Result<Vec<String>, VisionError> {
    Ok(generate_captions(captioner, image, params)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Tags,
    Attributes,
    Captions,
    Ocr,
}

impl std::str::FromStr for Module {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "tags" => Ok(Self::Tags),
            "attributes" => Ok(Self::Attributes),
            "captions" => Ok(Self::Captions),
            "ocr" => Ok(Self::Ocr),
            other => Err(format!(
                "unknown module {other:?} (tags | attributes | captions | ocr)"
            )),
        }
    }
}

impl std::fmt::Display for Module {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tags => "tags",
            Self::Attributes => "attributes",
            Self::Captions => "captions",
            Self::Ocr => "ocr",
        })
    }
}

pub fn parse_modules(list: &str) -> Result<BTreeSet<Module>, String> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleConfig {
    pub top_k_tags: usize,
    pub top_k_attributes: usize,
    pub num_captions: u32,
    /// Token-level k when sampling more than one caption.
    pub caption_top_k: u32,
    pub caption_seed: u64,
    pub enabled_modules: BTreeSet<Module>,
    pub attribute_scope: AttributeScope,
}

impl Default for ModuleConfig {
    fn default() -> Self {
        Self::recognition()
    }
}

impl ModuleConfig {
    fn with_modules(modules: &[Module]) -> Self {
        Self {
            top_k_tags: 5,
            top_k_attributes: 5,
            num_captions: 1,
            caption_top_k: DEFAULT_CAPTION_TOP_K,
            caption_seed: 0,
            enabled_modules: modules.iter().copied().collect(),
            attribute_scope: AttributeScope::AllClasses,
        }
    }

    /// Tags and attributes; no captioning.
    pub fn recognition() -> Self {
        Self {
            attribute_scope: AttributeScope::TopTagged(1),
            ..Self::with_modules(&[Module::Tags, Module::Attributes])
        }
    }

    /// Intensive captioning only, up to the caption cap.
    pub fn vqa() -> Self {
        Self {
            num_captions: MAX_CAPTIONS,
            ..Self::with_modules(&[Module::Captions])
        }
    }

    /// Everything, with a single beam-searched caption.
    pub fn memes() -> Self {
        Self::with_modules(&[
            Module::Tags,
            Module::Attributes,
            Module::Captions,
            Module::Ocr,
        ])
    }

    pub fn sentiment() -> Self {
        Self::memes()
    }

    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Recognition => Self::recognition(),
            TaskKind::Vqa => Self::vqa(),
            TaskKind::Memes => Self::memes(),
            TaskKind::Sentiment => Self::sentiment(),
        }
    }

    pub fn with_enabled(mut self, modules: BTreeSet<Module>) -> Self {
        self.enabled_modules = modules;
        self
    }

    pub fn is_enabled(&self, m: Module) -> bool {
        self.enabled_modules.contains(&m)
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        if self.enabled_modules.is_empty() {
            return Err(VisionError::InvalidConfig("no modules enabled".into()));
        }
        if self.top_k_tags == 0 || self.top_k_attributes == 0 {
            return Err(VisionError::InvalidK);
        }
        if self.num_captions == 0 || self.num_captions > MAX_CAPTIONS {
            return Err(VisionError::InvalidConfig(format!(
                "num_captions must be in [1, {MAX_CAPTIONS}]"
            )));
        }
        Ok(())
    }

    /// One caption uses beam search; more use top-k sampling.
    pub fn caption_params(&self) -> GenerationParams {
        if self.num_captions == 1 {
            GenerationParams::beam_search().with_seed(self.caption_seed)
        } else {
            GenerationParams::top_k_sampling(
                self.caption_top_k,
                self.num_captions,
                Some(self.caption_seed),
            )
        }
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("module config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// The textual description of one image. Fields of disabled modules are
/// absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualDescription {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<ScoredText>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<ScoredText>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
}

impl VisualDescription {
    pub fn is_empty(&self) -> bool {
        self.tags.as_ref().is_none_or(Vec::is_empty)
            && self.attributes.as_ref().is_none_or(Vec::is_empty)
            && self.captions.as_ref().is_none_or(Vec::is_empty)
            && self.ocr_text.is_none()
    }

    /// Keeps the first `n` captions.
    pub fn with_caption_prefix(&self, n: usize) -> Self {
        let mut d = self.clone();
        if let Some(c) = &mut d.captions {
            c.truncate(n);
        }
        d
    }

    /// Drops the fields of modules not in `modules`.
    pub fn restricted_to(&self, modules: &BTreeSet<Module>) -> Self {
        Self {
            tags: self
                .tags
                .clone()
                .filter(|_| modules.contains(&Module::Tags)),
            attributes: self
                .attributes
                .clone()
                .filter(|_| modules.contains(&Module::Attributes)),
            captions: self
                .captions
                .clone()
                .filter(|_| modules.contains(&Module::Captions)),
            ocr_text: self
                .ocr_text
                .clone()
                .filter(|_| modules.contains(&Module::Ocr)),
        }
    }
}

/// Stores OCR text, trimming only outer whitespace.
pub fn attach_ocr(mut description: VisualDescription, text: &str) -> VisualDescription {
    description.ocr_text = Some(text.trim().to_string());
    description
}

/// Backends plus precomputed vocabulary indices.
#[derive(Clone)]
pub struct VisionStack {
    encoder: Arc<dyn EncoderBackend>,
    captioner: Arc<dyn CaptionBackend>,
    tags: Option<Arc<TagIndex>>,
    attributes: Option<Arc<AttributeIndex>>,
}

impl VisionStack {
    pub fn new(
        backends: &BackendSet,
        tags: Option<&TagVocabulary>,
        attributes: Option<&AttributeVocabulary>,
    ) -> Result<Self, VisionError> {
        let tag_index = tags
            .map(|v| TagIndex::build(backends.encoder.as_ref(), v))
            .transpose()?;
        let attr_index = attributes
            .map(|a| AttributeIndex::build(backends.encoder.as_ref(), a))
            .transpose()?;
        Ok(Self {
            encoder: backends.encoder.clone(),
            captioner: backends.captioner.clone(),
            tags: tag_index.map(Arc::new),
            attributes: attr_index.map(Arc::new),
        })
    }

    pub fn encoder_identity(&self) -> &str {
        self.encoder.identity()
    }

    pub fn captioner_identity(&self) -> &str {
        self.captioner.identity()
    }

    /// Runs the enabled modules. OCR text comes from the caller (datasets
    /// ship it); an enabled OCR module with no text leaves the field empty.
    pub fn describe(
        &self,
        image: &ImageRef,
        config: &ModuleConfig,
        ocr: Option<&str>,
    ) -> Result<VisualDescription, VisionError> {
        config.validate()?;
        let want_tags = config.is_enabled(Module::Tags);
        let want_attrs = config.is_enabled(Module::Attributes);
        let scope_needs_tags = matches!(config.attribute_scope, AttributeScope::TopTagged(_));

        let mut out = VisualDescription::default();
        let embedding = if want_tags || want_attrs {
            Some(embed_image(self.encoder.as_ref(), image)?)
        } else {
            None
        };

        let mut ranked_tags = None;
        if want_tags || (want_attrs && scope_needs_tags) {
            let index = self
                .tags
                .as_ref()
                .ok_or(VisionError::MissingVocabulary("tags"))?;
            let emb = embedding.as_ref().expect("embedding computed for tags");
            let k = match config.attribute_scope {
                AttributeScope::TopTagged(n) if want_attrs => config.top_k_tags.max(n),
                _ => config.top_k_tags,
            };
            ranked_tags = Some(index.rank(emb, k)?);
        }
        if want_attrs {
            let index = self
                .attributes
                .as_ref()
                .ok_or(VisionError::MissingVocabulary("attributes"))?;
            let emb = embedding
                .as_ref()
                .expect("embedding computed for attributes");
            let classes = scope_classes(&config.attribute_scope, index, ranked_tags.as_deref())?;
            out.attributes = Some(index.rank(emb, config.top_k_attributes, &classes)?);
        }
        if want_tags {
            let mut tags = ranked_tags.expect("tags ranked");
            tags.truncate(config.top_k_tags);
            out.tags = Some(tags);
        }
        if config.is_enabled(Module::Captions) {
            out.captions = Some(caption_image(
                image,
                self.captioner.as_ref(),
                &config.caption_params(),
            )?);
        }
        if config.is_enabled(Module::Ocr) {
            if let Some(text) = ocr {
                out = attach_ocr(out, text);
            }
        }
        Ok(out)
    }

    /// Describes many images in parallel. A failing image yields a record
    /// with `error` set rather than aborting the batch.
    pub fn describe_batch(
        &self,
        items: &[(ImageRef, Option<String>)],
        config: &ModuleConfig,
    ) -> Vec<DescriptionRecord> {
        let backends = self.identities();
        let config_hash = config.hash();
        items
            .par_iter()
            .map(|(image, ocr)| {
                let (description, error) = match self.describe(image, config, ocr.as_deref()) {
                    Ok(d) => (d, None),
                    Err(e) => (VisualDescription::default(), Some(e.to_string())),
                };
                DescriptionRecord {
                    image_id: image.id.clone(),
                    description,
                    error,
                    config_hash: config_hash.clone(),
                    backends: backends.clone(),
                }
            })
            .collect()
    }

    pub fn identities(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("encoder".to_string(), self.encoder.identity().to_string()),
            (
                "captioner".to_string(),
                self.captioner.identity().to_string(),
            ),
        ])
    }
}

/// One line of a descriptions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub image_id: String,
    #[serde(flatten)]
    pub description: VisualDescription,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: String,
    pub backends: BTreeMap<String, String>,
}

pub fn save_descriptions(
    records: &[DescriptionRecord],
    path: impl AsRef<Path>,
) -> Result<(), VisionError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_descriptions(path: impl AsRef<Path>) -> Result<Vec<DescriptionRecord>, VisionError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::from)?);
    }
    Ok(out)
}
