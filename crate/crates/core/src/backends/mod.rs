//! Abstraction over all external model computation.
//!
//! Three kinds of model sit behind this boundary: a contrastive encoder that
//! places images and texts in one embedding space, a caption generator, and
//! a frozen language model. Each is a trait so the rest of the pipeline can
//! run against the deterministic mocks in [`mock`] or against HTTP-served
//! models in [`remote`].
//!
//! The free functions in this module ([`embed_image`], [`embed_texts`],
//! [`generate_captions`], [`llm_generate`], [`llm_score`]) enforce the
//! contracts every caller relies on: normalized embeddings of the declared
//! dimension, deduplicated captions, trimmed generations, and so on. Trait
//! implementations only return raw model output.

mod config;
pub mod mock;
pub mod remote;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageRef;

pub use config::{BackendConfig, BackendKind, BackendSet, BackendsConfig};

/// Largest number of captions a single image may receive.
pub const MAX_CAPTIONS: u32 = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("cannot decode image {image_id}: {reason}")]
    ImageDecode { image_id: String, reason: String },
    #[error("top-k sampling requested but {0} only supports beam search")]
    SamplingUnsupported(String),
    #[error("prompt has {tokens} tokens, backend window is {window}")]
    ContextLengthExceeded { tokens: usize, window: usize },
    #[error("{0} is generate-only and cannot score continuations")]
    ScoringUnsupported(String),
    #[error("model produced an empty generation")]
    EmptyGeneration,
    #[error("expected embedding of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("remote backend error: {0}")]
    Remote(String),
}

pub type Result<T, E = BackendError> = std::result::Result<T, E>;

/// A finite real vector in the encoder's joint image/text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(BackendError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(BackendError::ZeroNorm);
        }
        Self::new(self.values.iter().map(|v| v / norm).collect())
    }

    /// Plain dot product. Equals cosine similarity when both sides are unit
    /// vectors, which is always the case for vectors produced by
    /// [`embed_image`] and [`embed_texts`].
    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dimension(), other.dimension());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            // Adding +0.0 turns a -0.0 sum into +0.0 so that zero scores
            // tie under total ordering.
            + 0.0
    }
}

/// Decoding strategy implied by a [`GenerationParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Beam { num_beams: u32, length_penalty: f64 },
    TopK { k: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub num_beams: u32,
    pub length_penalty: f64,
    /// Token-level top-k for stochastic sampling. Present means sampling.
    pub top_k: Option<u32>,
    /// Number of captions to return. Unrelated to `top_k`.
    pub num_captions: u32,
    pub max_new_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            num_beams: 5,
            length_penalty: -1.0,
            top_k: None,
            num_captions: 1,
            max_new_tokens: 32,
            seed: None,
        }
    }
}

impl GenerationParams {
    /// Beam search with the default width and length penalty.
    pub fn beam_search() -> Self {
        Self::default()
    }

    /// Stochastic top-k sampling of `num_captions` captions.
    pub fn top_k_sampling(top_k: u32, num_captions: u32, seed: Option<u64>) -> Self {
        Self {
            num_beams: 1,
            top_k: Some(top_k),
            num_captions,
            seed,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_max_new_tokens(mut self, n: u32) -> Self {
        self.max_new_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<Decoding> {
        if self.num_captions == 0 || self.num_captions > MAX_CAPTIONS {
            return Err(BackendError::InvalidParams(format!(
                "num_captions must be in [1, {MAX_CAPTIONS}], got {}",
                self.num_captions
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidParams(
                "max_new_tokens must be positive".into(),
            ));
        }
        if !self.length_penalty.is_finite() {
            return Err(BackendError::InvalidParams(
                "length_penalty must be finite".into(),
            ));
        }
        match self.top_k {
            Some(0) => Err(BackendError::InvalidParams("top_k must be positive".into())),
            Some(k) if self.num_beams == 1 => Ok(Decoding::TopK { k }),
            Some(_) => Err(BackendError::InvalidParams(
                "beam search and top-k sampling are mutually exclusive".into(),
            )),
            None if self.num_beams == 0 => Err(BackendError::InvalidParams(
                "num_beams must be positive".into(),
            )),
            None => Ok(Decoding::Beam {
                num_beams: self.num_beams,
                length_penalty: self.length_penalty,
            }),
        }
    }
}

/// Contrastive image/text encoder.
pub trait EncoderBackend: Send + Sync {
    fn identity(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Raw (not necessarily normalized) image embedding.
    fn encode_image(&self, image: &ImageRef) -> Result<Vec<f64>>;
    /// Raw text embeddings, one per input, in order.
    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;
}

pub trait CaptionBackend: Send + Sync {
    fn identity(&self) -> &str;
    fn supports_sampling(&self) -> bool;
    /// Raw captions; may contain duplicates or blanks.
    fn caption(&self, image: &ImageRef, params: &GenerationParams) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmMode {
    LocalScored,
    RemoteGenerateOnly,
}

/// Log-likelihood of a continuation and the number of tokens it spans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationScore {
    pub log_likelihood: f64,
    pub num_tokens: usize,
}

impl ContinuationScore {
    /// Mean per-token log-likelihood.
    pub fn normalized(&self) -> f64 {
        self.log_likelihood / self.num_tokens.max(1) as f64
    }
}

pub trait LlmBackend: Send + Sync {
    fn identity(&self) -> &str;
    fn mode(&self) -> LlmMode;
    /// Maximum prompt length in tokens, if the backend enforces one.
    fn context_window(&self) -> Option<usize>;
    fn count_tokens(&self, text: &str) -> usize;
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String>;
    /// Only meaningful for [`LlmMode::LocalScored`] backends.
    fn score(&self, prompt: &str, continuation: &str) -> Result<ContinuationScore>;
}

fn to_embedding(raw: Vec<f64>, dimension: usize) -> Result<EmbeddingVector> {
    if raw.len() != dimension {
        return Err(BackendError::DimensionMismatch {
            expected: dimension,
            got: raw.len(),
        });
    }
    EmbeddingVector::new(raw)?.normalized()
}

pub fn embed_image(backend: &dyn EncoderBackend, image: &ImageRef) -> Result<EmbeddingVector> {
    to_embedding(backend.encode_image(image)?, backend.dimension())
}

pub fn embed_texts<S: AsRef<str>>(
    backend: &dyn EncoderBackend,
    texts: &[S],
) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Err(BackendError::InvalidInput("no texts to embed".into()));
    }
    let texts: Vec<&str> = texts.iter().map(AsRef::as_ref).collect();
    if let Some(pos) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(BackendError::InvalidInput(format!("text #{pos} is blank")));
    }
    let raw = backend.encode_texts(&texts)?;
    if raw.len() != texts.len() {
        return Err(BackendError::Remote(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            raw.len()
        )));
    }
    raw.into_iter()
        .map(|v| to_embedding(v, backend.dimension()))
        .collect()
}

/// Runs the captioner and returns at most `params.num_captions` distinct,
/// non-blank captions in generation order.
pub fn generate_captions(
    backend: &dyn CaptionBackend,
    image: &ImageRef,
    params: &GenerationParams,
) -> Result<Vec<String>> {
    if let Decoding::TopK { .. } = params.validate()? {
        if !backend.supports_sampling() {
            return Err(BackendError::SamplingUnsupported(
                backend.identity().to_string(),
            ));
        }
    }
    let raw = backend.caption(image, params)?;
    let mut captions = dedup_preserving_order(raw.into_iter().filter(|c| !c.trim().is_empty()));
    captions.truncate(params.num_captions as usize);
    if captions.is_empty() {
        return Err(BackendError::EmptyGeneration);
    }
    Ok(captions)
}

/// Keeps the first occurrence of every string.
pub fn dedup_preserving_order<I: IntoIterator<Item = String>>(items: I) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

fn check_window(backend: &dyn LlmBackend, prompt: &str) -> Result<()> {
    if let Some(window) = backend.context_window() {
        let tokens = backend.count_tokens(prompt);
        if tokens > window {
            return Err(BackendError::ContextLengthExceeded { tokens, window });
        }
    }
    Ok(())
}

pub fn llm_generate(
    backend: &dyn LlmBackend,
    prompt: &str,
    params: &GenerationParams,
) -> Result<String> {
    if prompt.trim().is_empty() {
        return Err(BackendError::InvalidInput("empty prompt".into()));
    }
    if params.num_beams == 0 || params.max_new_tokens == 0 {
        return Err(BackendError::InvalidParams(
            "num_beams and max_new_tokens must be positive".into(),
        ));
    }
    check_window(backend, prompt)?;
    let text = backend.generate(prompt, params)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(BackendError::EmptyGeneration);
    }
    Ok(text.to_string())
}

/// Total log-likelihood of `continuation` given `prompt`.
pub fn llm_score(backend: &dyn LlmBackend, prompt: &str, continuation: &str) -> Result<f64> {
    llm_score_detailed(backend, prompt, continuation).map(|s| s.log_likelihood)
}

pub fn llm_score_detailed(
    backend: &dyn LlmBackend,
    prompt: &str,
    continuation: &str,
) -> Result<ContinuationScore> {
    if backend.mode() != LlmMode::LocalScored {
        return Err(BackendError::ScoringUnsupported(
            backend.identity().to_string(),
        ));
    }
    if continuation.trim().is_empty() {
        return Err(BackendError::InvalidInput("empty continuation".into()));
    }
    check_window(backend, prompt)?;
    let score = backend.score(prompt, continuation)?;
    if !score.log_likelihood.is_finite() {
        return Err(BackendError::NonFinite);
    }
    Ok(score)
}
