//! Deterministic stand-ins for the encoder, captioner and language model.
//!
//! Every mock is a keyed lookup table with a seeded fallback, so identical
//! inputs always produce identical outputs. A [`MockWorld`] bundles all three
//! and can be loaded from JSON, which is how the CLI and service run without
//! model weights.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendError, CaptionBackend, ContinuationScore, Decoding, EncoderBackend, GenerationParams,
    LlmBackend, LlmMode, Result,
};
use crate::image::ImageRef;

/// Stable 64-bit seed derived from a list of string parts.
pub fn stable_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

fn hashed_vector(namespace: &str, key: &str, seed: u64, dimension: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[namespace, key, &seed.to_string()]));
    (0..dimension).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

#[derive(Debug, Clone)]
struct NearText {
    text: String,
    noise: f64,
}

/// Encoder backed by explicit vectors, with hash-seeded vectors for
/// anything not in its tables.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    identity: String,
    dimension: usize,
    seed: u64,
    images: HashMap<String, Vec<f64>>,
    near: HashMap<String, NearText>,
    texts: HashMap<String, Vec<f64>>,
}

impl MockEncoder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            identity: format!("mock-encoder/d{dimension}"),
            dimension,
            seed: 0,
            images: HashMap::new(),
            near: HashMap::new(),
            texts: HashMap::new(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity = identity.into();
        self
    }

    pub fn with_image(mut self, id: impl Into<String>, vector: Vec<f64>) -> Self {
        self.images.insert(id.into(), vector);
        self
    }

    pub fn with_text(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.texts.insert(text.into(), vector);
        self
    }

    /// The image embeds as the unit embedding of `text` plus `noise` times
    /// a hash-seeded unit vector. `noise = 0` makes image and text identical.
    pub fn with_image_near_text(
        mut self,
        id: impl Into<String>,
        text: impl Into<String>,
        noise: f64,
    ) -> Self {
        self.near.insert(
            id.into(),
            NearText {
                text: text.into(),
                noise,
            },
        );
        self
    }

    fn text_vector(&self, text: &str) -> Vec<f64> {
        self.texts
            .get(text)
            .cloned()
            .unwrap_or_else(|| hashed_vector("text", text, self.seed, self.dimension))
    }
}

impl EncoderBackend for MockEncoder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode_image(&self, image: &ImageRef) -> Result<Vec<f64>> {
        if let Some(v) = self.images.get(&image.id) {
            return Ok(v.clone());
        }
        if let Some(near) = self.near.get(&image.id) {
            let base = unit(&self.text_vector(&near.text));
            if near.noise == 0.0 {
                return Ok(base);
            }
            let jitter = unit(&hashed_vector(
                "noise",
                &image.id,
                self.seed,
                self.dimension,
            ));
            return Ok(base
                .iter()
                .zip(jitter)
                .map(|(b, j)| b + near.noise * j)
                .collect());
        }
        Ok(hashed_vector("image", &image.id, self.seed, self.dimension))
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.text_vector(t)).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionPolicy {
    /// Return the pool in order; sampling takes a prefix.
    #[default]
    Prefix,
    /// Sampling draws from the pool with replacement, seeded by
    /// `(params.seed, image id)`. Beam search still returns the prefix.
    Sample,
}

#[derive(Debug, Clone)]
pub struct MockCaptioner {
    identity: String,
    pools: HashMap<String, Vec<String>>,
    default_pool: Vec<String>,
    policy: CaptionPolicy,
    supports_sampling: bool,
}

impl MockCaptioner {
    pub fn prefix(default_pool: Vec<String>) -> Self {
        Self {
            identity: "mock-captioner".into(),
            pools: HashMap::new(),
            default_pool,
            policy: CaptionPolicy::Prefix,
            supports_sampling: true,
        }
    }

    pub fn sampling(default_pool: Vec<String>) -> Self {
        Self {
            policy: CaptionPolicy::Sample,
            ..Self::prefix(default_pool)
        }
    }

    pub fn beam_only(mut self) -> Self {
        self.supports_sampling = false;
        self
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity = identity.into();
        self
    }

    pub fn with_pool(mut self, image_id: impl Into<String>, pool: Vec<String>) -> Self {
        self.pools.insert(image_id.into(), pool);
        self
    }
}

impl CaptionBackend for MockCaptioner {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn supports_sampling(&self) -> bool {
        self.supports_sampling
    }

    fn caption(&self, image: &ImageRef, params: &GenerationParams) -> Result<Vec<String>> {
        let pool = self.pools.get(&image.id).unwrap_or(&self.default_pool);
        if pool.is_empty() {
            return Ok(Vec::new());
        }
        let n = params.num_captions as usize;
        let prefix = || pool.iter().take(n).cloned().collect();
        Ok(match (params.validate()?, self.policy) {
            (Decoding::Beam { .. }, _) | (Decoding::TopK { .. }, CaptionPolicy::Prefix) => prefix(),
            (Decoding::TopK { .. }, CaptionPolicy::Sample) => {
                let seed = params.seed.unwrap_or(0).to_string();
                let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[&seed, &image.id]));
                (0..n)
                    .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                    .collect()
            }
        })
    }
}

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "is", "are", "in", "on", "at", "with", "and", "or", "to", "it", "its",
    "this", "that", "there", "photo", "picture", "image", "written", "some", "by", "for", "from",
];

const SECTION_HEADERS: &[&str] = &[
    "Tags:",
    "Tag:",
    "Attributes:",
    "Captions:",
    "Caption:",
    "OCR:",
];

/// How the mock language model answers a `generate` call. Rules are tried
/// in order; the first that yields text wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum GenerationRule {
    /// Text after the last occurrence of `marker`.
    EchoAfter {
        marker: String,
    },
    Constant {
        text: String,
    },
    /// First item listed in a section of the final prompt block.
    FirstListed {
        section: String,
    },
    /// Most frequent non-stopword in the descriptive lines of the final
    /// prompt block. Ties go to the earliest occurrence.
    MajorityToken {
        #[serde(default)]
        stopwords: Option<Vec<String>>,
    },
    /// Response of the first entry whose key phrase occurs in the prompt.
    Keyed {
        entries: Vec<KeyedResponse>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyedResponse {
    pub key: String,
    pub response: String,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    let hay = words(haystack);
    let needle = words(phrase);
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// The final block of a (possibly few-shot) prompt.
fn query_block(prompt: &str) -> &str {
    prompt.rsplit("\n\n").next().unwrap_or(prompt)
}

/// Descriptive content of the query block: everything except the question
/// and answer lines, with section headers removed.
fn descriptive_words(prompt: &str) -> Vec<String> {
    query_block(prompt)
        .lines()
        .filter(|l| !l.starts_with("Question:") && !l.starts_with("Short Answer:"))
        .flat_map(|l| {
            let body = SECTION_HEADERS
                .iter()
                .find_map(|h| l.strip_prefix(h))
                .unwrap_or(l);
            words(body)
        })
        .collect()
}

impl GenerationRule {
    fn apply(&self, prompt: &str) -> Option<String> {
        match self {
            Self::EchoAfter { marker } => prompt
                .rfind(marker.as_str())
                .map(|i| prompt[i + marker.len()..].trim().to_string()),
            Self::Constant { text } => Some(text.clone()),
            Self::FirstListed { section } => {
                let header = format!("{section}:");
                let block = query_block(prompt);
                let mut lines = block.lines();
                while let Some(line) = lines.next() {
                    if let Some(rest) = line.strip_prefix(&header) {
                        let rest = if rest.trim().is_empty() {
                            lines.next().unwrap_or("")
                        } else {
                            rest
                        };
                        return rest
                            .split(',')
                            .map(str::trim)
                            .find(|s| !s.is_empty())
                            .map(str::to_string);
                    }
                }
                None
            }
            Self::MajorityToken { stopwords } => {
                let stop: Vec<String> = match stopwords {
                    Some(s) => s.iter().map(|w| w.to_lowercase()).collect(),
                    None => DEFAULT_STOPWORDS.iter().map(|w| w.to_string()).collect(),
                };
                let mut counts: Vec<(String, usize)> = Vec::new();
                for w in descriptive_words(prompt) {
                    if stop.contains(&w) {
                        continue;
                    }
                    match counts.iter_mut().find(|(k, _)| *k == w) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((w, 1)),
                    }
                }
                // max_by_key keeps the last maximum; iterate reversed so the
                // earliest word wins ties.
                counts
                    .into_iter()
                    .rev()
                    .max_by_key(|(_, c)| *c)
                    .map(|(w, _)| w)
            }
            Self::Keyed { entries } => entries
                .iter()
                .find(|e| contains_phrase(prompt, &e.key))
                .map(|e| e.response.clone()),
        }
    }
}

/// Scripted language model with a whitespace tokenizer.
///
/// Scoring sums per-token log-probabilities: a table value (or
/// `default_logprob`) plus a context bonus of `context_bonus / (1 + r)`
/// when the token is the `r`-th distinct word of the descriptive part of
/// the final prompt block. Earlier-listed content therefore scores higher.
#[derive(Debug, Clone)]
pub struct MockLlm {
    identity: String,
    rules: Vec<GenerationRule>,
    token_logprobs: HashMap<String, f64>,
    default_logprob: f64,
    context_bonus: f64,
    context_window: Option<usize>,
    mode: LlmMode,
}

impl MockLlm {
    pub fn new(rules: Vec<GenerationRule>) -> Self {
        Self {
            identity: "mock-llm".into(),
            rules,
            token_logprobs: HashMap::new(),
            default_logprob: -5.0,
            context_bonus: 0.0,
            context_window: None,
            mode: LlmMode::LocalScored,
        }
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity = identity.into();
        self
    }

    pub fn with_context_window(mut self, window: usize) -> Self {
        self.context_window = Some(window);
        self
    }

    pub fn with_token_logprob(mut self, token: impl Into<String>, logprob: f64) -> Self {
        self.token_logprobs
            .insert(normalize_token(&token.into()), logprob);
        self
    }

    pub fn with_default_logprob(mut self, logprob: f64) -> Self {
        self.default_logprob = logprob;
        self
    }

    pub fn with_context_bonus(mut self, bonus: f64) -> Self {
        self.context_bonus = bonus;
        self
    }

    pub fn generate_only(mut self) -> Self {
        self.mode = LlmMode::RemoteGenerateOnly;
        self
    }
}

impl LlmBackend for MockLlm {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn mode(&self) -> LlmMode {
        self.mode
    }

    fn context_window(&self) -> Option<usize> {
        self.context_window
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn generate(&self, prompt: &str, _params: &GenerationParams) -> Result<String> {
        Ok(self
            .rules
            .iter()
            .find_map(|r| r.apply(prompt))
            .unwrap_or_default())
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<ContinuationScore> {
        if self.mode != LlmMode::LocalScored {
            return Err(BackendError::ScoringUnsupported(self.identity.clone()));
        }
        let mut context: Vec<String> = Vec::new();
        if self.context_bonus != 0.0 {
            for w in descriptive_words(prompt) {
                if !context.contains(&w) {
                    context.push(w);
                }
            }
        }
        let tokens: Vec<String> = continuation
            .split_whitespace()
            .map(normalize_token)
            .collect();
        let log_likelihood = tokens
            .iter()
            .map(|t| {
                let base = self
                    .token_logprobs
                    .get(t)
                    .copied()
                    .unwrap_or(self.default_logprob);
                let bonus = context
                    .iter()
                    .position(|c| c == t)
                    .map_or(0.0, |r| self.context_bonus / (1.0 + r as f64));
                base + bonus
            })
            .sum();
        Ok(ContinuationScore {
            log_likelihood,
            num_tokens: tokens.len(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockImage {
    pub embedding: Option<Vec<f64>>,
    pub near_text: Option<String>,
    pub noise: f64,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockCaptionSpec {
    pub default_pool: Vec<String>,
    pub policy: CaptionPolicy,
    pub supports_sampling: bool,
}

impl Default for MockCaptionSpec {
    fn default() -> Self {
        Self {
            default_pool: vec!["a photo of an object".into()],
            policy: CaptionPolicy::Prefix,
            supports_sampling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockLlmSpec {
    pub rules: Vec<GenerationRule>,
    pub token_logprobs: BTreeMap<String, f64>,
    pub default_logprob: f64,
    pub context_bonus: f64,
    pub context_window: Option<usize>,
    pub generate_only: bool,
}

impl Default for MockLlmSpec {
    fn default() -> Self {
        Self {
            rules: vec![
                GenerationRule::FirstListed {
                    section: "Tags".into(),
                },
                GenerationRule::MajorityToken { stopwords: None },
                GenerationRule::Constant {
                    text: "unknown".into(),
                },
            ],
            token_logprobs: BTreeMap::new(),
            default_logprob: -5.0,
            context_bonus: 4.0,
            context_window: Some(512),
            generate_only: false,
        }
    }
}

/// Everything the three mocks need, serializable as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockWorld {
    pub dimension: usize,
    pub seed: u64,
    pub images: BTreeMap<String, MockImage>,
    pub texts: BTreeMap<String, Vec<f64>>,
    pub captions: MockCaptionSpec,
    pub llm: MockLlmSpec,
}

impl Default for MockWorld {
    fn default() -> Self {
        Self {
            dimension: 16,
            seed: 0,
            images: BTreeMap::new(),
            texts: BTreeMap::new(),
            captions: MockCaptionSpec::default(),
            llm: MockLlmSpec::default(),
        }
    }
}

impl MockWorld {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn encoder(&self) -> MockEncoder {
        let mut enc = MockEncoder::new(self.dimension).with_seed(self.seed);
        for (text, v) in &self.texts {
            enc = enc.with_text(text.clone(), v.clone());
        }
        for (id, img) in &self.images {
            if let Some(v) = &img.embedding {
                enc = enc.with_image(id.clone(), v.clone());
            } else if let Some(t) = &img.near_text {
                enc = enc.with_image_near_text(id.clone(), t.clone(), img.noise);
            }
        }
        enc
    }

    pub fn captioner(&self) -> MockCaptioner {
        let mut cap = MockCaptioner::prefix(self.captions.default_pool.clone());
        cap.policy = self.captions.policy;
        cap.supports_sampling = self.captions.supports_sampling;
        for (id, img) in &self.images {
            if !img.captions.is_empty() {
                cap = cap.with_pool(id.clone(), img.captions.clone());
            }
        }
        cap
    }

    pub fn llm(&self) -> MockLlm {
        let spec = &self.llm;
        let mut llm = MockLlm::new(spec.rules.clone())
            .with_default_logprob(spec.default_logprob)
            .with_context_bonus(spec.context_bonus);
        for (t, lp) in &spec.token_logprobs {
            llm = llm.with_token_logprob(t.clone(), *lp);
        }
        if let Some(w) = spec.context_window {
            llm = llm.with_context_window(w);
        }
        if spec.generate_only {
            llm = llm.generate_only();
        }
        llm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_text_with_zero_noise_matches_text() {
        let enc = MockEncoder::new(6).with_image_near_text("img", "A photo of dog", 0.0);
        let img = enc.encode_image(&ImageRef::from_id("img")).unwrap();
        let txt = enc.encode_texts(&["A photo of dog"]).unwrap().remove(0);
        assert_eq!(img, unit(&txt));
    }

    #[test]
    fn majority_token_prefers_earliest_on_tie() {
        let rule = GenerationRule::MajorityToken { stopwords: None };
        let prompt = "Captions:\na photo of a zebra on the grass\nQuestion: what?\nShort Answer:";
        assert_eq!(rule.apply(prompt).as_deref(), Some("zebra"));
        let prompt = "Captions:\na photo of the image\nQuestion: what?\nShort Answer:";
        assert_eq!(rule.apply(prompt), None);
    }

    #[test]
    fn majority_token_ignores_shot_blocks() {
        let rule = GenerationRule::MajorityToken { stopwords: None };
        let prompt = "Captions:\ncat cat cat\nQuestion: q\nShort Answer: cat\n\nCaptions:\ndog\nQuestion: q\nShort Answer:";
        assert_eq!(rule.apply(prompt).as_deref(), Some("dog"));
    }

    #[test]
    fn first_listed_reads_tags_line() {
        let rule = GenerationRule::FirstListed {
            section: "Tags".into(),
        };
        assert_eq!(
            rule.apply("Tags: golden retriever, dog\nQuestion: q\nShort Answer:")
                .as_deref(),
            Some("golden retriever")
        );
        assert_eq!(rule.apply("Captions:\nx\nQuestion: q"), None);
    }

    #[test]
    fn keyed_matches_whole_words() {
        let rule = GenerationRule::Keyed {
            entries: vec![KeyedResponse {
                key: "cat".into(),
                response: "- has whiskers".into(),
            }],
        };
        assert!(rule.apply("distinguishing a caterpillar").is_none());
        assert_eq!(
            rule.apply("distinguishing a cat in a photo?").as_deref(),
            Some("- has whiskers")
        );
    }

    #[test]
    fn context_bonus_decays_with_position() {
        let llm = MockLlm::new(vec![]).with_context_bonus(4.0);
        let prompt = "Tags: dog, cat\nQuestion: dog or cat?\nShort Answer: ";
        let dog = llm.score(prompt, "dog").unwrap().log_likelihood;
        let cat = llm.score(prompt, "cat").unwrap().log_likelihood;
        let bird = llm.score(prompt, "bird").unwrap().log_likelihood;
        assert_eq!(dog, -5.0 + 4.0);
        assert_eq!(cat, -5.0 + 2.0);
        assert_eq!(bird, -5.0);
    }

    #[test]
    fn world_round_trips_through_json() {
        let mut world = MockWorld::default();
        world.images.insert(
            "img-1".into(),
            MockImage {
                near_text: Some("A photo of cat".into()),
                noise: 0.1,
                captions: vec!["a cat".into()],
                ..Default::default()
            },
        );
        let json = serde_json::to_string(&world).unwrap();
        let back: MockWorld = serde_json::from_str(&json).unwrap();
        assert_eq!(world, back);
    }
}
