//! HTTP-served models speaking small JSON contracts.
//!
//! Language model: `POST {endpoint}` with
//! `{prompt, max_new_tokens, num_beams, length_penalty}`, answered by
//! `{text}`. Black-box models are generate-only.
//!
//! Encoder: `POST {endpoint}/embed_texts` with `{texts}` answered by
//! `{embeddings}`, and `POST {endpoint}/embed_image` with `{image_id, image}`
//! (base64 payload) answered by `{embedding}`.
//!
//! Captioner: `POST {endpoint}` with `{image_id, image, num_captions,
//! num_beams, top_k, seed, max_new_tokens}` answered by `{captions}`.

use std::sync::OnceLock;
use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, CaptionBackend, ContinuationScore, EncoderBackend, GenerationParams, LlmBackend,
    LlmMode, Result,
};
use crate::image::ImageRef;

#[derive(Debug)]
struct Endpoint {
    url: String,
    api_key: Option<String>,
    timeout: Duration,
    // Built lazily: a blocking client must not be created on an async runtime thread.
    client: OnceLock<reqwest::blocking::Client>,
}

impl Endpoint {
    fn new(url: String, api_key: Option<String>) -> Self {
        Self {
            url: url.trim_end_matches('/').to_string(),
            api_key,
            timeout: Duration::from_secs(120),
            client: OnceLock::new(),
        }
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let client = self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .expect("default TLS-free client builds")
        });
        let url = format!("{}{}", self.url, path);
        let mut req = client.post(&url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_connect() || e.is_timeout() {
                BackendError::Unavailable(format!("{url}: {e}"))
            } else {
                BackendError::Remote(format!("{url}: {e}"))
            }
        })?;
        let status = resp.status();
        if status == reqwest::StatusCode::SERVICE_UNAVAILABLE {
            return Err(BackendError::Unavailable(format!("{url}: {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Remote(format!("{url}: {status}")));
        }
        resp.json()
            .map_err(|e| BackendError::Remote(format!("{url}: bad response body: {e}")))
    }
}

fn image_payload(image: &ImageRef) -> Result<Option<String>> {
    let bytes = image.read_bytes().map_err(|e| BackendError::ImageDecode {
        image_id: image.id.clone(),
        reason: e.to_string(),
    })?;
    Ok(bytes.map(|b| base64::engine::general_purpose::STANDARD.encode(b)))
}

#[derive(Debug, Serialize)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub max_new_tokens: u32,
    pub num_beams: u32,
    pub length_penalty: f64,
}

#[derive(Debug, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

/// A black-box language model behind an HTTP endpoint.
#[derive(Debug)]
pub struct RemoteLlm {
    identity: String,
    endpoint: Endpoint,
    context_window: Option<usize>,
}

impl RemoteLlm {
    pub fn new(model_id: &str, endpoint: String, api_key: Option<String>) -> Self {
        Self {
            identity: format!("remote-llm/{model_id}"),
            endpoint: Endpoint::new(endpoint, api_key),
            context_window: None,
        }
    }

    pub fn with_context_window(mut self, window: Option<usize>) -> Self {
        self.context_window = window;
        self
    }
}

impl LlmBackend for RemoteLlm {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn mode(&self) -> LlmMode {
        LlmMode::RemoteGenerateOnly
    }

    fn context_window(&self) -> Option<usize> {
        self.context_window
    }

    // The served tokenizer is opaque; whitespace words are a lower bound.
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String> {
        let req = GenerateRequest {
            prompt,
            max_new_tokens: params.max_new_tokens,
            num_beams: params.num_beams,
            length_penalty: params.length_penalty,
        };
        let resp: GenerateResponse = self.endpoint.post("", &req)?;
        Ok(resp.text)
    }

    fn score(&self, _prompt: &str, _continuation: &str) -> Result<ContinuationScore> {
        Err(BackendError::ScoringUnsupported(self.identity.clone()))
    }
}

#[derive(Debug)]
pub struct RemoteEncoder {
    identity: String,
    dimension: usize,
    endpoint: Endpoint,
}

impl RemoteEncoder {
    pub fn new(
        model_id: &str,
        dimension: usize,
        endpoint: String,
        api_key: Option<String>,
    ) -> Self {
        Self {
            identity: format!("remote-encoder/{model_id}"),
            dimension,
            endpoint: Endpoint::new(endpoint, api_key),
        }
    }
}

#[derive(Serialize)]
struct EmbedTextsRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedTextsResponse {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct EmbedImageRequest<'a> {
    image_id: &'a str,
    image: Option<String>,
    uri: Option<&'a str>,
}

#[derive(Deserialize)]
struct EmbedImageResponse {
    embedding: Vec<f64>,
}

fn image_uri(image: &ImageRef) -> Option<&str> {
    match &image.source {
        crate::image::ImageSource::Uri(u) => Some(u),
        _ => None,
    }
}

impl EncoderBackend for RemoteEncoder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode_image(&self, image: &ImageRef) -> Result<Vec<f64>> {
        let req = EmbedImageRequest {
            image_id: &image.id,
            image: image_payload(image)?,
            uri: image_uri(image),
        };
        let resp: EmbedImageResponse = self.endpoint.post("/embed_image", &req)?;
        Ok(resp.embedding)
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbedTextsResponse = self
            .endpoint
            .post("/embed_texts", &EmbedTextsRequest { texts })?;
        Ok(resp.embeddings)
    }
}

#[derive(Debug)]
pub struct RemoteCaptioner {
    identity: String,
    endpoint: Endpoint,
}

impl RemoteCaptioner {
    pub fn new(model_id: &str, endpoint: String, api_key: Option<String>) -> Self {
        Self {
            identity: format!("remote-captioner/{model_id}"),
            endpoint: Endpoint::new(endpoint, api_key),
        }
    }
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image_id: &'a str,
    image: Option<String>,
    uri: Option<&'a str>,
    num_captions: u32,
    num_beams: u32,
    top_k: Option<u32>,
    seed: Option<u64>,
    max_new_tokens: u32,
}

#[derive(Deserialize)]
struct CaptionResponse {
    captions: Vec<String>,
}

impl CaptionBackend for RemoteCaptioner {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn supports_sampling(&self) -> bool {
        true
    }

    fn caption(&self, image: &ImageRef, params: &GenerationParams) -> Result<Vec<String>> {
        let req = CaptionRequest {
            image_id: &image.id,
            image: image_payload(image)?,
            uri: image_uri(image),
            num_captions: params.num_captions,
            num_beams: params.num_beams,
            top_k: params.top_k,
            seed: params.seed,
            max_new_tokens: params.max_new_tokens,
        };
        let resp: CaptionResponse = self.endpoint.post("", &req)?;
        Ok(resp.captions)
    }
}
