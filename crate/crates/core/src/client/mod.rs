//! Image + prompt queries against a vision-language model.
//!
//! [`VlmClient`] wraps any [`Provider`] with content-addressed response
//! caching and exponential-backoff retries. Two providers ship with the crate:
//! [`OpenAiCompatibleProvider`] speaks the chat-completions wire protocol and
//! [`MockProvider`] answers from a deterministic script.

mod cache;
mod image;
mod live;
mod mock;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{PromptBundle, PromptLevel};

pub use self::cache::ResponseCache;
pub use self::image::{preprocess_image, TARGET_HEIGHT, TARGET_WIDTH};
pub use self::live::{build_request_body, chat_completions_url, OpenAiCompatibleProvider};
pub use self::mock::{MockFailure, MockProvider, MockRule, MockScript};

pub const DEFAULT_CREDENTIAL_ENV: &str = "LAB_ANOMALY_API_KEY";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, message: String },
    #[error("no mock rule matches point `{point_id}` at level {level}")]
    Unmatched { point_id: String, level: u8 },
}

impl ClientError {
    /// Whether another attempt may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Network(_) | ClientError::Timeout => true,
            ClientError::Provider { status: Some(s), .. } => *s == 408 || *s == 429 || *s >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// Base URL (`.../v1`) or the full chat-completions URL.
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_base_s: f64,
    pub credential_env_name: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            timeout_s: 60.0,
            max_retries: 3,
            backoff_base_s: 1.0,
            credential_env_name: DEFAULT_CREDENTIAL_ENV.into(),
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        url::Url::parse(&self.endpoint_url)
            .map_err(|e| ClientError::Config(format!("endpoint `{}`: {e}", self.endpoint_url)))?;
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(ClientError::Config("timeout must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ClientError::Config("temperature must be non-negative".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(ClientError::Config("max_output_tokens must be positive".into()));
        }
        if !(self.backoff_base_s >= 0.0 && self.backoff_base_s.is_finite()) {
            return Err(ClientError::Config("backoff base must be non-negative".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    /// Delay before retry number `attempt + 1`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let secs = self.backoff_base_s * 2f64.powi(attempt.min(16) as i32);
        Duration::from_secs_f64(secs.min(60.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageRef {
    Path(PathBuf),
    Inline,
}

/// A preprocessed first-person image bound to a monitoring point.
#[derive(Debug, Clone)]
pub struct Observation {
    pub image_ref: ImageRef,
    pub width: u32,
    pub height: u32,
    pub device: Option<String>,
    pub viewpoint: Option<String>,
    pub point_id: String,
    /// JPEG bytes at 640x480.
    pub jpeg: Arc<Vec<u8>>,
    /// Hex SHA-256 of `jpeg`.
    pub digest: String,
}

impl Observation {
    pub fn from_bytes(raw: &[u8], point_id: impl Into<String>) -> Result<Self, ClientError> {
        let jpeg = preprocess_image(raw)?;
        let digest = hex::encode(Sha256::digest(&jpeg));
        Ok(Self {
            image_ref: ImageRef::Inline,
            width: TARGET_WIDTH,
            height: TARGET_HEIGHT,
            device: None,
            viewpoint: None,
            point_id: point_id.into(),
            jpeg: Arc::new(jpeg),
            digest,
        })
    }

    pub fn from_path(path: &Path, point_id: impl Into<String>) -> Result<Self, ClientError> {
        let raw = std::fs::read(path).map_err(|source| ClientError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut obs = Self::from_bytes(&raw, point_id)?;
        obs.image_ref = ImageRef::Path(path.to_path_buf());
        Ok(obs)
    }

    /// Same image, different monitoring point.
    pub fn for_point(&self, point_id: &str) -> Self {
        Self {
            point_id: point_id.to_string(),
            ..self.clone()
        }
    }

    pub fn file_name(&self) -> Option<&str> {
        match &self.image_ref {
            ImageRef::Path(p) => p.file_name().and_then(|n| n.to_str()),
            ImageRef::Inline => None,
        }
    }
}

/// Everything a provider needs to answer one query.
#[derive(Debug, Clone, Copy)]
pub struct VisionRequest<'a> {
    pub prompt: &'a str,
    pub level: PromptLevel,
    pub point_id: &'a str,
    pub image_name: Option<&'a str>,
    pub image_jpeg: &'a [u8],
    pub image_digest: &'a str,
    pub model: &'a str,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    pub model_id: String,
    /// Provider-reported latency; measured by the client when absent.
    pub latency_s: Option<f64>,
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &VisionRequest<'_>) -> Result<ProviderReply, ClientError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub model_id: String,
    pub latency_s: f64,
    #[serde(default)]
    pub from_cache: bool,
    pub request_hash: String,
}

/// Digest identifying a query: prompt hash, image digest, model and temperature.
pub fn request_hash(prompt_hash: &str, image_digest: &str, model_name: &str, temperature: f64) -> String {
    let mut h = Sha256::new();
    for part in [prompt_hash, image_digest, model_name, &format!("{temperature:?}")] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

pub struct VlmClient {
    provider: Arc<dyn Provider>,
    config: ProviderConfig,
    cache: Option<ResponseCache>,
}

impl VlmClient {
    pub fn new(provider: Arc<dyn Provider>, config: ProviderConfig) -> Result<Self, ClientError> {
        config.validate()?;
        Ok(Self {
            provider,
            config,
            cache: None,
        })
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn request_hash(&self, bundle: &PromptBundle, obs: &Observation) -> String {
        request_hash(
            &bundle.content_hash,
            &obs.digest,
            &self.config.model_name,
            self.config.temperature,
        )
    }

    /// Sends the prompt and image, honouring the cache and retry policy.
    pub fn judge(&self, bundle: &PromptBundle, obs: &Observation) -> Result<RawResponse, ClientError> {
        let hash = self.request_hash(bundle, obs);
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&hash) {
                hit.from_cache = true;
                return Ok(hit);
            }
        }

        let request = VisionRequest {
            prompt: &bundle.rendered,
            level: bundle.level,
            point_id: &obs.point_id,
            image_name: obs.file_name(),
            image_jpeg: &obs.jpeg,
            image_digest: &obs.digest,
            model: &self.config.model_name,
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
        };

        let mut attempt = 0;
        let reply = loop {
            let started = Instant::now();
            match self.provider.complete(&request) {
                Ok(reply) if reply.text.trim().is_empty() => {
                    return Err(ClientError::Provider {
                        status: None,
                        message: "empty response text".into(),
                    })
                }
                Ok(mut reply) => {
                    reply.latency_s.get_or_insert(started.elapsed().as_secs_f64());
                    break reply;
                }
                Err(e) if e.is_transient() && attempt < self.config.max_retries => {
                    let delay = self.config.backoff(attempt);
                    log::warn!(
                        "attempt {} for point {} failed: {e}; retrying in {delay:?}",
                        attempt + 1,
                        obs.point_id
                    );
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };

        let response = RawResponse {
            text: reply.text,
            model_id: reply.model_id,
            latency_s: reply.latency_s.unwrap_or_default(),
            from_cache: false,
            request_hash: hash,
        };
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(&response) {
                log::warn!("could not cache response {}: {e}", response.request_hash);
            }
        }
        Ok(response)
    }
}
