//! Uniform client over caption and judge backends.
//!
//! Every request is content-addressed. The cache is consulted before any
//! backend call and written after every successful one, so replaying a batch
//! costs nothing. Identical requests issued concurrently wait on the same
//! per-digest lock and share one backend call.

mod cache;
mod http;
mod mock;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest::{sha256_hex, FieldHasher};
use crate::prompt::RenderedPrompt;

pub use cache::{CachedEntry, CachedResponse, ImageSummary, RequestSummary, ResponseCache};
pub use http::HttpChatBackend;
pub use mock::{KeywordRule, MockBackend, MockConfig, RatingRule};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend {backend}: {message}")]
    Config { backend: String, message: String },
    #[error("transport failure after {} attempts: {}", attempts.len(), attempts.join("; "))]
    Exhausted { attempts: Vec<String> },
    #[error("non-retryable HTTP {status}: {message}")]
    NonRetryable { status: u16, message: String, attempts: Vec<String> },
    #[error("empty completion")]
    EmptyCompletion,
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("caption request without images")]
    NoImages,
}

impl GatewayError {
    /// Attempt log, newest last; empty for errors raised before any call.
    pub fn attempts(&self) -> &[String] {
        match self {
            Self::Exhausted { attempts } | Self::NonRetryable { attempts, .. } => attempts,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 500 }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n + 1` after `n` failures.
    pub fn backoff(&self, failures: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << failures.saturating_sub(1).min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Send the region mask as a third image.
    #[serde(default)]
    pub region_aware: bool,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default)]
    pub mock: Option<MockConfig>,
}

fn default_parallel() -> usize {
    4
}

fn default_timeout() -> u64 {
    60
}

impl BackendSpec {
    pub fn mock(name: &str, config: MockConfig) -> Self {
        Self {
            name: name.into(),
            kind: BackendKind::Mock,
            endpoint: None,
            model: Some("mock".into()),
            api_key_env: None,
            max_parallel: default_parallel(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            region_aware: false,
            requests_per_minute: None,
            mock: Some(config),
        }
    }

    pub fn http(name: &str, endpoint: &str, model: &str) -> Self {
        Self {
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            mock: None,
            ..Self::mock(name, MockConfig::default())
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let fail = |message: &str| Err(GatewayError::Config { backend: self.name.clone(), message: message.into() });
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return fail("name must be a plain non-empty identifier");
        }
        if self.max_parallel == 0 {
            return fail("max_parallel must be at least 1");
        }
        if self.retry.max_attempts == 0 {
            return fail("retry.max_attempts must be at least 1");
        }
        if self.requests_per_minute == Some(0) {
            return fail("requests_per_minute must be positive");
        }
        if self.kind == BackendKind::HttpChat && (self.endpoint.is_none() || self.model.is_none()) {
            return fail("http_chat backends need endpoint and model");
        }
        Ok(())
    }

    fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    FullImage,
    FocalCrop,
    MaskOverlay,
}

impl ImageRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::FullImage => "full_image",
            Self::FocalCrop => "focal_crop",
            Self::MaskOverlay => "mask_overlay",
        }
    }
}

/// Encoded (PNG) image bytes with their role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestImage {
    pub role: ImageRole,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Caption,
    Judge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: RenderedPrompt,
    pub images: Vec<RequestImage>,
    pub decoding: DecodingParams,
    pub kind: RequestKind,
    /// What the request is about (region key or qa id). Not part of the digest.
    pub subject: String,
}

impl GenerationRequest {
    pub fn caption(prompt: RenderedPrompt, images: Vec<RequestImage>, subject: impl Into<String>) -> Self {
        Self { prompt, images, decoding: DecodingParams::default(), kind: RequestKind::Caption, subject: subject.into() }
    }

    pub fn judge(prompt: RenderedPrompt, subject: impl Into<String>) -> Self {
        Self { prompt, images: Vec::new(), decoding: DecodingParams::default(), kind: RequestKind::Judge, subject: subject.into() }
    }

    /// Full image, then focal crop, then the mask when the backend is region aware.
    pub fn focal_images(full: Vec<u8>, crop: Vec<u8>, mask: Option<Vec<u8>>, region_aware: bool) -> Vec<RequestImage> {
        let mut out =
            vec![RequestImage { role: ImageRole::FullImage, bytes: full }, RequestImage { role: ImageRole::FocalCrop, bytes: crop }];
        if let (true, Some(bytes)) = (region_aware, mask) {
            out.push(RequestImage { role: ImageRole::MaskOverlay, bytes });
        }
        out
    }
}

/// Digest over backend name, model id, prompt text, images in order and
/// decoding parameters. Auth and timing never enter it.
pub fn cache_key(req: &GenerationRequest, backend: &BackendSpec) -> String {
    let mut h = FieldHasher::new();
    h.field(b"medcap-request-v1")
        .field(backend.name.as_bytes())
        .field(backend.model_id().as_bytes())
        .field(req.prompt.text.as_bytes())
        .field(&(req.images.len() as u64).to_le_bytes());
    for img in &req.images {
        h.field(img.role.as_str().as_bytes()).field(&img.bytes);
    }
    h.field(&req.decoding.temperature.to_bits().to_le_bytes()).field(&req.decoding.max_tokens.to_le_bytes());
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub text: String,
    pub backend: String,
    pub digest: String,
    pub cached: bool,
    pub latency_ms: u64,
    pub attempts: u32,
    #[serde(default)]
    pub transport: BTreeMap<String, Value>,
}

impl CaptionResult {
    /// Equality ignoring the cache flag.
    pub fn same_output(&self, other: &Self) -> bool {
        Self { cached: false, ..self.clone() } == Self { cached: false, ..other.clone() }
    }
}

/// What a backend returns for one call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Completion {
    pub text: String,
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CallError {
    Retryable(String),
    Fatal { status: u16, message: String },
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &GenerationRequest, spec: &BackendSpec) -> Result<Completion, CallError>;
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_minute: u32) -> Self {
        Self { interval: Duration::from_secs(60) / per_minute, next: Mutex::new(Instant::now()) }
    }

    fn wait(&self) {
        let slot = {
            let mut next = self.next.lock().expect("limiter lock");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

pub struct Gateway {
    spec: BackendSpec,
    backend: Box<dyn Backend>,
    cache: ResponseCache,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    calls: AtomicU64,
    limiter: Option<RateLimiter>,
}

impl Gateway {
    /// Builds the backend named by `spec.kind`, caching under `cache_root/<name>`.
    pub fn open(spec: BackendSpec, cache_root: &Path) -> Result<Self, GatewayError> {
        spec.validate()?;
        let backend: Box<dyn Backend> = match spec.kind {
            BackendKind::Mock => Box::new(MockBackend::new(spec.mock.clone().unwrap_or_default())),
            BackendKind::HttpChat => Box::new(HttpChatBackend::from_spec(&spec)?),
        };
        Self::with_backend(spec, backend, cache_root)
    }

    pub fn with_backend(spec: BackendSpec, backend: Box<dyn Backend>, cache_root: &Path) -> Result<Self, GatewayError> {
        spec.validate()?;
        Ok(Self {
            cache: ResponseCache::new(cache_root.join(&spec.name)),
            limiter: spec.requests_per_minute.map(RateLimiter::new),
            spec,
            backend,
            in_flight: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Backend calls made by this gateway, retries included.
    pub fn backend_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn digest(&self, req: &GenerationRequest) -> String {
        cache_key(req, &self.spec)
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<CaptionResult, GatewayError> {
        if req.kind == RequestKind::Caption && req.images.is_empty() {
            return Err(GatewayError::NoImages);
        }
        let digest = self.digest(req);
        if let Some(hit) = self.lookup(&digest)? {
            return Ok(hit);
        }
        let lock = {
            let mut map = self.in_flight.lock().expect("in-flight lock");
            map.entry(digest.clone()).or_default().clone()
        };
        let result = {
            let _guard = lock.lock().expect("digest lock");
            match self.lookup(&digest)? {
                Some(hit) => Ok(hit),
                None => self.call_and_store(req, &digest),
            }
        };
        let mut map = self.in_flight.lock().expect("in-flight lock");
        if Arc::strong_count(&lock) == 2 {
            map.remove(&digest);
        }
        result
    }

    fn lookup(&self, digest: &str) -> Result<Option<CaptionResult>, GatewayError> {
        Ok(self.cache.get(digest)?.map(|e| CaptionResult {
            text: e.response.text,
            backend: self.spec.name.clone(),
            digest: digest.to_string(),
            cached: true,
            latency_ms: e.response.latency_ms,
            attempts: e.response.attempts,
            transport: e.response.metadata,
        }))
    }

    fn call_and_store(&self, req: &GenerationRequest, digest: &str) -> Result<CaptionResult, GatewayError> {
        let started = Instant::now();
        let mut log = Vec::new();
        let policy = self.spec.retry;
        let completion = loop {
            let attempt = log.len() as u32 + 1;
            if let Some(l) = &self.limiter {
                l.wait();
            }
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(req, &self.spec) {
                Ok(c) => {
                    log.push(format!("attempt {attempt}: ok"));
                    break c;
                }
                Err(CallError::Fatal { status, message }) => {
                    log.push(format!("attempt {attempt}: HTTP {status}"));
                    tracing::warn!(backend = %self.spec.name, subject = %req.subject, status, "non-retryable failure");
                    return Err(GatewayError::NonRetryable { status, message, attempts: log });
                }
                Err(CallError::Retryable(message)) => {
                    log.push(format!("attempt {attempt}: {message}"));
                    if attempt >= policy.max_attempts {
                        return Err(GatewayError::Exhausted { attempts: log });
                    }
                    tracing::debug!(backend = %self.spec.name, subject = %req.subject, attempt, "retrying: {message}");
                    std::thread::sleep(policy.backoff(attempt));
                }
            }
        };
        if completion.text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        let latency_ms = started.elapsed().as_millis() as u64;
        let attempts = log.len() as u32;
        let mut metadata = completion.metadata;
        metadata.insert("attempt_log".into(), Value::from(log));
        let entry = CachedEntry {
            digest: digest.to_string(),
            request: RequestSummary {
                backend: self.spec.name.clone(),
                model: self.spec.model_id().to_string(),
                kind: req.kind,
                template_id: req.prompt.template_id.clone(),
                prompt_digest: req.prompt.digest.clone(),
                prompt_text: req.prompt.text.clone(),
                images: req
                    .images
                    .iter()
                    .map(|i| ImageSummary { role: i.role, sha256: sha256_hex(&i.bytes), bytes: i.bytes.len() as u64 })
                    .collect(),
                decoding: req.decoding,
            },
            response: CachedResponse { text: completion.text.clone(), latency_ms, attempts, metadata: metadata.clone() },
        };
        self.cache.put(&entry)?;
        Ok(CaptionResult {
            text: completion.text,
            backend: self.spec.name.clone(),
            digest: digest.to_string(),
            cached: false,
            latency_ms,
            attempts,
            transport: metadata,
        })
    }

    /// Runs every request with at most `parallelism` in flight (clamped to
    /// `1..=max_parallel`). Results line up with `requests`; `progress` sees
    /// `(done, total)` after each completion.
    pub fn run_batch(
        &self,
        requests: &[GenerationRequest],
        parallelism: usize,
        progress: &(dyn Fn(usize, usize) + Sync),
    ) -> Vec<Result<CaptionResult, GatewayError>> {
        use rayon::prelude::*;
        if requests.is_empty() {
            return Vec::new();
        }
        let threads = parallelism.clamp(1, self.spec.max_parallel);
        let done = AtomicUsize::new(0);
        let total = requests.len();
        let work = || {
            requests
                .par_iter()
                .map(|r| {
                    let out = self.generate(r);
                    progress(done.fetch_add(1, Ordering::SeqCst) + 1, total);
                    out
                })
                .collect()
        };
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(work),
            Err(_) => requests.iter().map(|r| self.generate(r)).collect(),
        }
    }
}
