//! Chat-completion gateway.
//!
//! A [`Gateway`] wraps one [`Backend`] (the HTTP client or one of the mocks)
//! and adds what every caller needs: config validation, transport-only
//! retries with exponential backoff, and an in-flight bound for batches.
//! Model-side outcomes (refusal, truncation, empty text) are reported in the
//! [`CompletionResult`] and never retried.

mod http;
pub mod mock;
pub mod synthetic;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::sha256_hex;

pub use http::HttpBackend;
pub use mock::{FaultPlan, LatencyPlan, MockBackend, MockReply, Responder, RuleSet};
pub use synthetic::SyntheticModel;

/// Sampling temperature for generation calls.
pub const GENERATION_TEMPERATURE: f64 = 0.7;
/// Sampling temperature for evaluation calls.
pub const EVALUATION_TEMPERATURE: f64 = 0.0;

const MAX_BACKOFF_MS: u64 = 30_000;

/// One chat-completion call. Constructed through [`CompletionRequest::new`],
/// so an instance always satisfies its invariants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    system_text: String,
    user_text: String,
    temperature: f64,
    max_output_tokens: u32,
    request_tag: String,
}

impl CompletionRequest {
    pub fn new(
        system_text: impl Into<String>,
        user_text: impl Into<String>,
        request_tag: impl Into<String>,
    ) -> Result<Self> {
        let user_text = user_text.into();
        if user_text.is_empty() {
            return Err(Error::validation("completion request with empty user text"));
        }
        Ok(Self {
            system_text: system_text.into(),
            user_text,
            temperature: GENERATION_TEMPERATURE,
            max_output_tokens: 1024,
            request_tag: request_tag.into(),
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(Error::validation(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("max_output_tokens must be at least 1"));
        }
        self.max_output_tokens = n;
        Ok(self)
    }

    pub fn system_text(&self) -> &str {
        &self.system_text
    }

    pub fn user_text(&self) -> &str {
        &self.user_text
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn max_output_tokens(&self) -> u32 {
        self.max_output_tokens
    }

    pub fn request_tag(&self) -> &str {
        &self.request_tag
    }

    /// Stable hash of the prompt content, used as the transcript key.
    pub fn prompt_hash(&self) -> String {
        let mut buf = Vec::with_capacity(self.system_text.len() + self.user_text.len() + 1);
        buf.extend_from_slice(self.system_text.as_bytes());
        buf.push(0);
        buf.extend_from_slice(self.user_text.as_bytes());
        sha256_hex(&buf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Complete,
    Truncated,
    Refused,
    TransportError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

impl CompletionResult {
    pub fn is_transport_error(&self) -> bool {
        self.finish_reason == FinishReason::TransportError
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    /// `http(s)://host[:port]` for a live endpoint, or `mock:<kind>[:<arg>]`.
    pub base_url: String,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_model_id() -> String {
    "generator".to_string()
}
fn default_max_in_flight() -> usize {
    8
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_ms() -> u64 {
    120_000
}

impl GatewayConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: default_model_id(),
            max_in_flight: default_max_in_flight(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_ms: default_timeout_ms(),
            api_key_env: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::config("max_in_flight must be at least 1"));
        }
        if self.timeout_ms == 0 {
            return Err(Error::config("timeout_ms must be positive"));
        }
        if self.backoff_ms == 0 {
            return Err(Error::config("backoff_ms must be positive"));
        }
        if self.model_id.is_empty() {
            return Err(Error::config("model_id must not be empty"));
        }
        self.endpoint().map(|_| ())
    }

    pub fn endpoint(&self) -> Result<Endpoint> {
        Endpoint::parse(&self.base_url)
    }
}

/// Parsed form of [`GatewayConfig::base_url`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Http(url::Url),
    Mock(MockSpec),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockSpec {
    Echo,
    /// Answers the gold label of each evaluation item; the caller supplies
    /// the item set (see `eval_harness::gold_mock`).
    Gold,
    Synthetic { seed: u64 },
    Rules { path: String },
    Transcript { path: String },
}

impl Endpoint {
    pub fn parse(raw: &str) -> Result<Self> {
        if let Some(rest) = raw.strip_prefix("mock:") {
            let (kind, arg) = match rest.split_once(':') {
                Some((k, a)) => (k, Some(a)),
                None => (rest, None),
            };
            let spec = match (kind, arg) {
                ("echo", None) => MockSpec::Echo,
                ("gold", None) => MockSpec::Gold,
                ("synthetic", None) => MockSpec::Synthetic { seed: 0 },
                ("synthetic", Some(s)) => MockSpec::Synthetic {
                    seed: s
                        .parse()
                        .map_err(|_| Error::config(format!("bad synthetic mock seed `{s}`")))?,
                },
                ("rules", Some(p)) if !p.is_empty() => MockSpec::Rules { path: p.into() },
                ("transcript", Some(p)) if !p.is_empty() => {
                    MockSpec::Transcript { path: p.into() }
                }
                _ => return Err(Error::config(format!("unknown mock endpoint `{raw}`"))),
            };
            return Ok(Endpoint::Mock(spec));
        }
        let url = url::Url::parse(raw)
            .map_err(|e| Error::config(format!("bad endpoint url `{raw}`: {e}")))?;
        match url.scheme() {
            "http" | "https" if url.has_host() => Ok(Endpoint::Http(url)),
            _ => Err(Error::config(format!(
                "endpoint `{raw}` must be http(s) or mock:<kind>"
            ))),
        }
    }
}

/// What a backend produced for one attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub finish: FinishReason,
    /// Backends with simulated time report it here; otherwise wall clock is used.
    pub latency_ms: Option<u64>,
}

impl BackendReply {
    pub fn complete(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish: FinishReason::Complete,
            latency_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportFailure {
    #[error("timed out")]
    Timeout,
    #[error("http status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
}

/// A chat-completion provider. `attempt` starts at 1.
pub trait Backend: Send + Sync {
    fn send(
        &self,
        req: &CompletionRequest,
        attempt: u32,
    ) -> std::result::Result<BackendReply, TransportFailure>;
}

#[derive(Clone)]
pub struct Gateway {
    cfg: GatewayConfig,
    backend: Arc<dyn Backend>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("cfg", &self.cfg).finish()
    }
}

impl Gateway {
    /// Gateway over an explicit backend (used for mocks built in code).
    pub fn new(cfg: GatewayConfig, backend: Arc<dyn Backend>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, backend })
    }

    /// Gateway whose backend is selected by `cfg.base_url`.
    pub fn from_config(cfg: GatewayConfig) -> Result<Self> {
        cfg.validate()?;
        let backend: Arc<dyn Backend> = match cfg.endpoint()? {
            Endpoint::Http(url) => Arc::new(HttpBackend::new(&cfg, url)?),
            Endpoint::Mock(spec) => Arc::new(MockBackend::from_spec(&spec)?),
        };
        Ok(Self { cfg, backend })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    pub fn complete(&self, req: &CompletionRequest) -> CompletionResult {
        let started = Instant::now();
        let max_attempts = self.cfg.max_retries + 1;
        let mut attempt = 1;
        loop {
            match self.backend.send(req, attempt) {
                Ok(reply) => {
                    let latency_ms = reply
                        .latency_ms
                        .unwrap_or_else(|| started.elapsed().as_millis() as u64);
                    return CompletionResult {
                        text: reply.text,
                        finish_reason: reply.finish,
                        latency_ms,
                        attempt_count: attempt,
                    };
                }
                Err(failure) => {
                    log::debug!(
                        "request {} attempt {attempt}/{max_attempts}: {failure}",
                        req.request_tag()
                    );
                    if attempt >= max_attempts {
                        log::warn!(
                            "request {} gave up after {attempt} attempts: {failure}",
                            req.request_tag()
                        );
                        return CompletionResult {
                            text: String::new(),
                            finish_reason: FinishReason::TransportError,
                            latency_ms: started.elapsed().as_millis() as u64,
                            attempt_count: attempt,
                        };
                    }
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt - 1).min(16);
        Duration::from_millis(self.cfg.backoff_ms.saturating_mul(factor).min(MAX_BACKOFF_MS))
    }

    /// Complete every request with at most `max_in_flight` outstanding.
    ///
    /// `result[i]` always answers `reqs[i]`.
    pub fn complete_batch(&self, reqs: &[CompletionRequest]) -> Vec<CompletionResult> {
        if reqs.is_empty() {
            return Vec::new();
        }
        let workers = self.cfg.max_in_flight.min(reqs.len());
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<CompletionResult>>> = Mutex::new(vec![None; reqs.len()]);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    let Some(req) = reqs.get(idx) else { break };
                    let res = self.complete(req);
                    slots.lock().expect("result slots poisoned")[idx] = Some(res);
                });
            }
        });
        slots
            .into_inner()
            .expect("result slots poisoned")
            .into_iter()
            .map(|r| r.expect("every request index is claimed exactly once"))
            .collect()
    }
}
