//! Offline backends.
//!
//! [`MockBackend`] answers from a [`Responder`] that is a pure function of
//! the request, so a batch produces the same results at any worker count.
//! Fault and latency injection are keyed on the request as well. The mock
//! keeps an in-flight high-water mark and a call log for assertions.
//!
//! [`RecordingBackend`] wraps any backend and captures a transcript that a
//! `Responder::Transcript` can replay later.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticModel;
use super::{Backend, BackendReply, CompletionRequest, FinishReason, MockSpec, TransportFailure};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::rng::stable_hash64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockReply {
    pub text: String,
    pub finish: FinishReason,
}

impl MockReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish: FinishReason::Complete,
        }
    }

    pub fn refused() -> Self {
        Self {
            text: String::new(),
            finish: FinishReason::Refused,
        }
    }
}

pub type ResponderFn = dyn Fn(&CompletionRequest) -> MockReply + Send + Sync;

#[derive(Clone)]
pub enum Responder {
    Echo,
    Rules(RuleSet),
    /// `prompt_hash -> response_text`
    Transcript(HashMap<String, String>),
    Synthetic(SyntheticModel),
    Func(Arc<ResponderFn>),
}

impl Responder {
    pub fn func(f: impl Fn(&CompletionRequest) -> MockReply + Send + Sync + 'static) -> Self {
        Responder::Func(Arc::new(f))
    }

    fn respond(&self, req: &CompletionRequest) -> std::result::Result<MockReply, TransportFailure> {
        match self {
            Responder::Echo => Ok(MockReply::text(req.user_text())),
            Responder::Rules(rules) => Ok(rules.respond(req)),
            Responder::Transcript(map) => map
                .get(&req.prompt_hash())
                .map(MockReply::text)
                .ok_or_else(|| {
                    TransportFailure::Unavailable(format!(
                        "no transcript entry for request {}",
                        req.request_tag()
                    ))
                }),
            Responder::Synthetic(model) => Ok(model.respond(req)),
            Responder::Func(f) => Ok(f(req)),
        }
    }
}

/// Transport-level failure injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultPlan {
    #[default]
    None,
    /// Every request fails its first `n` attempts.
    FailFirst(u32),
    AlwaysTimeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatencyPlan {
    #[default]
    None,
    /// Sleep a request-keyed pseudo-random duration in `[0, max_ms]`.
    Jitter { max_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockCall {
    pub request_tag: String,
    pub attempt: u32,
    pub failed: bool,
}

pub struct MockBackend {
    responder: Responder,
    faults: FaultPlan,
    latency: LatencyPlan,
    seed: u64,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    calls: Mutex<Vec<MockCall>>,
}

impl MockBackend {
    pub fn new(responder: Responder) -> Self {
        Self {
            responder,
            faults: FaultPlan::None,
            latency: LatencyPlan::None,
            seed: 0,
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn echo() -> Self {
        Self::new(Responder::Echo)
    }

    pub fn with_faults(mut self, faults: FaultPlan) -> Self {
        self.faults = faults;
        self
    }

    pub fn with_latency(mut self, latency: LatencyPlan) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn from_spec(spec: &MockSpec) -> Result<Self> {
        let responder = match spec {
            MockSpec::Echo => Responder::Echo,
            MockSpec::Gold => {
                return Err(Error::config(
                    "mock:gold needs the evaluation item set; build it with eval_harness::gold_mock",
                ))
            }
            MockSpec::Synthetic { seed } => Responder::Synthetic(SyntheticModel::new(*seed)),
            MockSpec::Rules { path } => Responder::Rules(RuleSet::load(Path::new(path))?),
            MockSpec::Transcript { path } => Responder::Transcript(load_transcript(Path::new(path))?),
        };
        Ok(Self::new(responder))
    }

    /// Highest number of concurrent `send` calls observed so far.
    pub fn high_water_mark(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("mock call log poisoned").len()
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().expect("mock call log poisoned").clone()
    }

    fn log(&self, req: &CompletionRequest, attempt: u32, failed: bool) {
        self.calls
            .lock()
            .expect("mock call log poisoned")
            .push(MockCall {
                request_tag: req.request_tag().to_string(),
                attempt,
                failed,
            });
    }

    fn simulated_latency(&self, req: &CompletionRequest, attempt: u32) -> u64 {
        match self.latency {
            LatencyPlan::None => 0,
            LatencyPlan::Jitter { max_ms } => {
                let key = format!("{}\u{0}{}\u{0}{attempt}", req.request_tag(), req.prompt_hash());
                stable_hash64(self.seed, &key) % (max_ms + 1)
            }
        }
    }
}

impl Backend for MockBackend {
    fn send(
        &self,
        req: &CompletionRequest,
        attempt: u32,
    ) -> std::result::Result<BackendReply, TransportFailure> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);

        let latency = self.simulated_latency(req, attempt);
        if latency > 0 {
            std::thread::sleep(Duration::from_millis(latency));
        }
        let outcome = match self.faults {
            FaultPlan::AlwaysTimeout => Err(TransportFailure::Timeout),
            FaultPlan::FailFirst(n) if attempt <= n => {
                Err(TransportFailure::Unavailable(format!("injected failure {attempt}/{n}")))
            }
            _ => self.responder.respond(req),
        };
        self.log(req, attempt, outcome.is_err());
        self.in_flight.fetch_sub(1, Ordering::SeqCst);

        outcome.map(|reply| BackendReply {
            text: reply.text,
            finish: reply.finish,
            latency_ms: Some(latency),
        })
    }
}

/// Pattern-to-response table with seeded choice among alternatives.
///
/// File format (JSON):
/// `{"seed": 1, "rules": [{"pattern": "<regex>", "responses": ["..."]}], "default": "..."}`.
/// The first rule whose regex matches the user text wins; `{tag}` in a
/// response is replaced by the request tag.
#[derive(Debug, Clone)]
pub struct RuleSet {
    seed: u64,
    rules: Vec<(Regex, Vec<String>)>,
    default: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSetFile {
    #[serde(default)]
    seed: u64,
    rules: Vec<RuleFile>,
    #[serde(default)]
    default: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    pattern: String,
    responses: Vec<String>,
}

impl RuleSet {
    pub fn new(seed: u64, default: Option<String>) -> Self {
        Self {
            seed,
            rules: Vec::new(),
            default,
        }
    }

    pub fn rule(mut self, pattern: &str, responses: &[&str]) -> Result<Self> {
        let re = Regex::new(pattern)
            .map_err(|e| Error::config(format!("bad rule pattern `{pattern}`: {e}")))?;
        if responses.is_empty() {
            return Err(Error::config(format!("rule `{pattern}` has no responses")));
        }
        self.rules
            .push((re, responses.iter().map(|s| s.to_string()).collect()));
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RuleSetFile = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("rule set {}: {e}", path.display())))?;
        let mut set = RuleSet::new(file.seed, file.default);
        for r in &file.rules {
            let responses: Vec<&str> = r.responses.iter().map(String::as_str).collect();
            set = set.rule(&r.pattern, &responses)?;
        }
        Ok(set)
    }

    fn respond(&self, req: &CompletionRequest) -> MockReply {
        let hit = self
            .rules
            .iter()
            .find(|(re, _)| re.is_match(req.user_text()))
            .map(|(_, responses)| {
                let idx = stable_hash64(self.seed, &req.prompt_hash()) as usize % responses.len();
                responses[idx].as_str()
            })
            .or(self.default.as_deref());
        match hit {
            Some(text) => MockReply::text(text.replace("{tag}", req.request_tag())),
            None => MockReply::text(""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_tag: String,
    pub prompt_hash: String,
    pub response_text: String,
}

pub fn load_transcript(path: &Path) -> Result<HashMap<String, String>> {
    let entries: Vec<TranscriptEntry> = jsonl::read_jsonl(path)?;
    Ok(entries
        .into_iter()
        .map(|e| (e.prompt_hash, e.response_text))
        .collect())
}

/// Captures successful replies from an inner backend as transcript entries.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            entries: Mutex::new(Vec::new()),
        }
    }

    /// Entries sorted by `(request_tag, prompt_hash)`.
    pub fn entries(&self) -> Vec<TranscriptEntry> {
        let mut out = self.entries.lock().expect("transcript poisoned").clone();
        out.sort_by(|a, b| {
            (&a.request_tag, &a.prompt_hash).cmp(&(&b.request_tag, &b.prompt_hash))
        });
        out.dedup();
        out
    }

    pub fn write_transcript(&self, path: &Path) -> Result<()> {
        jsonl::write_jsonl(path, &self.entries())
    }
}

impl Backend for RecordingBackend {
    fn send(
        &self,
        req: &CompletionRequest,
        attempt: u32,
    ) -> std::result::Result<BackendReply, TransportFailure> {
        let reply = self.inner.send(req, attempt)?;
        if reply.finish == FinishReason::Complete {
            self.entries
                .lock()
                .expect("transcript poisoned")
                .push(TranscriptEntry {
                    request_tag: req.request_tag().to_string(),
                    prompt_hash: req.prompt_hash(),
                    response_text: reply.text.clone(),
                });
        }
        Ok(reply)
    }
}
