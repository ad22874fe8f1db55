//! Text-generation backends.
//!
//! [`HttpBackend`] speaks the OpenAI-compatible chat-completions protocol with
//! retry and backoff. [`StubBackend`] answers from canned responses keyed by a
//! hash of the message list, optionally loaded from a JSONL cassette.
//! [`ScriptedBackend`] wraps a closure, and [`RecordingBackend`] captures any
//! backend's exchanges into a cassette.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::records::{read_jsonl, write_jsonl, RecordsError};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("backend rejected request with HTTP {status}: {body}")]
    BackendRejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("stub has no response for request key {0}")]
    StubMiss(String),
    #[error("cassette error: {0}")]
    Cassette(#[from] RecordsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenRequest {
    pub fn new(user: impl Into<String>) -> Self {
        Self {
            system: None,
            user: user.into(),
            temperature: 0.0,
            max_tokens: 2048,
            seed: None,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut msgs = Vec::with_capacity(2);
        if let Some(s) = &self.system {
            msgs.push(ChatMessage {
                role: "system".into(),
                content: s.clone(),
            });
        }
        msgs.push(ChatMessage {
            role: "user".into(),
            content: self.user.clone(),
        });
        msgs
    }

    /// Stable hash of the full message list; the stub lookup key.
    pub fn key(&self) -> String {
        message_key(&self.messages())
    }

    pub fn check(&self) -> Result<(), BackendError> {
        if self.user.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty user message".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn message_key(messages: &[ChatMessage]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResult {
    pub text: String,
    pub usage: Usage,
    pub backend: String,
    /// Number of retries spent before success.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120.0,
            max_retries: 4,
            max_in_flight: 8,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::InvalidRequest("max_in_flight must be >= 1".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(BackendError::InvalidRequest("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    async fn generate(&self, req: &GenRequest) -> Result<GenResult, BackendError>;
}

/// Runs `reqs` with at most `max_in_flight` outstanding; `out[i]` answers `reqs[i]`.
pub async fn generate_batch(
    backend: &dyn Backend,
    reqs: &[GenRequest],
    max_in_flight: usize,
) -> Vec<Result<GenResult, BackendError>> {
    stream::iter(reqs.iter().map(|r| backend.generate(r)))
        .buffered(max_in_flight.max(1))
        .collect()
        .await
}

// ---------------------------------------------------------------- http

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(GenResult),
    Retry(String),
    Fatal(BackendError),
}

pub struct HttpBackend {
    client: reqwest::Client,
    cfg: BackendConfig,
    api_key: Option<String>,
    id: String,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let id = format!("http:{}", cfg.model);
        Ok(Self {
            client,
            cfg,
            api_key,
            id,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.cfg.backoff_base_ms;
        let exp = base.saturating_mul(1u64 << attempt.min(20)).min(self.cfg.backoff_max_ms);
        let jitter = if base > 0 {
            rand::thread_rng().gen_range(0..=base)
        } else {
            0
        };
        Duration::from_millis(exp + jitter)
    }

    async fn attempt(&self, req: &GenRequest, retries: u32) -> Attempt {
        let body = ChatBody {
            model: &self.cfg.model,
            messages: req.messages(),
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            seed: req.seed,
        };
        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send().await {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if !status.is_success() {
            return Attempt::Fatal(BackendError::BackendRejected {
                status: status.as_u16(),
                body: excerpt(&text, 300),
            });
        }
        let parsed: ChatResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(BackendError::MalformedResponse(e.to_string())),
        };
        let Some(content) = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
        else {
            return Attempt::Fatal(BackendError::MalformedResponse(
                "no content in first choice".into(),
            ));
        };
        Attempt::Done(GenResult {
            text: content,
            usage: parsed.usage.unwrap_or_default(),
            backend: self.id.clone(),
            retries,
        })
    }
}

fn excerpt(text: &str, max_chars: usize) -> String {
    text.chars().take(max_chars).collect()
}

#[async_trait]
impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, req: &GenRequest) -> Result<GenResult, BackendError> {
        req.check()?;
        let mut retries = 0;
        loop {
            match self.attempt(req, retries).await {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(why) => {
                    if retries >= self.cfg.max_retries {
                        return Err(BackendError::BackendUnavailable {
                            attempts: retries + 1,
                            last_error: why,
                        });
                    }
                    tracing::debug!(retries, %why, "transient backend failure, backing off");
                    tokio::time::sleep(self.backoff(retries)).await;
                    retries += 1;
                }
            }
        }
    }
}

// ---------------------------------------------------------------- cassette / stub

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request: CassetteRequest,
    pub response: CassetteResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

pub fn read_cassette(path: &Path) -> Result<Vec<CassetteEntry>, BackendError> {
    Ok(read_jsonl(path)?)
}

pub fn write_cassette(path: &Path, entries: &[CassetteEntry]) -> Result<(), BackendError> {
    write_jsonl(path, entries)?;
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct StubBackend {
    canned: HashMap<String, String>,
}

impl StubBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, req: &GenRequest, text: impl Into<String>) {
        self.canned.insert(req.key(), text.into());
    }

    pub fn with(mut self, req: &GenRequest, text: impl Into<String>) -> Self {
        self.insert(req, text);
        self
    }

    pub fn from_entries(entries: impl IntoIterator<Item = CassetteEntry>) -> Self {
        let canned = entries
            .into_iter()
            .map(|e| (message_key(&e.request.messages), e.response.text))
            .collect();
        Self { canned }
    }

    pub fn from_cassette(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::from_entries(read_cassette(path)?))
    }

    pub fn len(&self) -> usize {
        self.canned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canned.is_empty()
    }
}

#[async_trait]
impl Backend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    async fn generate(&self, req: &GenRequest) -> Result<GenResult, BackendError> {
        req.check()?;
        let key = req.key();
        match self.canned.get(&key) {
            Some(text) => Ok(GenResult {
                text: text.clone(),
                usage: Usage::default(),
                backend: "stub".into(),
                retries: 0,
            }),
            None => Err(BackendError::StubMiss(key)),
        }
    }
}

type Script = dyn Fn(&GenRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure; handy for tests and offline fixtures.
pub struct ScriptedBackend {
    script: Box<Script>,
}

impl ScriptedBackend {
    pub fn new(f: impl Fn(&GenRequest) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self {
            script: Box::new(f),
        }
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    async fn generate(&self, req: &GenRequest) -> Result<GenResult, BackendError> {
        req.check()?;
        (self.script)(req).map(|text| GenResult {
            text,
            usage: Usage::default(),
            backend: "scripted".into(),
            retries: 0,
        })
    }
}

/// Records every successful exchange of the wrapped backend.
pub struct RecordingBackend<B> {
    inner: B,
    entries: Mutex<BTreeMap<String, CassetteEntry>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded entries, ordered by request key so output is stable.
    pub fn entries(&self) -> Vec<CassetteEntry> {
        self.entries.lock().expect("poisoned").values().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<usize, BackendError> {
        let entries = self.entries();
        write_cassette(path, &entries)?;
        Ok(entries.len())
    }
}

#[async_trait]
impl<B: Backend> Backend for RecordingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    async fn generate(&self, req: &GenRequest) -> Result<GenResult, BackendError> {
        let res = self.inner.generate(req).await?;
        let entry = CassetteEntry {
            request: CassetteRequest {
                messages: req.messages(),
                temperature: req.temperature,
                max_tokens: req.max_tokens,
            },
            response: CassetteResponse {
                text: res.text.clone(),
                usage: res.usage,
            },
        };
        self.entries
            .lock()
            .expect("poisoned")
            .insert(req.key(), entry);
        Ok(res)
    }
}
