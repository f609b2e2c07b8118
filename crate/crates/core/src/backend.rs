//! Chat-completion backends.
//!
//! [`HttpBackend`] talks to any service speaking the chat-completions JSON
//! shape. [`MockBackend`] answers from a script or replays a previous run's
//! transcripts, which makes whole runs deterministic and offline.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread::{self, ThreadId};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::{Conversation, Stage};
use crate::transcript::{self, ReplyTable};

const MAX_BACKOFF: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("script exhausted: no response for instance {instance_id:?}, stage {stage}, turn {turn}")]
    ScriptExhausted {
        instance_id: String,
        stage: Stage,
        turn: u32,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default = "one")]
    pub n: u32,
}

fn one() -> u32 {
    1
}

impl GenerationParams {
    pub fn greedy(max_tokens: u32) -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens,
            n: 1,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.n != 1 {
            return Err(BackendError::InvalidRequest("only n = 1 is supported".into()));
        }
        Ok(())
    }
}

/// Which call a request belongs to; used by scripted and replayed backends
/// and by the audit log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CallContext<'a> {
    pub instance_id: &'a str,
    pub stage: Stage,
    pub turn: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            usage: None,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<Completion, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<Completion, BackendError> {
        (**self).complete(ctx, conversation, params)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<Completion, BackendError> {
        (**self).complete(ctx, conversation, params)
    }
}

fn check_request(conversation: &Conversation, params: &GenerationParams) -> Result<(), BackendError> {
    params.validate()?;
    conversation
        .validate_request()
        .map_err(|e| BackendError::InvalidRequest(e.to_string()))
}

/// SHA-256 over the messages and generation parameters of a request.
pub fn request_digest(conversation: &Conversation, params: &GenerationParams) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(conversation).expect("conversations serialize"));
    h.update(serde_json::to_vec(params).expect("params serialize"));
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
}

/// Backend settings. Credentials are never stored here, only the name of
/// the environment variable that holds them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Full URL of the chat-completions route.
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    /// Minimum spacing between two requests issued by the same worker.
    pub min_interval_ms: u64,
    /// Mock script file (`kind = mock`).
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            model_name: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            retry_base_delay_ms: 1000,
            min_interval_ms: 0,
            script: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::Http => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(BackendError::Config("http backend needs an endpoint".into()));
                }
                if self.model_name.as_deref().is_none_or(str::is_empty) {
                    return Err(BackendError::Config("http backend needs a model name".into()));
                }
                if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
                    return Err(BackendError::Config("timeout must be positive".into()));
                }
            }
            BackendKind::Mock => {
                if self.script.is_none() {
                    return Err(BackendError::Config("mock backend needs a script".into()));
                }
            }
        }
        Ok(())
    }

    /// Delay before retry `attempt` (0-based): `base * 2^attempt`, capped.
    pub fn backoff_delay(&self, attempt: u32) -> Duration {
        let base = Duration::from_millis(self.retry_base_delay_ms);
        base.checked_mul(1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX))
            .unwrap_or(MAX_BACKOFF)
            .min(MAX_BACKOFF)
    }

    pub fn build(&self) -> Result<Box<dyn ChatBackend>, BackendError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Http => Box::new(HttpBackend::new(self.clone())?),
            BackendKind::Mock => {
                let path = self.script.as_ref().expect("validated");
                Box::new(MockBackend::new(MockScript::load(path)?)?)
            }
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    n: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(Completion),
    Retry(String),
    Fail(BackendError),
}

pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    last_request: Mutex<HashMap<ThreadId, Instant>>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            config,
            agent,
            api_key,
            last_request: Mutex::new(HashMap::new()),
        })
    }

    fn pace(&self) {
        if self.config.min_interval_ms == 0 {
            return;
        }
        let min = Duration::from_millis(self.config.min_interval_ms);
        let me = thread::current().id();
        let wait = {
            let last = self.last_request.lock().unwrap();
            last.get(&me).map(|t| min.saturating_sub(t.elapsed()))
        };
        if let Some(wait) = wait.filter(|w| !w.is_zero()) {
            thread::sleep(wait);
        }
        self.last_request.lock().unwrap().insert(me, Instant::now());
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Attempt {
        self.pace();
        let mut req = self
            .agent
            .post(self.config.endpoint.as_deref().unwrap_or_default())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                let reason = redact(&e.to_string(), self.api_key.as_deref());
                return match e {
                    ureq::Error::Io(_)
                    | ureq::Error::Timeout(_)
                    | ureq::Error::ConnectionFailed
                    | ureq::Error::HostNotFound
                    | ureq::Error::Protocol(_)
                    | ureq::Error::BodyStalled => Attempt::Retry(reason),
                    _ => Attempt::Fail(BackendError::Unavailable {
                        attempts: 1,
                        reason,
                    }),
                };
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(redact(&e.to_string(), self.api_key.as_deref())),
        };
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => return Attempt::Retry(format!("HTTP {status}")),
            _ => {
                return Attempt::Fail(BackendError::Rejected {
                    status,
                    body: redact(&truncate(&text, 500), self.api_key.as_deref()),
                })
            }
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fail(BackendError::BadResponse(e.to_string())),
        };
        match parsed.choices.into_iter().next() {
            Some(choice) => Attempt::Done(Completion {
                text: choice.message.content.unwrap_or_default(),
                usage: parsed.usage,
            }),
            None => Attempt::Fail(BackendError::BadResponse("no choices".into())),
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

fn redact(text: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => text.replace(s, "<redacted>"),
        _ => text.to_string(),
    }
}

impl ChatBackend for HttpBackend {
    fn complete(
        &self,
        _ctx: &CallContext<'_>,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<Completion, BackendError> {
        check_request(conversation, params)?;
        let body = WireRequest {
            model: self.config.model_name.as_deref().unwrap_or_default(),
            messages: conversation
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: match m.role {
                        crate::prompting::Role::System => "system",
                        crate::prompting::Role::User => "user",
                        crate::prompting::Role::Assistant => "assistant",
                    },
                    content: &m.content,
                })
                .collect(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            n: params.n,
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fail(BackendError::Unavailable { reason, .. }) => {
                    return Err(BackendError::Unavailable { attempts, reason })
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(reason) => {
                    if attempts > self.config.max_retries {
                        return Err(BackendError::Unavailable { attempts, reason });
                    }
                    let delay = self.config.backoff_delay(attempts - 1);
                    log::warn!("transient backend failure ({reason}), retrying in {delay:?}");
                    thread::sleep(delay);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    #[default]
    StageTable,
    Replay,
}

/// A scripted reply. `instance` and `turn` narrow the match; when absent
/// the entry applies to every instance or every turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<String>,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<u32>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub mode: MockMode,
    #[serde(default)]
    pub responses: Vec<MockEntry>,
    /// Transcript file or run directory (`mode = replay`). Relative paths
    /// resolve against the script file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_path: Option<PathBuf>,
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("reading {}: {e}", path.display())))?;
        let mut script: MockScript = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("parsing {}: {e}", path.display())))?;
        if let (Some(rel), Some(parent)) = (&script.replay_path, path.parent()) {
            if rel.is_relative() {
                script.replay_path = Some(parent.join(rel));
            }
        }
        Ok(script)
    }

    pub fn stage_table(responses: Vec<MockEntry>) -> Self {
        MockScript {
            mode: MockMode::StageTable,
            responses,
            replay_path: None,
        }
    }

    pub fn entry(stage: Stage, turn: Option<u32>, text: impl Into<String>) -> MockEntry {
        MockEntry {
            instance: None,
            stage,
            turn,
            text: text.into(),
        }
    }

    /// `(stage, turn)` pairs from `reachable` that no instance-independent
    /// entry answers.
    pub fn coverage_gaps(&self, reachable: &[(Stage, u32)]) -> Vec<(Stage, u32)> {
        if self.mode == MockMode::Replay {
            return Vec::new();
        }
        reachable
            .iter()
            .copied()
            .filter(|&(stage, turn)| {
                !self.responses.iter().any(|e| {
                    e.instance.is_none() && e.stage == stage && e.turn.is_none_or(|t| t == turn)
                })
            })
            .collect()
    }
}

type TableKey = (Option<String>, Stage, Option<u32>);

/// Scripted or replayed responses. Read-only after construction.
#[derive(Debug, Clone)]
pub struct MockBackend {
    table: HashMap<TableKey, String>,
    replay: Option<ReplyTable>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, BackendError> {
        match script.mode {
            MockMode::StageTable => {
                let mut table = HashMap::new();
                for e in script.responses {
                    let key = (e.instance, e.stage, e.turn);
                    if table.insert(key.clone(), e.text).is_some() {
                        return Err(BackendError::Config(format!(
                            "duplicate mock entry for {key:?}"
                        )));
                    }
                }
                Ok(MockBackend { table, replay: None })
            }
            MockMode::Replay => {
                let path = script
                    .replay_path
                    .ok_or_else(|| BackendError::Config("replay mode needs replay_path".into()))?;
                let replies = transcript::load_replies(&path)
                    .map_err(|e| BackendError::Config(e.to_string()))?;
                Ok(MockBackend {
                    table: HashMap::new(),
                    replay: Some(replies),
                })
            }
        }
    }

    pub fn from_replies(replies: ReplyTable) -> Self {
        MockBackend {
            table: HashMap::new(),
            replay: Some(replies),
        }
    }

    fn lookup(&self, ctx: &CallContext<'_>) -> Option<&str> {
        if let Some(replies) = &self.replay {
            return replies
                .get(&(ctx.instance_id.to_string(), ctx.stage, ctx.turn))
                .map(String::as_str);
        }
        let inst = Some(ctx.instance_id.to_string());
        [
            (inst.clone(), ctx.stage, Some(ctx.turn)),
            (inst, ctx.stage, None),
            (None, ctx.stage, Some(ctx.turn)),
            (None, ctx.stage, None),
        ]
        .iter()
        .find_map(|k| self.table.get(k))
        .map(String::as_str)
    }
}

impl ChatBackend for MockBackend {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<Completion, BackendError> {
        check_request(conversation, params)?;
        self.lookup(ctx)
            .map(Completion::text)
            .ok_or_else(|| BackendError::ScriptExhausted {
                instance_id: ctx.instance_id.to_string(),
                stage: ctx.stage,
                turn: ctx.turn,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp_ms: u64,
    pub instance_id: String,
    pub stage: Stage,
    pub turn: u32,
    pub request_digest: String,
    pub max_tokens: u32,
    pub latency_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    pub response_chars: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wraps a backend and appends one JSONL [`AuditRecord`] per call.
pub struct Audited<B> {
    inner: B,
    sink: Mutex<Box<dyn Write + Send>>,
}

impl<B: ChatBackend> Audited<B> {
    pub fn new(inner: B, sink: Box<dyn Write + Send>) -> Self {
        Audited {
            inner,
            sink: Mutex::new(sink),
        }
    }

    pub fn to_file(inner: B, path: impl AsRef<Path>) -> io::Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self::new(inner, Box::new(io::LineWriter::new(file))))
    }
}

impl<B: ChatBackend> ChatBackend for Audited<B> {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<Completion, BackendError> {
        let start = Instant::now();
        let result = self.inner.complete(ctx, conversation, params);
        let record = AuditRecord {
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            instance_id: ctx.instance_id.to_string(),
            stage: ctx.stage,
            turn: ctx.turn,
            request_digest: request_digest(conversation, params),
            max_tokens: params.max_tokens,
            latency_ms: start.elapsed().as_millis() as u64,
            prompt_tokens: result.as_ref().ok().and_then(|c| c.usage).map(|u| u.prompt_tokens),
            completion_tokens: result
                .as_ref()
                .ok()
                .and_then(|c| c.usage)
                .map(|u| u.completion_tokens),
            response_chars: result.as_ref().map_or(0, |c| c.text.chars().count()),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        let line = serde_json::to_string(&record).expect("audit records serialize");
        if let Err(e) = writeln!(self.sink.lock().unwrap(), "{line}") {
            log::warn!("failed to write audit record: {e}");
        }
        result
    }
}

/// Memoizes replies by call identity and request digest, so configurations
/// that share a stage (same prompt, same parameters) pay for it once.
pub struct Caching<B> {
    inner: B,
    cache: Mutex<HashMap<(String, Stage, u32, String), Completion>>,
    hits: std::sync::atomic::AtomicUsize,
}

impl<B: ChatBackend> Caching<B> {
    pub fn new(inner: B) -> Self {
        Caching {
            inner,
            cache: Mutex::new(HashMap::new()),
            hits: Default::default(),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl<B: ChatBackend> ChatBackend for Caching<B> {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        conversation: &Conversation,
        params: &GenerationParams,
    ) -> Result<Completion, BackendError> {
        let key = (
            ctx.instance_id.to_string(),
            ctx.stage,
            ctx.turn,
            request_digest(conversation, params),
        );
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            return Ok(hit.clone());
        }
        let completion = self.inner.complete(ctx, conversation, params)?;
        self.cache.lock().unwrap().insert(key, completion.clone());
        Ok(completion)
    }
}
