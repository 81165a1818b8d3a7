//! Gateway to chat-completion style model endpoints.
//!
//! Every model role (pruner, planner, captioner, verifier, label resolver and
//! the remote detector) goes through [`Gateway::complete`]: single-turn,
//! stateless requests with a bounded retry policy. Each call is appended once
//! to the transcript, and a gateway built with [`Gateway::replay`] answers
//! from a recorded transcript instead of the network.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Pruner,
    Planner,
    Caption,
    Verify,
    LabelResolve,
    Detect,
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PromptRole::Pruner => "pruner",
            PromptRole::Planner => "planner",
            PromptRole::Caption => "caption",
            PromptRole::Verify => "verify",
            PromptRole::LabelResolve => "label_resolve",
            PromptRole::Detect => "detect",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("template placeholder '{0}' has no binding")]
    MissingPlaceholder(String),
    #[error("backend failure after {attempts} attempt(s): {last}")]
    BackendFailure { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("http status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    pub auth_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
}

impl Default for ModelEndpoint {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model: "gpt-4".into(),
            auth_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 30.0,
            max_retries: 2,
            temperature: 0.0,
        }
    }
}

impl ModelEndpoint {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(1e-3))
    }

    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

/// A prompt with `{name}` placeholders. Lines starting with `#` are comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role: PromptRole,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(role: PromptRole, source: &str) -> Self {
        let text = source
            .lines()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        Self {
            role,
            text: text.trim().to_string(),
        }
    }

    pub fn bundled(role: PromptRole) -> Self {
        let src = match role {
            PromptRole::Pruner => include_str!("../data/prompts/pruner.txt"),
            PromptRole::Planner => include_str!("../data/prompts/planner.txt"),
            PromptRole::Caption => include_str!("../data/prompts/caption.txt"),
            PromptRole::Verify => include_str!("../data/prompts/verify.txt"),
            PromptRole::LabelResolve => include_str!("../data/prompts/label_resolve.txt"),
            PromptRole::Detect => include_str!("../data/prompts/detect.txt"),
        };
        Self::new(role, src)
    }

    pub fn load(role: PromptRole, path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(role, &std::fs::read_to_string(path)?))
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_ident(&after[..close]) => {
                    out.insert(after[..close].to_string());
                    rest = &after[close + 1..];
                }
                _ => rest = after,
            }
        }
        out
    }

    /// Substitutes every placeholder; unknown bindings are ignored.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        let mut out = String::with_capacity(self.text.len() + 64);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_ident(&after[..close]) => {
                    let key = &after[..close];
                    let value = bindings
                        .get(key)
                        .ok_or_else(|| GatewayError::MissingPlaceholder(key.to_string()))?;
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Helper for building binding maps.
pub fn bindings<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Sends one rendered request and returns the raw completion text.
pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &ModelEndpoint, request: &str) -> Result<String, TransportError>;
}

/// OpenAI-compatible `chat/completions` over HTTP.
#[derive(Debug, Default, Clone, Copy)]
pub struct HttpTransport;

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl Transport for HttpTransport {
    fn send(&self, endpoint: &ModelEndpoint, request: &str) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout()))
            .build()
            .into();
        let body = ChatRequest {
            model: &endpoint.model,
            temperature: endpoint.temperature,
            messages: vec![ChatMessage {
                role: "user",
                content: request,
            }],
        };
        let mut req = agent.post(endpoint.completions_url());
        if let Some(token) = endpoint.auth_env.as_deref().and_then(|v| std::env::var(v).ok()) {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(&body).map_err(map_ureq)?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError::Malformed("no choices".into()))
    }
}

fn map_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::StatusCode(code) => TransportError::Status(code),
        ureq::Error::Timeout(_) => TransportError::Timeout,
        other => TransportError::Connection(other.to_string()),
    }
}

/// Transport answering from a closure; used for mocks and in-process models.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&str) -> Result<String, TransportError> + Send + Sync,
{
    fn send(&self, _endpoint: &ModelEndpoint, request: &str) -> Result<String, TransportError> {
        (self.0)(request)
    }
}

/// Transport returning a fixed sequence of outcomes, then connection errors.
#[derive(Default)]
pub struct ScriptedTransport {
    replies: Mutex<VecDeque<Result<String, TransportError>>>,
}

impl ScriptedTransport {
    pub fn new(replies: impl IntoIterator<Item = Result<String, TransportError>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
        }
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, _endpoint: &ModelEndpoint, _request: &str) -> Result<String, TransportError> {
        self.replies
            .lock()
            .expect("scripted transport poisoned")
            .pop_front()
            .unwrap_or_else(|| Err(TransportError::Connection("script exhausted".into())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub role: PromptRole,
    pub request: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub attempts: u32,
    pub latency_ms: u64,
}

/// Shared, append-only log of model interactions.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    inner: Arc<Mutex<Vec<TranscriptEntry>>>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        Self {
            inner: Arc::new(Mutex::new(entries)),
        }
    }

    fn push(&self, mut entry: TranscriptEntry) {
        let mut log = self.inner.lock().expect("transcript poisoned");
        entry.seq = log.len() as u64;
        log.push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.inner.lock().expect("transcript poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("transcript poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_jsonl(&self) -> String {
        self.entries()
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_entries(entries))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl() + "\n")
    }
}

enum Backend {
    Live(Arc<dyn Transport>),
    Replay(Mutex<VecDeque<TranscriptEntry>>),
}

/// Model gateway shared by all remote roles of one episode.
#[derive(Clone)]
pub struct Gateway {
    endpoint: ModelEndpoint,
    backend: Arc<Backend>,
    transcript: Transcript,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("endpoint", &self.endpoint)
            .field("replay", &matches!(*self.backend, Backend::Replay(_)))
            .finish()
    }
}

impl Gateway {
    pub fn new(endpoint: ModelEndpoint, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint,
            backend: Arc::new(Backend::Live(transport)),
            transcript: Transcript::new(),
        }
    }

    pub fn http(endpoint: ModelEndpoint) -> Self {
        Self::new(endpoint, Arc::new(HttpTransport))
    }

    /// Answers each call from the next recorded entry instead of a transport.
    pub fn replay(recorded: &Transcript) -> Self {
        Self {
            endpoint: ModelEndpoint::default(),
            backend: Arc::new(Backend::Replay(Mutex::new(recorded.entries().into()))),
            transcript: Transcript::new(),
        }
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// One logical completion, retried on transport failure up to `max_retries` times.
    pub fn complete(&self, role: PromptRole, request: &str) -> Result<String, GatewayError> {
        let started = Instant::now();
        let (outcome, attempts) = match &*self.backend {
            Backend::Live(transport) => {
                let mut attempts = 0;
                let mut last = None;
                let mut result = None;
                while attempts <= self.endpoint.max_retries {
                    attempts += 1;
                    match transport.send(&self.endpoint, request) {
                        Ok(text) => {
                            result = Some(text);
                            break;
                        }
                        Err(e) => {
                            log::debug!("{role} attempt {attempts} failed: {e}");
                            last = Some(e.to_string());
                        }
                    }
                }
                match result {
                    Some(text) => (Ok(text), attempts),
                    None => (Err(last.unwrap_or_default()), attempts),
                }
            }
            Backend::Replay(queue) => {
                let entry = queue.lock().expect("replay queue poisoned").pop_front();
                match entry {
                    Some(e) if e.role == role && e.request == request => match e.response {
                        Some(text) => (Ok(text), e.attempts),
                        None => (Err(e.error.unwrap_or_else(|| "recorded failure".into())), e.attempts),
                    },
                    Some(e) => (
                        Err(format!("replay diverged at seq {}: expected {} request", e.seq, e.role)),
                        1,
                    ),
                    None => (Err("replay transcript exhausted".into()), 1),
                }
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        self.transcript.push(TranscriptEntry {
            seq: 0,
            role,
            request: request.to_string(),
            response: outcome.as_ref().ok().cloned(),
            error: outcome.as_ref().err().cloned(),
            attempts,
            latency_ms,
        });
        outcome.map_err(|last| GatewayError::BackendFailure { attempts, last })
    }
}

/// Object reference in a planner reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeRef {
    Id(u32),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedAction {
    ExploreScene,
    ExploreObj(NodeRef),
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Labels(Vec<String>),
    Action(ParsedAction),
    YesNo(bool),
    Text(String),
}

/// Applies the answer grammar of `role` to a completion.
pub fn parse(role: PromptRole, text: &str) -> Result<Parsed, GatewayError> {
    let protocol = |m: &str| GatewayError::Protocol(format!("{role}: {m}"));
    match role {
        PromptRole::Pruner => {
            let open = text.find('[').ok_or_else(|| protocol("missing '['"))?;
            let close = text[open..].find(']').ok_or_else(|| protocol("missing ']'"))? + open;
            let labels = text[open + 1..close]
                .split(',')
                .map(clean_token)
                .filter(|s| !s.is_empty())
                .collect();
            Ok(Parsed::Labels(labels))
        }
        PromptRole::Planner => {
            let lower = text.to_ascii_lowercase();
            let scene = lower.find("<explore_scene>");
            let obj = lower.find("<explore_obj>");
            let done = lower.find("<done>");
            let first = [scene, obj, done].into_iter().flatten().min();
            match first {
                None => Err(protocol("no action token")),
                Some(p) if Some(p) == scene => Ok(Parsed::Action(ParsedAction::ExploreScene)),
                Some(p) if Some(p) == done => Ok(Parsed::Action(ParsedAction::Done)),
                Some(p) => {
                    let arg = text[p + "<explore_obj>".len()..]
                        .lines()
                        .next()
                        .map(clean_token)
                        .unwrap_or_default();
                    if arg.is_empty() {
                        return Err(protocol("<explore_obj> without an object"));
                    }
                    let digits = arg.trim_start_matches('#');
                    let node = match digits.parse::<u32>() {
                        Ok(id) => NodeRef::Id(id),
                        Err(_) => NodeRef::Label(arg),
                    };
                    Ok(Parsed::Action(ParsedAction::ExploreObj(node)))
                }
            }
        }
        PromptRole::Verify => {
            let word = text
                .split(|c: char| !c.is_ascii_alphabetic())
                .find(|w| !w.is_empty())
                .unwrap_or("")
                .to_ascii_lowercase();
            match word.as_str() {
                "yes" => Ok(Parsed::YesNo(true)),
                "no" => Ok(Parsed::YesNo(false)),
                _ => Err(protocol("expected yes or no")),
            }
        }
        PromptRole::Caption | PromptRole::LabelResolve => {
            let line = text
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .ok_or_else(|| protocol("empty reply"))?;
            let line = if role == PromptRole::LabelResolve {
                clean_token(line)
            } else {
                line.to_string()
            };
            if line.is_empty() {
                return Err(protocol("empty reply"));
            }
            Ok(Parsed::Text(line))
        }
        PromptRole::Detect => Ok(Parsed::Text(text.trim().to_string())),
    }
}

fn clean_token(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '[' | ']' | '(' | ')' | '.' | ':'))
        .trim()
        .to_ascii_lowercase()
}
