//! Model backends: free-text generation and per-step token scoring.
//!
//! Two implementations ship here. [`MockBackend`] replays a script of
//! substring-matched responses and is fully deterministic. [`HttpBackend`]
//! speaks a minimal JSON protocol:
//!
//! ```text
//! POST {endpoint}/generate
//! {"prompt": string,
//!  "trigger": {"modality": "text"|"image", "text"?: string, "image_b64"?: string},
//!  "mode": "generate_text"|"score_tokens",
//!  "prefix"?: [int]}
//! -> {"text"?: string, "logits"?: [float]}
//! ```
//!
//! Any non-200 status is reported as [`BackendError::Unreachable`].

use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;
use crate::types::{Modality, Prompt, Trigger};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("no script entry matches request")]
    NoScriptMatch,
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("expected {expected} logits, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    GenerateText,
    ScoreTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub prompt: Prompt,
    pub trigger: Trigger,
    pub mode: Mode,
    /// Tokens already emitted in the constrained region; `Some` iff scoring.
    pub prefix: Option<Vec<TokenId>>,
}

#[derive(Serialize)]
struct WireTrigger {
    modality: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: String,
    trigger: WireTrigger,
    mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    prefix: Option<&'a [TokenId]>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: Option<String>,
    logits: Option<Vec<f64>>,
}

impl BackendRequest {
    pub fn generate(prompt: Prompt, trigger: Trigger) -> Self {
        Self {
            prompt,
            trigger,
            mode: Mode::GenerateText,
            prefix: None,
        }
    }

    pub fn score(prompt: Prompt, trigger: Trigger, prefix: Vec<TokenId>) -> Self {
        Self {
            prompt,
            trigger,
            mode: Mode::ScoreTokens,
            prefix: Some(prefix),
        }
    }

    fn check_mode(&self, mode: Mode) -> Result<(), BackendError> {
        if self.mode != mode {
            return Err(BackendError::InvalidRequest(format!(
                "request mode {:?} sent to {mode:?}",
                self.mode
            )));
        }
        if (self.mode == Mode::ScoreTokens) != self.prefix.is_some() {
            return Err(BackendError::InvalidRequest(
                "prefix must be present exactly when scoring tokens".into(),
            ));
        }
        Ok(())
    }

    /// Body of the HTTP request, byte for byte.
    pub fn wire_json(&self) -> Result<String, BackendError> {
        let image_b64 = match self.trigger.image_ref() {
            Some(img) => Some(BASE64.encode(
                img.bytes()
                    .map_err(|e| BackendError::InvalidRequest(format!("image unreadable: {e}")))?,
            )),
            None => None,
        };
        let wire = WireRequest {
            prompt: self.prompt.render(),
            trigger: WireTrigger {
                modality: self.trigger.modality(),
                text: self.trigger.text_body().map(str::to_string),
                image_b64,
            },
            mode: self.mode,
            prefix: self.prefix.as_deref(),
        };
        serde_json::to_string(&wire).map_err(|e| BackendError::InvalidRequest(e.to_string()))
    }
}

pub trait ModelBackend: Send + Sync {
    fn generate_text(&self, req: &BackendRequest) -> Result<String, BackendError>;
    /// One logit per vocabulary id; must be exactly `vocab_size` long.
    fn score_tokens(&self, req: &BackendRequest, vocab_size: usize) -> Result<Vec<f64>, BackendError>;
}

fn check_len(logits: Vec<f64>, vocab_size: usize) -> Result<Vec<f64>, BackendError> {
    if logits.len() != vocab_size {
        return Err(BackendError::DimensionMismatch {
            expected: vocab_size,
            got: logits.len(),
        });
    }
    Ok(logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockResponse {
    Text(String),
    Logits(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring searched for in the request's wire JSON.
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(flatten)]
    pub response: MockResponse,
}

/// Ordered list of scripted responses. Text entries answer generation
/// requests, logit entries answer scoring requests; within a kind the first
/// entry whose pattern occurs in the request wins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    pub entries: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(mut self, pattern: impl Into<String>, text: impl Into<String>) -> Self {
        self.entries.push(ScriptEntry {
            pattern: pattern.into(),
            response: MockResponse::Text(text.into()),
        });
        self
    }

    pub fn logits(mut self, pattern: impl Into<String>, logits: Vec<f64>) -> Self {
        self.entries.push(ScriptEntry {
            pattern: pattern.into(),
            response: MockResponse::Logits(logits),
        });
        self
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let script: Self =
            serde_json::from_str(json).map_err(|e| BackendError::InvalidRequest(format!("mock script: {e}")))?;
        if let Some(n) = script.vocab_size {
            script.validate(n)?;
        }
        Ok(script)
    }

    /// Every logit entry must have exactly `vocab_size` values.
    pub fn validate(&self, vocab_size: usize) -> Result<(), BackendError> {
        for e in &self.entries {
            if let MockResponse::Logits(l) = &e.response {
                if l.len() != vocab_size {
                    return Err(BackendError::DimensionMismatch {
                        expected: vocab_size,
                        got: l.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Deterministic scripted backend. Calls are serialized through an internal
/// lock and recorded in a transcript.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    transcript: Mutex<Vec<(Mode, String)>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            transcript: Mutex::new(Vec::new()),
        }
    }

    /// Wire JSON of every request seen so far, in order.
    pub fn transcript(&self) -> Vec<(Mode, String)> {
        self.transcript.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn respond(&self, req: &BackendRequest) -> Result<&MockResponse, BackendError> {
        let wire = req.wire_json()?;
        let mut log = self.transcript.lock().unwrap_or_else(|e| e.into_inner());
        log.push((req.mode, wire.clone()));
        self.script
            .entries
            .iter()
            .filter(|e| {
                matches!(
                    (&e.response, req.mode),
                    (MockResponse::Text(_), Mode::GenerateText) | (MockResponse::Logits(_), Mode::ScoreTokens)
                )
            })
            .find(|e| wire.contains(&e.pattern))
            .map(|e| &e.response)
            .ok_or(BackendError::NoScriptMatch)
    }
}

impl ModelBackend for MockBackend {
    fn generate_text(&self, req: &BackendRequest) -> Result<String, BackendError> {
        req.check_mode(Mode::GenerateText)?;
        match self.respond(req)? {
            MockResponse::Text(t) => Ok(t.clone()),
            MockResponse::Logits(_) => unreachable!("filtered by mode"),
        }
    }

    fn score_tokens(&self, req: &BackendRequest, vocab_size: usize) -> Result<Vec<f64>, BackendError> {
        req.check_mode(Mode::ScoreTokens)?;
        match self.respond(req)? {
            MockResponse::Logits(l) => check_len(l.clone(), vocab_size),
            MockResponse::Text(_) => unreachable!("filtered by mode"),
        }
    }
}

/// Stateless-per-request HTTP adapter. No retries.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: &str) -> Self {
        Self::with_timeout(endpoint, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(endpoint: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/generate", endpoint.trim_end_matches('/')),
            agent,
        }
    }

    fn call(&self, req: &BackendRequest) -> Result<WireResponse, BackendError> {
        let body = req.wire_json()?;
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body.as_str())
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(BackendError::Unreachable(format!("HTTP {status}")));
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }
}

impl ModelBackend for HttpBackend {
    fn generate_text(&self, req: &BackendRequest) -> Result<String, BackendError> {
        req.check_mode(Mode::GenerateText)?;
        self.call(req)?
            .text
            .ok_or_else(|| BackendError::MalformedResponse("missing \"text\"".into()))
    }

    fn score_tokens(&self, req: &BackendRequest, vocab_size: usize) -> Result<Vec<f64>, BackendError> {
        req.check_mode(Mode::ScoreTokens)?;
        let logits = self
            .call(req)?
            .logits
            .ok_or_else(|| BackendError::MalformedResponse("missing \"logits\"".into()))?;
        check_len(logits, vocab_size)
    }
}
