//! Model access contracts.
//!
//! A [`ChatBackend`] answers one single-round request; it never keeps state
//! between calls. An [`Embedder`] maps texts to unit vectors. Concrete
//! backends: an OpenAI-compatible HTTP client, the offline simulator, and
//! fixture-replay / scripted doubles for tests.

mod config;
mod embed;
mod http;
mod retry;
mod scripted;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CueConflictItem;
use crate::steering::PerturbationSpec;

pub use config::{BackendSpec, BackendsConfig, EmbedderSpec};
pub use embed::{normalize_batch, HashingEmbedder, OneHotEmbedder};
pub use http::{HttpChatBackend, HttpEmbedder};
pub use retry::RetryPolicy;
pub use scripted::{CountingBackend, ReplayBackend, ReplyFixture, ScriptedBackend};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prompt matches no registered template: {0}")]
    UnknownTemplate(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::RateLimited { .. } | BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    /// Lossless PNG, base64 encoded.
    ImagePng { data: String },
    /// Stand-in for pixel data when the backend consumes metadata only.
    ImageRef { item_id: String, perturbation: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    /// Concatenated text parts.
    pub fn text_content(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                _ => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample { seed: Option<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub logprob_k: Option<u32>,
    pub decode: DecodeMode,
}

impl ChatRequest {
    pub fn single_turn(parts: Vec<ContentPart>) -> Self {
        Self {
            messages: vec![ChatMessage {
                role: Role::User,
                content: parts,
            }],
            temperature: 0.0,
            max_tokens: 256,
            logprob_k: None,
            decode: DecodeMode::Greedy,
        }
    }

    /// Temperature the model actually samples at; greedy decoding ignores the field.
    pub fn effective_temperature(&self) -> f64 {
        match self.decode {
            DecodeMode::Greedy => 0.0,
            DecodeMode::Sample { .. } => self.temperature,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be nonnegative".into()));
        }
        if let DecodeMode::Sample { seed: None } = self.decode {
            if self.temperature <= 0.0 {
                return Err(BackendError::InvalidRequest(
                    "sampling needs temperature > 0 or an explicit seed".into(),
                ));
            }
        }
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        Ok(())
    }

    /// Text of the last user message.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(ChatMessage::text_content)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub first_token_top_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

impl ChatReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            first_token_top_logprobs: None,
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        }
    }
}

/// Per-trial metadata passed alongside a request.
///
/// HTTP backends only use `item_id` for error reporting; the simulator reads
/// the labels and perturbation instead of pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialContext {
    pub item_id: String,
    pub item: Option<CueConflictItem>,
    pub perturbation: PerturbationSpec,
    /// Seed from the run's seed list.
    pub run_seed: u64,
    /// Stream key derived from `(run_seed, item_id)`.
    pub trial_seed: u64,
}

impl TrialContext {
    pub fn bare(item_id: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            item: None,
            perturbation: PerturbationSpec::None,
            run_seed: 0,
            trial_seed: 0,
        }
    }

    pub fn for_item(item: &CueConflictItem, perturbation: PerturbationSpec, run_seed: u64) -> Self {
        Self {
            item_id: item.item_id.clone(),
            item: Some(item.clone()),
            perturbation,
            run_seed,
            trial_seed: crate::rng::derive_seed(run_seed, &item.item_id),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, request: &ChatRequest, ctx: &TrialContext) -> Result<ChatReply, BackendError>;

    fn supports_logprobs(&self) -> bool;

    /// Whether requests must carry encoded pixels (false: an [`ContentPart::ImageRef`] suffices).
    fn wants_pixels(&self) -> bool {
        true
    }

    /// Maximum in-flight requests the runner may issue.
    fn concurrency_limit(&self) -> usize {
        1
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    /// One unit vector per input text.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
}

/// Counting semaphore bounding in-flight calls.
#[derive(Debug)]
pub struct ConcurrencyGate {
    limit: usize,
    state: Mutex<GateState>,
    cv: Condvar,
}

#[derive(Debug, Default)]
struct GateState {
    in_flight: usize,
    peak: usize,
}

pub struct Permit<'a> {
    gate: &'a ConcurrencyGate,
}

impl ConcurrencyGate {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new(GateState::default()),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().expect("gate poisoned");
        while st.in_flight >= self.limit {
            st = self.cv.wait(st).expect("gate poisoned");
        }
        st.in_flight += 1;
        st.peak = st.peak.max(st.in_flight);
        Permit { gate: self }
    }

    pub fn peak(&self) -> usize {
        self.state.lock().expect("gate poisoned").peak
    }

    pub fn limit(&self) -> usize {
        self.limit
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.gate.state.lock().expect("gate poisoned");
        st.in_flight -= 1;
        self.gate.cv.notify_one();
    }
}
