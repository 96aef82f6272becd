//! Deterministic test doubles: fixture replay, scripted turn sequences, and an
//! instrumented wrapper.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatReply, ChatRequest, FinishReason, TokenLogprob, TrialContext};

/// One recorded reply, keyed by item and optionally by trial seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyFixture {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<TokenLogprob>>,
}

/// Replays recorded replies byte-for-byte.
pub struct ReplayBackend {
    name: String,
    by_seed: HashMap<(String, u64), ReplyFixture>,
    by_item: HashMap<String, ReplyFixture>,
    logprobs: bool,
    concurrency: usize,
}

impl ReplayBackend {
    pub fn new(name: impl Into<String>, fixtures: Vec<ReplyFixture>) -> Self {
        let logprobs = fixtures.iter().any(|f| f.top_logprobs.is_some());
        let mut by_seed = HashMap::new();
        let mut by_item = HashMap::new();
        for f in fixtures {
            match f.seed {
                Some(s) => {
                    by_seed.insert((f.item_id.clone(), s), f);
                }
                None => {
                    by_item.insert(f.item_id.clone(), f);
                }
            }
        }
        Self {
            name: name.into(),
            by_seed,
            by_item,
            logprobs,
            concurrency: 8,
        }
    }

    /// JSON lines of [`ReplyFixture`].
    pub fn load(name: impl Into<String>, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut fixtures = Vec::new();
        for line in file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            fixtures.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Self::new(name, fixtures))
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    /// A fixture `seed` matches the run-level seed; unseeded fixtures match any seed.
    fn lookup(&self, ctx: &TrialContext) -> Option<&ReplyFixture> {
        self.by_seed
            .get(&(ctx.item_id.clone(), ctx.run_seed))
            .or_else(|| self.by_item.get(&ctx.item_id))
    }
}

impl ChatBackend for ReplayBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, request: &ChatRequest, ctx: &TrialContext) -> Result<ChatReply, BackendError> {
        if request.logprob_k.is_some() && !self.logprobs {
            return Err(BackendError::Unsupported("fixture has no logprobs".into()));
        }
        let f = self
            .lookup(ctx)
            .ok_or_else(|| BackendError::Protocol(format!("no fixture for `{}`", ctx.item_id)))?;
        let first_token_top_logprobs = match (request.logprob_k, &f.top_logprobs) {
            (Some(k), Some(lp)) => Some(lp.iter().take(k as usize).cloned().collect()),
            _ => None,
        };
        Ok(ChatReply {
            text: f.text.clone(),
            first_token_top_logprobs,
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        })
    }

    fn supports_logprobs(&self) -> bool {
        self.logprobs
    }

    fn wants_pixels(&self) -> bool {
        false
    }

    fn concurrency_limit(&self) -> usize {
        self.concurrency
    }
}

/// Emits a fixed sequence of replies, then `fallback` forever; keeps every request.
pub struct ScriptedBackend {
    name: String,
    script: Vec<String>,
    fallback: String,
    cursor: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(script: Vec<String>) -> Self {
        Self {
            name: "scripted".into(),
            script,
            fallback: "I have nothing further to add.".into(),
            cursor: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = text.into();
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("poisoned").clone()
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, request: &ChatRequest, _ctx: &TrialContext) -> Result<ChatReply, BackendError> {
        self.requests.lock().expect("poisoned").push(request.clone());
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        Ok(ChatReply::text(self.script.get(i).unwrap_or(&self.fallback).clone()))
    }

    fn supports_logprobs(&self) -> bool {
        false
    }

    fn wants_pixels(&self) -> bool {
        false
    }
}

/// Wraps a backend and records call counts, peak concurrency and request texts.
pub struct CountingBackend {
    inner: Arc<dyn ChatBackend>,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    seen: Mutex<Vec<(String, usize)>>,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        Self {
            inner,
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// `(item_id, message count)` per call, in arrival order.
    pub fn seen(&self) -> Vec<(String, usize)> {
        self.seen.lock().expect("poisoned").clone()
    }
}

impl ChatBackend for CountingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn chat(&self, request: &ChatRequest, ctx: &TrialContext) -> Result<ChatReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.seen
            .lock()
            .expect("poisoned")
            .push((ctx.item_id.clone(), request.messages.len()));
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let out = self.inner.chat(request, ctx);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn supports_logprobs(&self) -> bool {
        self.inner.supports_logprobs()
    }

    fn wants_pixels(&self) -> bool {
        self.inner.wants_pixels()
    }

    fn concurrency_limit(&self) -> usize {
        self.inner.concurrency_limit()
    }
}
