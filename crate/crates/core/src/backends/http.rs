//! OpenAI-compatible chat-completion and embedding clients.

use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{
    normalize_batch, BackendError, ChatBackend, ChatReply, ChatRequest, ContentPart, DecodeMode, Embedder,
    FinishReason, RetryPolicy, TokenLogprob, TrialContext,
};

/// JSON body for `POST {base}/chat/completions`.
pub fn chat_request_body(model: &str, req: &ChatRequest) -> Result<Value, BackendError> {
    let mut messages = Vec::with_capacity(req.messages.len());
    for m in &req.messages {
        let mut parts = Vec::with_capacity(m.content.len());
        for p in &m.content {
            parts.push(match p {
                ContentPart::Text { text } => json!({"type": "text", "text": text}),
                ContentPart::ImagePng { data } => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{data}")}
                }),
                ContentPart::ImageRef { item_id, .. } => {
                    return Err(BackendError::InvalidRequest(format!(
                        "image for `{item_id}` was not encoded; HTTP backends need pixels"
                    )))
                }
            });
        }
        messages.push(json!({"role": m.role, "content": parts}));
    }
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": req.effective_temperature(),
        "max_tokens": req.max_tokens,
    });
    if let DecodeMode::Sample { seed: Some(s) } = req.decode {
        body["seed"] = json!(s);
    }
    if let Some(k) = req.logprob_k {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(k);
    }
    Ok(body)
}

/// Pull text, finish reason and first-token top logprobs out of a completion.
pub fn parse_chat_response(v: &Value) -> Result<ChatReply, BackendError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    let first_token_top_logprobs = choice
        .pointer("/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .map(|arr| {
            arr.iter()
                .filter_map(|t| {
                    Some(TokenLogprob {
                        token: t.get("token")?.as_str()?.to_string(),
                        logprob: t.get("logprob")?.as_f64()?,
                    })
                })
                .collect::<Vec<_>>()
        });
    Ok(ChatReply {
        text,
        first_token_top_logprobs,
        finish_reason,
        latency_ms: 0,
    })
}

fn classify_status(status: StatusCode, retry_after: Option<Duration>, body: String) -> BackendError {
    match status.as_u16() {
        429 => BackendError::RateLimited { retry_after },
        408 | 504 => BackendError::Timeout,
        422 => BackendError::Unsupported(body),
        503 => BackendError::Transport(format!("service unavailable: {body}")),
        s => BackendError::Http { status: s, body },
    }
}

fn transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn post_json(client: &Client, url: &str, api_key: Option<&str>, body: &Value) -> Result<Value, BackendError> {
    let mut rb = client.post(url).json(body);
    if let Some(k) = api_key {
        rb = rb.bearer_auth(k);
    }
    let resp = rb.send().map_err(transport)?;
    let status = resp.status();
    if !status.is_success() {
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|h| h.to_str().ok())
            .and_then(|s| s.trim().parse::<f64>().ok())
            .map(Duration::from_secs_f64);
        let text = resp.text().unwrap_or_default();
        return Err(classify_status(status, retry_after, text));
    }
    resp.json::<Value>().map_err(|e| BackendError::Protocol(e.to_string()))
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

pub struct HttpChatBackend {
    name: String,
    base_url: String,
    model: String,
    api_key: Option<String>,
    logprobs: bool,
    concurrency: usize,
    retry: RetryPolicy,
    client: Client,
}

impl HttpChatBackend {
    pub fn new(
        name: impl Into<String>,
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            name: name.into(),
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            logprobs: false,
            concurrency: 1,
            retry: RetryPolicy::default(),
            client: build_client(Duration::from_secs(120))?,
        })
    }

    pub fn with_logprobs(mut self, supported: bool) -> Self {
        self.logprobs = supported;
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Result<Self, BackendError> {
        self.client = build_client(timeout)?;
        Ok(self)
    }
}

fn build_client(timeout: Duration) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::Transport(e.to_string()))
}

impl ChatBackend for HttpChatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, request: &ChatRequest, ctx: &TrialContext) -> Result<ChatReply, BackendError> {
        request.validate()?;
        if request.logprob_k.is_some() && !self.logprobs {
            return Err(BackendError::Unsupported(format!("{} does not report logprobs", self.name)));
        }
        let body = chat_request_body(&self.model, request)?;
        let url = endpoint(&self.base_url, "chat/completions");
        let start = Instant::now();
        let value = self
            .retry
            .run(
                |_| post_json(&self.client, &url, self.api_key.as_deref(), &body),
                &mut std::thread::sleep,
            )
            .inspect_err(|e| log::warn!("{} failed on {}: {e}", self.name, ctx.item_id))?;
        let mut reply = parse_chat_response(&value)?;
        reply.latency_ms = start.elapsed().as_millis() as u64;
        if request.logprob_k.is_none() {
            reply.first_token_top_logprobs = None;
        }
        Ok(reply)
    }

    fn supports_logprobs(&self) -> bool {
        self.logprobs
    }

    fn concurrency_limit(&self) -> usize {
        self.concurrency
    }
}

pub struct HttpEmbedder {
    name: String,
    base_url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: Client,
}

impl HttpEmbedder {
    pub fn new(
        name: impl Into<String>,
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            name: name.into(),
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            retry: RetryPolicy::default(),
            client: build_client(Duration::from_secs(60))?,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("nothing to embed".into()));
        }
        let body = json!({"model": self.model, "input": texts});
        let url = endpoint(&self.base_url, "embeddings");
        let value = self.retry.run(
            |_| post_json(&self.client, &url, self.api_key.as_deref(), &body),
            &mut std::thread::sleep,
        )?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("embedding response has no data".into()))?;
        let mut rows: Vec<(u64, Vec<f32>)> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let idx = d.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
                let v = d
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| BackendError::Protocol("missing embedding".into()))?
                    .iter()
                    .map(|x| x.as_f64().map(|f| f as f32))
                    .collect::<Option<Vec<f32>>>()
                    .ok_or_else(|| BackendError::Protocol("non-numeric embedding".into()))?;
                Ok((idx, v))
            })
            .collect::<Result<_, BackendError>>()?;
        if rows.len() != texts.len() {
            return Err(BackendError::Protocol(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                rows.len()
            )));
        }
        rows.sort_by_key(|(i, _)| *i);
        normalize_batch(rows.into_iter().map(|(_, v)| v).collect())
    }
}
