//! OpenAI-compatible HTTP client for `/v1/chat/completions` and
//! `/v1/embeddings`.

use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{check_embed_input, check_uniform_dim, ChatBackend, ChatRequest, ContentPart, EmbedBackend, Role};
use crate::error::BackendError;
use crate::model::Embedding;

const EXCERPT_LEN: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

pub struct HttpBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::Client,
}

impl HttpBackend {
    /// `model` names the embedding model; chat requests carry their own.
    pub fn new(base_url: &str, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: None,
            retry: RetryPolicy::default(),
            client: reqwest::Client::new(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key.filter(|k| !k.is_empty());
        self
    }

    /// Reads the bearer token from the named environment variable, if set.
    pub fn with_api_key_env(self, var: Option<&str>) -> Self {
        let key = var.and_then(|v| std::env::var(v).ok());
        self.with_api_key(key)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    async fn post_json(&self, path: &str, body: &Value) -> Result<String, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = self.post_once(&url, body, attempt).await;
            match result {
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let wait = self.retry.backoff(attempt);
                    warn!(%url, attempt, ?wait, error = %e, "retrying request");
                    tokio::time::sleep(wait).await;
                }
                other => return other,
            }
        }
    }

    async fn post_once(&self, url: &str, body: &Value, attempt: u32) -> Result<String, BackendError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| BackendError::Transport {
            attempts: attempt,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| BackendError::Transport {
            attempts: attempt,
            message: e.to_string(),
        })?;
        debug!(%url, status = status.as_u16(), bytes = text.len(), "response");
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                excerpt: excerpt(&text),
            });
        }
        Ok(text)
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

fn malformed(reason: impl Into<String>, body: &str) -> BackendError {
    BackendError::Malformed {
        reason: reason.into(),
        excerpt: excerpt(body),
    }
}

/// Request body for `/v1/chat/completions`.
pub fn chat_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
            };
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text(t) => json!({"type": "text", "text": t}),
                    ContentPart::Image(img) => {
                        json!({"type": "image_url", "image_url": {"url": img.data_url()}})
                    }
                })
                .collect();
            json!({"role": role, "content": content})
        })
        .collect();
    json!({
        "model": request.model_name,
        "temperature": request.temperature,
        "messages": messages,
    })
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: AssistantMessage,
}

#[derive(Deserialize)]
struct AssistantMessage {
    content: Option<String>,
}

/// Extracts the assistant text from a chat-completions response body.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| malformed(e.to_string(), body))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| malformed("no choices in response", body))?;
    choice
        .message
        .content
        .ok_or_else(|| malformed("choice has no message content", body))
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

/// Extracts `expected` embeddings, ordered by their `index` field.
pub fn parse_embedding_response(body: &str, expected: usize) -> Result<Vec<Embedding>, BackendError> {
    let parsed: EmbeddingResponse =
        serde_json::from_str(body).map_err(|e| malformed(e.to_string(), body))?;
    if parsed.data.len() != expected {
        return Err(malformed(
            format!("expected {expected} embeddings, got {}", parsed.data.len()),
            body,
        ));
    }
    let mut items: Vec<(usize, Vec<f64>)> = parsed
        .data
        .into_iter()
        .enumerate()
        .map(|(pos, item)| (item.index.unwrap_or(pos), item.embedding))
        .collect();
    items.sort_by_key(|(i, _)| *i);
    if items.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
        return Err(malformed("embedding indices are not 0..n", body));
    }
    let embeddings = items
        .into_iter()
        .map(|(_, v)| Embedding::new(v).map_err(|e| malformed(e.to_string(), body)))
        .collect::<Result<Vec<_>, _>>()?;
    check_uniform_dim(&embeddings)?;
    Ok(embeddings)
}

#[async_trait]
impl ChatBackend for HttpBackend {
    fn provider_kind(&self) -> &str {
        "http"
    }

    async fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = self.post_json("/v1/chat/completions", &chat_body(request)).await?;
        parse_chat_response(&body)
    }
}

#[async_trait]
impl EmbedBackend for HttpBackend {
    fn provider_kind(&self) -> &str {
        "http"
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        check_embed_input(texts)?;
        let body = json!({"model": self.model, "input": texts});
        let resp = self.post_json("/v1/embeddings", &body).await?;
        parse_embedding_response(&resp, texts.len())
    }
}
