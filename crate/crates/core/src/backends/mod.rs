//! Provider interfaces for chat completion (text and vision) and text
//! embedding.
//!
//! Three implementations sit behind the same traits:
//! - [`http::HttpBackend`] speaks the OpenAI-compatible JSON protocol,
//! - [`synthetic::SyntheticBackend`] is a deterministic oracle for tests,
//! - [`cache::Cached`] wraps either one with a content-addressed disk cache.
//!
//! [`Throttled`] bounds the number of in-flight requests across a run.

pub mod cache;
pub mod http;
pub mod synthetic;

use std::sync::Arc;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::error::BackendError;
use crate::model::Embedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

/// Raw image bytes plus their media type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl ImagePayload {
    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    Image(ImagePayload),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl Message {
    pub fn user(parts: Vec<ContentPart>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePayload> {
        self.parts.iter().filter_map(|p| match p {
            ContentPart::Image(img) => Some(img),
            ContentPart::Text(_) => None,
        })
    }
}

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_name: String,
    pub temperature: f64,
    pub messages: Vec<Message>,
    /// Hash of the prompt template this request was built from.
    pub template_hash: String,
}

impl ChatRequest {
    pub fn new(
        model_name: impl Into<String>,
        temperature: f64,
        messages: Vec<Message>,
        template: &str,
    ) -> Result<Self, BackendError> {
        if !messages.iter().any(|m| m.role == Role::User) {
            return Err(BackendError::InvalidRequest(
                "request needs at least one user message".into(),
            ));
        }
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {temperature} must be >= 0"
            )));
        }
        Ok(Self {
            model_name: model_name.into(),
            temperature,
            messages,
            template_hash: sha256_hex(template.as_bytes()),
        })
    }

    /// Text of the last user message.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(Message::text)
            .unwrap_or_default()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePayload> {
        self.messages.iter().flat_map(Message::images)
    }

    /// Stable digest of everything the model sees.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.messages {
            h.update(match m.role {
                Role::System => b"system\0".as_slice(),
                Role::User => b"user\0".as_slice(),
            });
            for part in &m.parts {
                match part {
                    ContentPart::Text(t) => {
                        h.update(b"text\0");
                        h.update((t.len() as u64).to_le_bytes());
                        h.update(t.as_bytes());
                    }
                    ContentPart::Image(img) => {
                        h.update(b"image\0");
                        h.update(img.media_type.as_bytes());
                        h.update(b"\0");
                        h.update((img.bytes.len() as u64).to_le_bytes());
                        h.update(&img.bytes);
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Identifies which provider, model, prompt and temperature produced a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendFingerprint {
    pub provider_kind: String,
    pub model_name: String,
    pub prompt_hash: String,
    pub temperature: f64,
}

impl BackendFingerprint {
    pub fn for_chat(provider_kind: &str, request: &ChatRequest) -> Self {
        Self {
            provider_kind: provider_kind.to_string(),
            model_name: request.model_name.clone(),
            prompt_hash: request.template_hash.clone(),
            temperature: request.temperature,
        }
    }

    pub fn for_embed(provider_kind: &str, model_name: &str) -> Self {
        Self {
            provider_kind: provider_kind.to_string(),
            model_name: model_name.to_string(),
            prompt_hash: String::new(),
            temperature: 0.0,
        }
    }

    /// Short hex id, stable for identical inputs.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.provider_kind.as_bytes());
        h.update(b"\0");
        h.update(self.model_name.as_bytes());
        h.update(b"\0");
        h.update(self.prompt_hash.as_bytes());
        h.update(b"\0");
        h.update(self.temperature.to_bits().to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Short provider name used in fingerprints (e.g. `"http"`).
    fn provider_kind(&self) -> &str;

    async fn chat(&self, request: &ChatRequest) -> Result<String, BackendError>;

    fn fingerprint(&self, request: &ChatRequest) -> BackendFingerprint {
        BackendFingerprint::for_chat(self.provider_kind(), request)
    }
}

#[async_trait]
pub trait EmbedBackend: Send + Sync {
    fn provider_kind(&self) -> &str;

    fn model_name(&self) -> &str;

    /// One embedding per input text, all of the same dimension.
    async fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError>;

    fn fingerprint(&self) -> BackendFingerprint {
        BackendFingerprint::for_embed(self.provider_kind(), self.model_name())
    }
}

#[async_trait]
impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn provider_kind(&self) -> &str {
        (**self).provider_kind()
    }

    async fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).chat(request).await
    }
}

#[async_trait]
impl<T: EmbedBackend + ?Sized> EmbedBackend for Arc<T> {
    fn provider_kind(&self) -> &str {
        (**self).provider_kind()
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        (**self).embed(texts).await
    }
}

/// Rejects empty batches and empty strings before they reach a provider.
pub fn check_embed_input(texts: &[String]) -> Result<(), BackendError> {
    if texts.is_empty() {
        return Err(BackendError::InvalidRequest("embed called with no texts".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(BackendError::InvalidRequest(format!("text {i} is empty")));
    }
    Ok(())
}

/// Fails unless every embedding in the batch has the same dimension.
pub fn check_uniform_dim(embeddings: &[Embedding]) -> Result<(), BackendError> {
    if let Some(first) = embeddings.first() {
        for e in embeddings {
            if e.dim() != first.dim() {
                return Err(BackendError::DimensionMismatch {
                    expected: first.dim(),
                    got: e.dim(),
                });
            }
        }
    }
    Ok(())
}

/// Bounds concurrent requests to the wrapped backend with a shared semaphore.
#[derive(Clone)]
pub struct Throttled<B> {
    inner: B,
    permits: Arc<Semaphore>,
}

impl<B> Throttled<B> {
    pub fn new(inner: B, permits: Arc<Semaphore>) -> Self {
        Self { inner, permits }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for Throttled<B> {
    fn provider_kind(&self) -> &str {
        self.inner.provider_kind()
    }

    async fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        self.inner.chat(request).await
    }
}

#[async_trait]
impl<B: EmbedBackend> EmbedBackend for Throttled<B> {
    fn provider_kind(&self) -> &str {
        self.inner.provider_kind()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        self.inner.embed(texts).await
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str, temp: f64) -> ChatRequest {
        ChatRequest::new(
            "m",
            temp,
            vec![Message::user(vec![ContentPart::Text(text.into())])],
            "tmpl",
        )
        .unwrap()
    }

    #[test]
    fn request_requires_user_message() {
        let sys = Message {
            role: Role::System,
            parts: vec![ContentPart::Text("s".into())],
        };
        assert!(ChatRequest::new("m", 0.2, vec![sys], "t").is_err());
        assert!(ChatRequest::new("m", -0.1, vec![], "t").is_err());
    }

    #[test]
    fn digest_separates_content() {
        assert_eq!(req("a", 0.2).content_digest(), req("a", 0.2).content_digest());
        assert_ne!(req("a", 0.2).content_digest(), req("b", 0.2).content_digest());
        // part boundaries matter
        let two = ChatRequest::new(
            "m",
            0.2,
            vec![Message::user(vec![
                ContentPart::Text("a".into()),
                ContentPart::Text("b".into()),
            ])],
            "tmpl",
        )
        .unwrap();
        assert_ne!(two.content_digest(), req("ab", 0.2).content_digest());
    }

    #[test]
    fn fingerprint_is_deterministic() {
        let a = BackendFingerprint::for_chat("http", &req("x", 0.2));
        let b = BackendFingerprint::for_chat("http", &req("y", 0.2));
        assert_eq!(a.id(), b.id());
        let c = BackendFingerprint::for_chat("http", &req("x", 0.3));
        assert_ne!(a.id(), c.id());
    }

    #[test]
    fn data_url_encoding() {
        let img = ImagePayload {
            media_type: "image/jpeg".into(),
            bytes: b"hi".to_vec(),
        };
        assert_eq!(img.data_url(), "data:image/jpeg;base64,aGk=");
    }
}
