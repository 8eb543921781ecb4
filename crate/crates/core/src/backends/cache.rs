//! Content-addressed disk cache for chat and embedding responses.
//!
//! One JSON file per entry, named by the hex SHA-256 of the fingerprint and
//! request content. Entries are written to a temp file in the same directory
//! and renamed into place, so readers never observe a partial write.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;

use super::{check_embed_input, check_uniform_dim, BackendFingerprint, ChatBackend, ChatRequest, EmbedBackend};
use crate::error::BackendError;
use crate::model::Embedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CacheValue {
    Text(String),
    Embedding(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub fingerprint: BackendFingerprint,
    pub value: CacheValue,
    /// Unix seconds.
    pub created_at: u64,
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let root = root.into();
        std::fs::create_dir_all(&root)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(fingerprint: &BackendFingerprint, content: &str) -> String {
        let mut h = Sha256::new();
        h.update(fingerprint.id().as_bytes());
        h.update(b"\0");
        h.update(content.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.json"))
    }

    /// Returns the entry for `key`; unreadable or mismatched files count as misses.
    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        (entry.key == key).then_some(entry)
    }

    /// Writes `value` unless an entry already exists; existing values are
    /// never replaced.
    pub fn put(
        &self,
        key: &str,
        fingerprint: &BackendFingerprint,
        value: CacheValue,
    ) -> Result<(), BackendError> {
        let final_path = self.path(key);
        if final_path.exists() {
            return Ok(());
        }
        let entry = CacheEntry {
            key: key.to_string(),
            fingerprint: fingerprint.clone(),
            value,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let err = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", final_path.display()));
        let mut tmp = tempfile::Builder::new()
            .prefix(".tmp-")
            .suffix(".json")
            .tempfile_in(&self.root)
            .map_err(err)?;
        serde_json::to_writer(&mut tmp, &entry).map_err(|e| BackendError::Cache(e.to_string()))?;
        tmp.flush().map_err(err)?;
        match tmp.persist_noclobber(&final_path) {
            Ok(_) => Ok(()),
            // lost a race with another writer; the first entry stands
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(()),
            Err(e) => Err(err(e.error)),
        }
    }
}

/// Serves repeated requests from a [`DiskCache`].
pub struct Cached<B> {
    inner: B,
    cache: DiskCache,
}

impl<B> Cached<B> {
    pub fn new(inner: B, cache: DiskCache) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for Cached<B> {
    fn provider_kind(&self) -> &str {
        self.inner.provider_kind()
    }

    async fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let fp = self.inner.fingerprint(request);
        let key = DiskCache::key(&fp, &request.content_digest());
        if let Some(CacheEntry {
            value: CacheValue::Text(text),
            ..
        }) = self.cache.get(&key)
        {
            return Ok(text);
        }
        let text = self.inner.chat(request).await?;
        self.cache.put(&key, &fp, CacheValue::Text(text.clone()))?;
        Ok(text)
    }
}

#[async_trait]
impl<B: EmbedBackend> EmbedBackend for Cached<B> {
    fn provider_kind(&self) -> &str {
        self.inner.provider_kind()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        check_embed_input(texts)?;
        let fp = self.inner.fingerprint();
        let keys: Vec<String> = texts.iter().map(|t| DiskCache::key(&fp, t)).collect();
        let mut out: Vec<Option<Embedding>> = keys
            .iter()
            .map(|k| match self.cache.get(k) {
                Some(CacheEntry {
                    value: CacheValue::Embedding(v),
                    ..
                }) => Embedding::new(v).ok(),
                _ => None,
            })
            .collect();

        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed(&batch).await?;
            if fresh.len() != batch.len() {
                return Err(BackendError::Malformed {
                    reason: format!("asked for {} embeddings, got {}", batch.len(), fresh.len()),
                    excerpt: String::new(),
                });
            }
            for (&i, emb) in missing.iter().zip(fresh) {
                self.cache
                    .put(&keys[i], &fp, CacheValue::Embedding(emb.values().to_vec()))?;
                out[i] = Some(emb);
            }
        }
        let out: Vec<Embedding> = out.into_iter().flatten().collect();
        check_uniform_dim(&out)?;
        Ok(out)
    }
}
