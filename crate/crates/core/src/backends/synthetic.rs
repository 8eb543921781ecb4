//! Deterministic stand-in for the caption and embedding models.
//!
//! Frames inside a planted span are captioned with the plan's query phrase;
//! frames outside get a distractor sentence drawn from a disjoint
//! vocabulary. Embeddings are hashed bag-of-words vectors, so cosine
//! similarity tracks token overlap. Together this gives a pipeline run a
//! known right answer without any model.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_embed_input, ChatBackend, ChatRequest, EmbedBackend, ImagePayload};
use crate::debias;
use crate::error::BackendError;
use crate::model::{Embedding, Span};

pub const DEFAULT_DIM: usize = 256;

/// Media type of the inline frame tokens used for synthetic videos.
pub const SYNTHETIC_MEDIA_TYPE: &str = "image/x-synthetic";

pub(crate) const SUBJECTS: &[&str] = &[
    "person", "woman", "man", "child", "chef", "student", "worker", "dancer",
];
pub(crate) const VERBS: &[&str] = &[
    "opens", "closes", "washes", "holds", "throws", "carries", "cleans", "paints", "folds", "reads",
];
pub(crate) const OBJECTS: &[&str] = &[
    "door", "window", "dishes", "laptop", "book", "blanket", "bottle", "guitar", "basket", "towel",
];

// Four tokens each, so every in-span caption has the same length.
const FILLERS: &[&str] = &[
    "in a bright kitchen",
    "near a wooden table",
    "beside a tall lamp",
    "under a soft light",
    "inside a small room",
];

// No token here appears in SUBJECTS, VERBS, OBJECTS or FILLERS.
const DISTRACTORS: &[&str] = &[
    "empty hallway with gray walls",
    "parked car outside on quiet street",
    "cluttered shelf full of old boxes",
    "green plant sitting on windowsill",
    "dark screen showing static noise",
    "blurry ceiling fan spinning slowly",
    "stack of newspapers on carpet",
];

/// What a synthetic video contains: where the query phrase is visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPlan {
    pub video_id: String,
    pub fps: f64,
    pub n_frames: usize,
    pub spans: Vec<Span>,
    pub phrase: String,
}

impl VideoPlan {
    pub fn frame_in_span(&self, frame: usize) -> bool {
        let t = frame as f64 / self.fps;
        self.spans.iter().any(|s| s.start() <= t && t < s.end())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPlan {
    pub videos: BTreeMap<String, VideoPlan>,
}

/// The frame token carried in place of image bytes.
pub fn frame_token(video_id: &str, frame: usize) -> String {
    format!("synthetic:{video_id}:{frame}")
}

fn parse_frame_token(img: &ImagePayload) -> Result<(String, usize), BackendError> {
    let bad = || BackendError::InvalidRequest("image is not a synthetic frame token".into());
    let text = std::str::from_utf8(&img.bytes).map_err(|_| bad())?;
    let rest = text.strip_prefix("synthetic:").ok_or_else(bad)?;
    let (vid, idx) = rest.rsplit_once(':').ok_or_else(bad)?;
    let idx = idx.parse().map_err(|_| bad())?;
    Ok((vid.to_string(), idx))
}

fn stable_index(key: &str, modulo: usize) -> usize {
    let digest = Sha256::digest(key.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(b) % modulo as u64) as usize
}

/// Caption for one frame of a planted video.
pub fn synthetic_caption(frame: usize, plan: &VideoPlan) -> Result<String, BackendError> {
    if frame >= plan.n_frames {
        return Err(BackendError::InvalidRequest(format!(
            "frame {frame} out of range for {} ({} frames)",
            plan.video_id, plan.n_frames
        )));
    }
    if plan.frame_in_span(frame) {
        let filler = FILLERS[frame % FILLERS.len()];
        Ok(format!("{} {filler}", plan.phrase))
    } else {
        let pick = stable_index(&format!("{}:{frame}", plan.video_id), DISTRACTORS.len());
        Ok(DISTRACTORS[pick].to_string())
    }
}

/// Rewrites the synthetic debias model returns for `query`.
pub fn synthetic_rewrites(query: &str, count: usize) -> Vec<String> {
    const PREFIXES: &[&str] = &["", "a clip where ", "footage showing ", "a scene in which ", "video of "];
    (0..count)
        .map(|i| match PREFIXES.get(i) {
            Some(p) => format!("{p}{query}"),
            None => format!("{query} variant {i}"),
        })
        .collect()
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed bag-of-words embedding, L2-normalized.
pub fn hashed_embedding(text: &str, dim: usize) -> Result<Embedding, BackendError> {
    let mut v = vec![0.0; dim];
    for tok in tokenize(text) {
        v[stable_index(&tok, dim)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(BackendError::InvalidRequest(format!(
            "text {text:?} has no tokens to embed"
        )));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(Embedding::new(v)?)
}

/// Deterministic oracle backend with call counters.
pub struct SyntheticBackend {
    plan: Arc<SyntheticPlan>,
    canned: Option<String>,
    dim: usize,
    model: String,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

impl SyntheticBackend {
    pub fn new(plan: Arc<SyntheticPlan>) -> Self {
        Self {
            plan,
            canned: None,
            dim: DEFAULT_DIM,
            model: "synthetic-bow".into(),
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
        }
    }

    /// A backend that answers every chat request with `reply`.
    pub fn canned(reply: impl Into<String>) -> Self {
        let mut b = Self::new(Arc::default());
        b.canned = Some(reply.into());
        b
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        self.dim = dim;
        self
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.chat_calls() + self.embed_calls()
    }

    fn video(&self, id: &str) -> Result<&VideoPlan, BackendError> {
        self.plan
            .videos
            .get(id)
            .ok_or_else(|| BackendError::InvalidRequest(format!("no plan for video {id}")))
    }

    fn answer(&self, request: &ChatRequest) -> Result<String, BackendError> {
        if let Some(reply) = &self.canned {
            return Ok(reply.clone());
        }
        let text = request.user_text();
        let images: Vec<_> = request.images().collect();
        if images.is_empty() {
            let query = debias::extract_raw_query(&text).ok_or_else(|| {
                BackendError::InvalidRequest("synthetic backend got an unrecognized text prompt".into())
            })?;
            let count = debias::extract_rewrite_count(&text).unwrap_or(3);
            let lines = synthetic_rewrites(&query, count)
                .into_iter()
                .enumerate()
                .map(|(i, r)| format!("{}. {r}", i + 1))
                .collect::<Vec<_>>();
            return Ok(lines.join("\n"));
        }
        let mut captions = Vec::with_capacity(images.len());
        for img in images {
            let (vid, frame) = parse_frame_token(img)?;
            captions.push(synthetic_caption(frame, self.video(&vid)?)?);
        }
        Ok(captions.join(". "))
    }
}

#[async_trait]
impl ChatBackend for SyntheticBackend {
    fn provider_kind(&self) -> &str {
        "synthetic"
    }

    async fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.answer(request)
    }
}

#[async_trait]
impl EmbedBackend for SyntheticBackend {
    fn provider_kind(&self) -> &str {
        "synthetic"
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        check_embed_input(texts)?;
        texts.iter().map(|t| hashed_embedding(t, self.dim)).collect()
    }
}
