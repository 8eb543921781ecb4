//! End-to-end orchestration: configuration, backend wiring, JSONL
//! artifacts and the subcommands built on them.
//!
//! Output directory layout:
//!
//! ```text
//! debiased_nd{N}.jsonl    one DebiasedQuerySet per query (resumable)
//! frame_captions.jsonl    one {video_id, captions} record per video (resumable)
//! predictions.jsonl       one {qid, spans: [[start, end, score], ...]} per query
//! candidates.jsonl        one {qid, spans: [[start, end], ...]} per query
//! saliency.jsonl          one {qid, saliency: [...]} per query (optional)
//! failures.jsonl          one {qid, stage, error} per failed query
//! manifest-{command}.json config hash, dataset hash, backend fingerprints
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::{OnceCell, Semaphore};

use crate::backends::cache::{Cached, DiskCache};
use crate::backends::http::{HttpBackend, RetryPolicy};
use crate::backends::synthetic::SyntheticBackend;
use crate::backends::{ChatBackend, EmbedBackend, Throttled};
use crate::captioner::{caption_frames, caption_span, DefaultFrameSource, FrameSource, StageModel};
use crate::datasets::{build_video, dataset_hash, load_dataset, Dataset, ParseMode};
use crate::debias::{build_debias_prompt, parse_debias_response, DEBIAS_TEMPLATE};
use crate::error::{BackendError, Error, LineError};
use crate::metrics::{oracle_bound, EvalReport, QueryEval, RankedSpan, R1_THRESHOLDS};
use crate::model::{Caption, DatasetKind, DebiasedQuerySet, Embedding, PipelineConfig, Span, VideoRecord};
use crate::scoring::{frame_scores, saliency_track};
use crate::selection::select;
use crate::span_gen::{generate, SpanGenParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub annotations: PathBuf,
    /// Directory holding `<video_id>/<index>.jpg` frame files.
    pub frames_root: Option<PathBuf>,
    pub parse_mode: ParseMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            annotations: PathBuf::from("synthetic.json"),
            frames_root: None,
            parse_mode: ParseMode::Strict,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Base URL of an OpenAI-compatible server.
    pub base_url: String,
    /// Per-stage overrides of `base_url`.
    pub debias_url: Option<String>,
    pub frame_caption_url: Option<String>,
    pub span_caption_url: Option<String>,
    pub embed_url: Option<String>,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    /// Maximum requests in flight across all stages.
    pub concurrency: usize,
    pub max_attempts: u32,
    pub cache_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            base_url: "http://127.0.0.1:8000".into(),
            debias_url: None,
            frame_caption_url: None,
            span_caption_url: None,
            embed_url: None,
            api_key_env: Some("VMR_API_KEY".into()),
            concurrency: 8,
            max_attempts: 3,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelNames {
    pub debias: String,
    pub frame_caption: String,
    pub span_caption: String,
    pub embed: String,
}

impl Default for ModelNames {
    fn default() -> Self {
        Self {
            debias: "llama-3-8b-instruct".into(),
            frame_caption: "minigpt-v2".into(),
            span_caption: "video-llava".into(),
            embed: "text-embedding".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub save_saliency: bool,
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
    pub models: ModelNames,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            save_saliency: true,
            dataset: DatasetConfig::default(),
            backend: BackendConfig::default(),
            models: ModelNames::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document and applies `key=value` overrides (dotted
    /// keys, TOML values; bare words are taken as strings).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, Error> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.pipeline.validate()?;
        if self.backend.concurrency == 0 {
            return Err(Error::Config("backend.concurrency must be at least 1".into()));
        }
        if self.backend.max_attempts == 0 {
            return Err(Error::Config("backend.max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn fps(&self) -> f64 {
        self.pipeline.fps.for_dataset(self.dataset.kind)
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_toml_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Keeps embeddings in memory so repeated texts within a process are
/// embedded once.
struct MemoEmbed {
    inner: Arc<dyn EmbedBackend>,
    memo: Mutex<HashMap<String, Embedding>>,
}

#[async_trait]
impl EmbedBackend for MemoEmbed {
    fn provider_kind(&self) -> &str {
        self.inner.provider_kind()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let missing: Vec<String> = {
            let memo = self.memo.lock().expect("memo lock");
            let mut seen = BTreeSet::new();
            texts
                .iter()
                .filter(|t| !memo.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing).await?;
            if fresh.len() != missing.len() {
                return Err(BackendError::Malformed {
                    reason: format!("asked for {} embeddings, got {}", missing.len(), fresh.len()),
                    excerpt: String::new(),
                });
            }
            let mut memo = self.memo.lock().expect("memo lock");
            for (t, e) in missing.into_iter().zip(fresh) {
                memo.insert(t, e);
            }
        }
        let memo = self.memo.lock().expect("memo lock");
        Ok(texts.iter().map(|t| memo[t].clone()).collect())
    }
}

/// The four model roles of the pipeline.
#[derive(Clone)]
pub struct Backends {
    pub debias: Arc<dyn ChatBackend>,
    pub frame_caption: Arc<dyn ChatBackend>,
    pub span_caption: Arc<dyn ChatBackend>,
    pub embed: Arc<dyn EmbedBackend>,
}

impl Backends {
    /// Wraps raw backends with the optional disk cache (outermost, so hits
    /// skip the queue) and a shared concurrency limit.
    pub fn assemble(
        debias: Arc<dyn ChatBackend>,
        frame_caption: Arc<dyn ChatBackend>,
        span_caption: Arc<dyn ChatBackend>,
        embed: Arc<dyn EmbedBackend>,
        cache_dir: Option<&Path>,
        concurrency: usize,
    ) -> Result<Self, Error> {
        let permits = Arc::new(Semaphore::new(concurrency.max(1)));
        let cache = cache_dir.map(DiskCache::open).transpose()?;
        let chat = |b: Arc<dyn ChatBackend>| -> Arc<dyn ChatBackend> {
            let throttled = Throttled::new(b, permits.clone());
            match &cache {
                Some(c) => Arc::new(Cached::new(throttled, c.clone())),
                None => Arc::new(throttled),
            }
        };
        let throttled_embed = Throttled::new(embed, permits.clone());
        let embed: Arc<dyn EmbedBackend> = match &cache {
            Some(c) => Arc::new(Cached::new(throttled_embed, c.clone())),
            None => Arc::new(throttled_embed),
        };
        Ok(Self {
            debias: chat(debias),
            frame_caption: chat(frame_caption),
            span_caption: chat(span_caption),
            embed: Arc::new(MemoEmbed {
                inner: embed,
                memo: Mutex::default(),
            }),
        })
    }

    /// One synthetic backend serving every role.
    pub fn synthetic(backend: Arc<SyntheticBackend>, cache_dir: Option<&Path>, concurrency: usize) -> Result<Self, Error> {
        Self::assemble(
            backend.clone(),
            backend.clone(),
            backend.clone(),
            backend,
            cache_dir,
            concurrency,
        )
    }

    pub fn from_config(config: &RunConfig, dataset: &Dataset) -> Result<Self, Error> {
        let b = &config.backend;
        match b.kind {
            BackendKind::Synthetic => {
                let plan = dataset.plan.clone().unwrap_or_default();
                Self::synthetic(
                    Arc::new(SyntheticBackend::new(Arc::new(plan))),
                    b.cache_dir.as_deref(),
                    b.concurrency,
                )
            }
            BackendKind::Http => {
                let make = |url: &Option<String>, model: &str| {
                    Arc::new(
                        HttpBackend::new(url.as_deref().unwrap_or(&b.base_url), model)
                            .with_api_key_env(b.api_key_env.as_deref())
                            .with_retry(RetryPolicy {
                                max_attempts: b.max_attempts,
                                ..RetryPolicy::default()
                            }),
                    )
                };
                Self::assemble(
                    make(&b.debias_url, &config.models.debias),
                    make(&b.frame_caption_url, &config.models.frame_caption),
                    make(&b.span_caption_url, &config.models.span_caption),
                    make(&b.embed_url, &config.models.embed),
                    b.cache_dir.as_deref(),
                    b.concurrency,
                )
            }
        }
    }
}

/// Pipeline stage at which a query failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Debias,
    Frames,
    FrameCaption,
    Retrieve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub qid: String,
    pub stage: Stage,
    pub error: String,
}

/// What a subcommand did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub processed: usize,
    pub skipped_existing: usize,
    pub failures: Vec<QueryFailure>,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qid: String,
    pub spans: Vec<RankedSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub qid: String,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub qid: String,
    pub saliency: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCaptionRecord {
    pub video_id: String,
    pub captions: Vec<Caption>,
}

/// Result of retrieval for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub qid: String,
    pub predictions: Vec<RankedSpan>,
    pub candidates: Vec<Span>,
    pub saliency: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrieveOutput {
    pub results: Vec<QueryResult>,
    pub failures: Vec<QueryFailure>,
}

/// Parses a JSONL document; blank lines are ignored.
pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, LineError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LineError {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Parses a predictions file.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, LineError> {
    parse_jsonl(text)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Error> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_jsonl(&text).map_err(|source| Error::Parse {
            path: path.display().to_string(),
            source,
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn to_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("record serializes");
    s.push('\n');
    s
}

/// Appends one record per call; each record is a single write.
struct JsonlAppender {
    path: PathBuf,
    file: std::fs::File,
}

impl JsonlAppender {
    fn open(path: &Path) -> Result<Self, Error> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    fn push<T: Serialize>(&mut self, value: &T) -> Result<(), Error> {
        self.file
            .write_all(to_line(value).as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes a whole file through a temp file and rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), Error> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), Error> {
    let text: String = records.iter().map(to_line).collect();
    write_atomic(path, text.as_bytes())
}

/// Provenance written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub fingerprints: BTreeMap<String, String>,
    pub config: RunConfig,
}

/// Video id plus the bit patterns of a span's start and end.
type SpanKey = (String, u64, u64);

/// A loaded dataset, its backends and the in-memory memos shared by
/// every command run through it.
pub struct Runner {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub backends: Backends,
    source: Arc<dyn FrameSource>,
    videos: Mutex<HashMap<String, Arc<OnceCell<VideoRecord>>>>,
    frame_captions: Mutex<HashMap<String, Arc<OnceCell<Vec<Caption>>>>>,
    span_captions: Mutex<HashMap<SpanKey, Arc<OnceCell<Caption>>>>,
    debiased: Mutex<HashMap<(usize, String), DebiasedQuerySet>>,
}

fn cell<K: std::hash::Hash + Eq + Clone, V>(map: &Mutex<HashMap<K, Arc<OnceCell<V>>>>, key: &K) -> Arc<OnceCell<V>> {
    map.lock().expect("memo lock").entry(key.clone()).or_default().clone()
}

impl Runner {
    pub fn new(config: RunConfig, dataset: Dataset, backends: Backends) -> Self {
        Self {
            config,
            dataset,
            backends,
            source: Arc::new(DefaultFrameSource),
            videos: Mutex::default(),
            frame_captions: Mutex::default(),
            span_captions: Mutex::default(),
            debiased: Mutex::default(),
        }
    }

    /// Loads the configured dataset and builds backends from the config.
    pub fn from_config(config: RunConfig) -> Result<Self, Error> {
        let dataset = load_dataset(config.dataset.kind, &config.dataset.annotations, config.dataset.parse_mode)?;
        for s in &dataset.skipped {
            tracing::warn!(line = s.line, "skipped record: {}", s.message);
        }
        let backends = Backends::from_config(&config, &dataset)?;
        Ok(Self::new(config, dataset, backends))
    }

    pub fn with_frame_source(mut self, source: Arc<dyn FrameSource>) -> Self {
        self.source = source;
        self
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn ensure_output_dir(&self) -> Result<(), Error> {
        std::fs::create_dir_all(&self.config.output_dir).map_err(|e| Error::io(&self.config.output_dir, e))
    }

    fn stage(&self, model: &str, temperature: f64) -> StageModel {
        StageModel::new(model, temperature)
    }

    fn debias_stage(&self) -> StageModel {
        self.stage(&self.config.models.debias, self.config.pipeline.temperatures.debias)
    }

    fn frame_stage(&self) -> StageModel {
        self.stage(&self.config.models.frame_caption, self.config.pipeline.temperatures.frame_caption)
    }

    fn span_stage(&self) -> StageModel {
        self.stage(&self.config.models.span_caption, self.config.pipeline.temperatures.span_caption)
    }

    fn concurrency(&self) -> usize {
        self.config.backend.concurrency.max(1)
    }

    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        let t = &self.config.pipeline.temperatures;
        let fp = |kind: &str, model: &str, template: &str, temp: f64| {
            crate::backends::BackendFingerprint {
                provider_kind: kind.to_string(),
                model_name: model.to_string(),
                prompt_hash: sha256_hex(template.as_bytes()),
                temperature: temp,
            }
            .id()
        };
        let m = &self.config.models;
        BTreeMap::from([
            ("debias".into(), fp(self.backends.debias.provider_kind(), &m.debias, DEBIAS_TEMPLATE, t.debias)),
            (
                "frame_caption".into(),
                fp(
                    self.backends.frame_caption.provider_kind(),
                    &m.frame_caption,
                    crate::captioner::IMAGE_CAPTION_PROMPT,
                    t.frame_caption,
                ),
            ),
            (
                "span_caption".into(),
                fp(
                    self.backends.span_caption.provider_kind(),
                    &m.span_caption,
                    crate::captioner::VIDEO_CAPTION_PROMPT,
                    t.span_caption,
                ),
            ),
            ("embed".into(), self.backends.embed.fingerprint().id()),
        ])
    }

    fn write_manifest(&self, command: &str) -> Result<(), Error> {
        let dataset_hash = dataset_hash(&self.config.dataset.annotations).ok();
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: self.config.hash(),
            dataset_hash,
            fingerprints: self.fingerprints(),
            config: self.config.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.out(&format!("manifest-{command}.json")), text.as_bytes())
    }

    /// Debiased rewrites for every query at `n_d`, reading and extending
    /// `debiased_nd{n_d}.jsonl` when `persist` is set.
    pub async fn ensure_debiased(&self, n_d: usize, persist: bool) -> Result<RunSummary, Error> {
        let path = self.out(&format!("debiased_nd{n_d}.jsonl"));
        let mut summary = RunSummary::default();
        if persist {
            for set in read_jsonl::<DebiasedQuerySet>(&path)? {
                self.debiased
                    .lock()
                    .expect("memo lock")
                    .insert((n_d, set.qid().to_string()), set);
            }
        }
        let known: BTreeSet<String> = {
            let memo = self.debiased.lock().expect("memo lock");
            self.dataset
                .queries
                .iter()
                .filter(|q| memo.contains_key(&(n_d, q.qid().to_string())))
                .map(|q| q.qid().to_string())
                .collect()
        };
        summary.skipped_existing = known.len();
        let todo: Vec<_> = self
            .dataset
            .queries
            .iter()
            .filter(|q| !known.contains(q.qid()))
            .collect();
        let mut appender = if persist && !todo.is_empty() {
            Some(JsonlAppender::open(&path)?)
        } else {
            None
        };
        let stage = self.debias_stage();
        let stage = &stage;
        let mut results = stream::iter(todo)
            .map(|q| async move {
                let result = async {
                    let req = build_debias_prompt(q.raw_text(), n_d, &stage.model_name, stage.temperature)?;
                    let reply = self.backends.debias.chat(&req).await?;
                    Ok::<_, BackendError>(parse_debias_response(&reply, n_d, q.qid(), q.raw_text())?)
                }
                .await;
                result.map_err(|e| (q.qid().to_string(), e))
            })
            .buffered(self.concurrency());
        while let Some(r) = results.next().await {
            match r {
                Ok(set) => {
                    if let Some(a) = appender.as_mut() {
                        a.push(&set)?;
                    }
                    summary.processed += 1;
                    self.debiased
                        .lock()
                        .expect("memo lock")
                        .insert((n_d, set.qid().to_string()), set);
                }
                Err((qid, e)) => summary.failures.push(QueryFailure {
                    qid,
                    stage: Stage::Debias,
                    error: e.to_string(),
                }),
            }
        }
        Ok(summary)
    }

    fn debiased_for(&self, n_d: usize, qid: &str) -> Option<DebiasedQuerySet> {
        self.debiased
            .lock()
            .expect("memo lock")
            .get(&(n_d, qid.to_string()))
            .cloned()
    }

    async fn video(&self, video_id: &str) -> Result<VideoRecord, Error> {
        let cell = cell(&self.videos, &video_id.to_string());
        cell.get_or_try_init(|| async {
            let meta = self
                .dataset
                .videos
                .get(video_id)
                .ok_or_else(|| Error::Other(format!("unknown video {video_id}")))?;
            build_video(
                meta,
                self.config.fps(),
                self.config.dataset.frames_root.as_deref(),
                self.dataset.plan.as_ref(),
            )
        })
        .await
        .cloned()
    }

    async fn frame_captions_for(&self, video: &VideoRecord) -> Result<Vec<Caption>, BackendError> {
        let cell = cell(&self.frame_captions, &video.video_id().to_string());
        let stage = self.frame_stage();
        cell.get_or_try_init(|| caption_frames(video, self.source.as_ref(), &self.backends.frame_caption, &stage))
            .await
            .cloned()
    }

    /// Frame captions for every video with a query, reading and extending
    /// `frame_captions.jsonl` when `persist` is set.
    pub async fn ensure_frame_captions(&self, persist: bool) -> Result<RunSummary, Error> {
        let path = self.out("frame_captions.jsonl");
        let mut summary = RunSummary::default();
        let mut have: BTreeSet<String> = BTreeSet::new();
        if persist {
            for rec in read_jsonl::<FrameCaptionRecord>(&path)? {
                let c = cell(&self.frame_captions, &rec.video_id);
                let _ = c.set(rec.captions);
                have.insert(rec.video_id);
            }
        }
        let mut video_ids: Vec<&str> = Vec::new();
        let mut seen = BTreeSet::new();
        for q in &self.dataset.queries {
            if seen.insert(q.video_id()) {
                video_ids.push(q.video_id());
            }
        }
        summary.skipped_existing = video_ids.iter().filter(|v| have.contains(**v)).count();
        let todo: Vec<&str> = video_ids.into_iter().filter(|v| !have.contains(*v)).collect();
        let mut appender = if persist && !todo.is_empty() {
            Some(JsonlAppender::open(&path)?)
        } else {
            None
        };
        let mut results = stream::iter(todo)
            .map(|vid| async move {
                let result = async {
                    let video = self.video(vid).await.map_err(|e| (Stage::Frames, e.to_string()))?;
                    self.frame_captions_for(&video)
                        .await
                        .map_err(|e| (Stage::FrameCaption, e.to_string()))
                }
                .await;
                (vid, result)
            })
            .buffered(self.concurrency());
        let mut failed_videos: BTreeMap<&str, (Stage, String)> = BTreeMap::new();
        while let Some((vid, r)) = results.next().await {
            match r {
                Ok(captions) => {
                    if let Some(a) = appender.as_mut() {
                        a.push(&FrameCaptionRecord {
                            video_id: vid.to_string(),
                            captions,
                        })?;
                    }
                    summary.processed += 1;
                }
                Err(e) => {
                    failed_videos.insert(vid, e);
                }
            }
        }
        for q in &self.dataset.queries {
            if let Some((stage, error)) = failed_videos.get(q.video_id()) {
                summary.failures.push(QueryFailure {
                    qid: q.qid().to_string(),
                    stage: *stage,
                    error: error.clone(),
                });
            }
        }
        Ok(summary)
    }

    async fn span_caption_for(&self, video: &VideoRecord, span: &Span, span_id: usize) -> Result<Caption, BackendError> {
        let key = (video.video_id().to_string(), span.start().to_bits(), span.end().to_bits());
        let cell = cell(&self.span_captions, &key);
        let stage = self.span_stage();
        cell.get_or_try_init(|| {
            caption_span(
                video,
                span,
                span_id,
                self.config.pipeline.max_span_frames,
                self.source.as_ref(),
                &self.backends.span_caption,
                &stage,
            )
        })
        .await
        .cloned()
    }

    async fn retrieve_query(
        &self,
        qid: &str,
        video_id: &str,
        pipeline: &PipelineConfig,
    ) -> Result<QueryResult, (Stage, String)> {
        let debiased = self
            .debiased_for(pipeline.n_d, qid)
            .ok_or((Stage::Debias, "no debiased rewrites".to_string()))?;
        let video = self.video(video_id).await.map_err(|e| (Stage::Frames, e.to_string()))?;
        let frame_caps = self
            .frame_captions_for(&video)
            .await
            .map_err(|e| (Stage::FrameCaption, e.to_string()))?;
        let fail = |e: BackendError| (Stage::Retrieve, e.to_string());
        let scores = frame_scores(&debiased, &frame_caps, &self.backends.embed)
            .await
            .map_err(fail)?;
        let params = SpanGenParams {
            eta: pipeline.eta,
            kappa: pipeline.kappa,
            tau: pipeline.tau,
            fps: video.fps(),
        };
        let candidates = generate(&scores, &params, video.duration_s()).map_err(|e| fail(e.into()))?;
        let captions = futures::future::try_join_all(
            candidates
                .iter()
                .enumerate()
                .map(|(i, c)| self.span_caption_for(&video, &c.span, i)),
        )
        .await
        .map_err(fail)?;
        let ranked = select(
            &candidates,
            &captions,
            &debiased,
            &self.backends.embed,
            pipeline.lambda,
            pipeline.sigma,
            video.duration_s(),
        )
        .await
        .map_err(fail)?;
        Ok(QueryResult {
            qid: qid.to_string(),
            predictions: ranked
                .iter()
                .map(|s| RankedSpan {
                    span: s.span(),
                    score: s.score(),
                })
                .collect(),
            candidates: candidates.iter().map(|c| c.span).collect(),
            saliency: saliency_track(&scores),
        })
    }

    /// Runs retrieval for every query with `pipeline`; debiased rewrites
    /// must already be available for `pipeline.n_d`.
    pub async fn retrieve(&self, pipeline: &PipelineConfig) -> RetrieveOutput {
        let mut out = RetrieveOutput::default();
        let mut results = stream::iter(&self.dataset.queries)
            .map(|q| async move {
                (
                    q.qid(),
                    self.retrieve_query(q.qid(), q.video_id(), pipeline).await,
                )
            })
            .buffered(self.concurrency());
        while let Some((qid, r)) = results.next().await {
            match r {
                Ok(res) => out.results.push(res),
                Err((stage, error)) => {
                    tracing::warn!(qid, ?stage, %error, "query failed");
                    out.failures.push(QueryFailure {
                        qid: qid.to_string(),
                        stage,
                        error,
                    });
                }
            }
        }
        out
    }

    /// `debias` subcommand.
    pub async fn cmd_debias(&self) -> Result<RunSummary, Error> {
        self.ensure_output_dir()?;
        let summary = self.ensure_debiased(self.config.pipeline.n_d, true).await?;
        self.write_manifest("debias")?;
        Ok(summary)
    }

    /// `caption` subcommand: frame captions for every video.
    pub async fn cmd_caption(&self) -> Result<RunSummary, Error> {
        self.ensure_output_dir()?;
        let summary = self.ensure_frame_captions(true).await?;
        self.write_manifest("caption")?;
        Ok(summary)
    }

    /// `retrieve` subcommand. Every query gets a prediction line; failed
    /// queries get an empty span list and a `failures.jsonl` entry.
    pub async fn cmd_retrieve(&self) -> Result<RunSummary, Error> {
        self.ensure_output_dir()?;
        let pipeline = self.config.pipeline;
        let mut summary = self.ensure_debiased(pipeline.n_d, true).await?;
        let captions = self.ensure_frame_captions(true).await?;
        summary.failures.extend(captions.failures);
        let output = self.retrieve(&pipeline).await;
        let by_qid: HashMap<&str, &QueryResult> = output.results.iter().map(|r| (r.qid.as_str(), r)).collect();
        let mut preds = Vec::with_capacity(self.dataset.queries.len());
        let mut cands = Vec::new();
        let mut saliency = Vec::new();
        for q in &self.dataset.queries {
            match by_qid.get(q.qid()) {
                Some(r) => {
                    preds.push(PredictionRecord {
                        qid: r.qid.clone(),
                        spans: r.predictions.clone(),
                    });
                    cands.push(CandidateRecord {
                        qid: r.qid.clone(),
                        spans: r.candidates.clone(),
                    });
                    saliency.push(SaliencyRecord {
                        qid: r.qid.clone(),
                        saliency: r.saliency.clone(),
                    });
                }
                None => preds.push(PredictionRecord {
                    qid: q.qid().to_string(),
                    spans: Vec::new(),
                }),
            }
        }
        write_jsonl(&self.out("predictions.jsonl"), &preds)?;
        write_jsonl(&self.out("candidates.jsonl"), &cands)?;
        if self.config.save_saliency {
            write_jsonl(&self.out("saliency.jsonl"), &saliency)?;
        }
        let mut failures = summary.failures.clone();
        failures.extend(output.failures);
        let mut seen = BTreeSet::new();
        failures.retain(|f| seen.insert(f.qid.clone()));
        write_jsonl(&self.out("failures.jsonl"), &failures)?;
        self.write_manifest("retrieve")?;
        Ok(RunSummary {
            processed: output.results.len(),
            skipped_existing: 0,
            failures,
        })
    }

    /// `sweep` subcommand: every combination of the grid, reusing captions
    /// and embeddings across points.
    pub async fn cmd_sweep(&self, grid: &SweepGrid) -> Result<Vec<SweepRow>, Error> {
        self.ensure_output_dir()?;
        let base = self.config.pipeline;
        let points = grid.points(&base);
        self.ensure_frame_captions(true).await?;
        let mut rows = Vec::with_capacity(points.len());
        for p in points {
            let debias = self.ensure_debiased(p.n_d, true).await?;
            let output = self.retrieve(&p).await;
            let evals = evals_from_results(&self.dataset, &output.results)?;
            let report = EvalReport::compute(&evals, &R1_THRESHOLDS)?;
            rows.push(SweepRow {
                n_d: p.n_d,
                kappa: p.kappa,
                tau: p.tau,
                lambda: p.lambda,
                sigma: p.sigma,
                failures: debias.failures.len() + output.failures.len(),
                report,
            });
        }
        write_jsonl(&self.out("sweep.jsonl"), &rows)?;
        write_atomic(&self.out("sweep.txt"), sweep_table(&rows).as_bytes())?;
        self.write_manifest("sweep")?;
        Ok(rows)
    }
}

/// Evaluation inputs from in-memory retrieval results; queries without a
/// result count as having no predictions.
pub fn evals_from_results(dataset: &Dataset, results: &[QueryResult]) -> Result<Vec<QueryEval>, Error> {
    let preds: BTreeMap<String, Vec<RankedSpan>> =
        results.iter().map(|r| (r.qid.clone(), r.predictions.clone())).collect();
    let sal: BTreeMap<String, Vec<f64>> = results.iter().map(|r| (r.qid.clone(), r.saliency.clone())).collect();
    let mut evals = Vec::with_capacity(dataset.queries.len());
    for q in &dataset.queries {
        evals.push(query_eval(q, preds.get(q.qid()).cloned().unwrap_or_default(), sal.get(q.qid())));
    }
    Ok(evals)
}

fn query_eval(q: &crate::model::QueryRecord, predictions: Vec<RankedSpan>, saliency: Option<&Vec<f64>>) -> QueryEval {
    let saliency = match (saliency, q.gt_saliency()) {
        (Some(p), Some(g)) if !p.is_empty() => Some((p.clone(), g.dense_max(p.len()))),
        _ => None,
    };
    QueryEval {
        qid: q.qid().to_string(),
        predictions,
        gt_spans: q.gt_spans().to_vec(),
        saliency,
    }
}

/// Pairs predictions with dataset queries; any qid present on one side
/// only is an error listing the offenders.
pub fn join_predictions(
    dataset: &Dataset,
    predictions: Vec<PredictionRecord>,
    saliency: Vec<SaliencyRecord>,
) -> Result<Vec<QueryEval>, Error> {
    let mut preds: BTreeMap<String, Vec<RankedSpan>> = BTreeMap::new();
    let mut dupes = Vec::new();
    for p in predictions {
        if preds.insert(p.qid.clone(), p.spans).is_some() {
            dupes.push(p.qid);
        }
    }
    let known: BTreeSet<&str> = dataset.queries.iter().map(|q| q.qid()).collect();
    let missing: Vec<&str> = known.iter().filter(|q| !preds.contains_key(**q)).copied().collect();
    let extra: Vec<&str> = preds.keys().map(String::as_str).filter(|q| !known.contains(q)).collect();
    if !missing.is_empty() || !extra.is_empty() || !dupes.is_empty() {
        let list = |v: &[&str]| {
            let shown: Vec<&str> = v.iter().take(20).copied().collect();
            let more = v.len().saturating_sub(shown.len());
            if more > 0 {
                format!("[{}, ... {more} more]", shown.join(", "))
            } else {
                format!("[{}]", shown.join(", "))
            }
        };
        let dupes: Vec<&str> = dupes.iter().map(String::as_str).collect();
        return Err(Error::QidMismatch(format!(
            "missing predictions for {} {}; unknown qids {} {}; duplicated {} {}",
            missing.len(),
            list(&missing),
            extra.len(),
            list(&extra),
            dupes.len(),
            list(&dupes),
        )));
    }
    let sal: BTreeMap<String, Vec<f64>> = saliency.into_iter().map(|s| (s.qid, s.saliency)).collect();
    Ok(dataset
        .queries
        .iter()
        .map(|q| query_eval(q, preds.remove(q.qid()).unwrap_or_default(), sal.get(q.qid())))
        .collect())
}

/// `evaluate` subcommand: reads `predictions.jsonl` (and, when present,
/// `saliency.jsonl`, `candidates.jsonl` and the debiased rewrites for the
/// configured `n_d`) from the output directory.
pub fn cmd_evaluate(config: &RunConfig, dataset: &Dataset, predictions_path: Option<&Path>) -> Result<EvalReport, Error> {
    let dir = &config.output_dir;
    let pred_path = predictions_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("predictions.jsonl"));
    if !pred_path.exists() {
        return Err(Error::io(&pred_path, std::io::ErrorKind::NotFound.into()));
    }
    let predictions: Vec<PredictionRecord> = read_jsonl(&pred_path)?;
    let saliency: Vec<SaliencyRecord> = read_jsonl(&dir.join("saliency.jsonl"))?;
    let evals = join_predictions(dataset, predictions, saliency)?;

    let debiased: BTreeMap<String, DebiasedQuerySet> =
        read_jsonl::<DebiasedQuerySet>(&dir.join(format!("debiased_nd{}.jsonl", config.pipeline.n_d)))?
            .into_iter()
            .map(|d| (d.qid().to_string(), d))
            .collect();
    let pairs: Vec<(&str, Option<&str>)> = dataset
        .queries
        .iter()
        .map(|q| {
            (
                q.raw_text(),
                debiased.get(q.qid()).map(|d| d.rewrites()[0].as_str()),
            )
        })
        .collect();
    let categories = crate::metrics::categorize_queries(&pairs);
    let mut report =
        EvalReport::compute(&evals, &R1_THRESHOLDS)?.with_categories(&evals, &categories, &R1_THRESHOLDS)?;

    let candidates: BTreeMap<String, Vec<Span>> = read_jsonl::<CandidateRecord>(&dir.join("candidates.jsonl"))?
        .into_iter()
        .map(|c| (c.qid, c.spans))
        .collect();
    if !candidates.is_empty() {
        let sets: Vec<(Vec<Span>, Vec<Span>)> = dataset
            .queries
            .iter()
            .filter(|q| !q.gt_spans().is_empty())
            .map(|q| (candidates.get(q.qid()).cloned().unwrap_or_default(), q.gt_spans().to_vec()))
            .collect();
        report.oracle = Some(oracle_bound(&sets, &R1_THRESHOLDS));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_atomic(&dir.join("report.json"), json.as_bytes())?;
    write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())?;
    let manifest = RunManifest {
        command: "evaluate".into(),
        config_hash: config.hash(),
        dataset_hash: dataset_hash(&config.dataset.annotations).ok(),
        fingerprints: BTreeMap::new(),
        config: config.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&dir.join("manifest-evaluate.json"), text.as_bytes())?;
    Ok(report)
}

/// Values to sweep; an empty list keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub n_d: Vec<usize>,
    pub kappa: Vec<usize>,
    pub tau: Vec<usize>,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SweepGrid {
    /// The cross product, in lexicographic grid order.
    pub fn points(&self, base: &PipelineConfig) -> Vec<PipelineConfig> {
        fn or<T: Copy>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for n_d in or(&self.n_d, base.n_d) {
            for kappa in or(&self.kappa, base.kappa) {
                for tau in or(&self.tau, base.tau) {
                    for lambda in or(&self.lambda, base.lambda) {
                        for sigma in or(&self.sigma, base.sigma) {
                            out.push(PipelineConfig {
                                n_d,
                                kappa,
                                tau,
                                lambda,
                                sigma,
                                ..*base
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_d: usize,
    pub kappa: usize,
    pub tau: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub failures: usize,
    pub report: EvalReport,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from(" n_d  kappa  tau  lambda  sigma   R1@0.3   R1@0.5   R1@0.7     mIoU  mAP@avg\n");
    for r in rows {
        let g = |k: &str| r.report.r1.get(k).copied().unwrap_or(0.0) * 100.0;
        out.push_str(&format!(
            "{:>4}  {:>5}  {:>3}  {:>6.2}  {:>5.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}\n",
            r.n_d,
            r.kappa,
            r.tau,
            r.lambda,
            r.sigma,
            g("0.30"),
            g("0.50"),
            g("0.70"),
            r.report.miou * 100.0,
            r.report.map_avg * 100.0
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let c = RunConfig::from_toml(
            "[pipeline]\nkappa = 9\n",
            &["pipeline.kappa=4".into(), "pipeline.lambda=0.5".into(), "models.embed=bge".into()],
        )
        .unwrap();
        assert_eq!(c.pipeline.kappa, 4);
        assert_eq!(c.pipeline.lambda, 0.5);
        assert_eq!(c.models.embed, "bge");
        assert_eq!(c.pipeline.tau, 5);
    }

    #[test]
    fn file_beats_defaults() {
        let c = RunConfig::from_toml("[pipeline]\nsigma = 0.7\n[backend]\nkind = \"http\"\n", &[]).unwrap();
        assert_eq!(c.pipeline.sigma, 0.7);
        assert_eq!(c.backend.kind, BackendKind::Http);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(RunConfig::from_toml("[pipeline]\nunknown = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["pipeline.lambda=2.0".into()]).is_err());
        assert!(RunConfig::from_toml("", &["nonsense".into()]).is_err());
        assert!(RunConfig::from_toml("", &["pipeline.kappa=many".into()]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.dataset.frames_root = Some("frames".into());
        c.backend.cache_dir = Some("cache".into());
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn grid_cross_product() {
        let g = SweepGrid {
            kappa: vec![5, 7],
            lambda: vec![0.0, 0.2, 0.4],
            ..SweepGrid::default()
        };
        let pts = g.points(&PipelineConfig::default());
        assert_eq!(pts.len(), 6);
        assert_eq!((pts[0].kappa, pts[0].lambda), (5, 0.0));
        assert_eq!((pts[5].kappa, pts[5].lambda), (7, 0.4));
        assert!(pts.iter().all(|p| p.n_d == 3 && p.tau == 5));
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let err = parse_predictions("{\"qid\":\"a\",\"spans\":[]}\n\n{oops}\n").unwrap_err();
        assert_eq!(err.line, 3);
        let ok = parse_predictions("{\"qid\":\"a\",\"spans\":[[0,1,0.5]]}\n").unwrap();
        assert_eq!(ok[0].spans[0].score, 0.5);
    }
}
