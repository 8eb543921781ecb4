//! Domain types shared across the pipeline.
//!
//! Every type validates its invariants at construction and is immutable
//! afterwards. Deserialization goes through the same constructors, so a
//! record read back from disk is held to the same rules as one built in
//! memory.

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

/// Tolerance used when comparing span endpoints for equality.
pub const SPAN_EPS: f64 = 1e-6;

/// A half-open time interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct Span {
    start: f64,
    end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Result<Self, ValidationError> {
        if !start.is_finite() || !end.is_finite() {
            return Err(ValidationError::new("span", "endpoints must be finite"));
        }
        if start < 0.0 {
            return Err(ValidationError::new(
                "span",
                format!("start {start} is negative"),
            ));
        }
        if start >= end {
            return Err(ValidationError::new(
                "span",
                format!("start {start} must be before end {end}"),
            ));
        }
        Ok(Self { start, end })
    }

    /// Like [`Span::new`] but additionally requires `end <= duration`.
    pub fn within(start: f64, end: f64, duration: f64) -> Result<Self, ValidationError> {
        let span = Self::new(start, end)?;
        if end > duration {
            return Err(ValidationError::new(
                "span",
                format!("end {end} exceeds video duration {duration}"),
            ));
        }
        Ok(span)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn approx_eq(&self, other: &Span) -> bool {
        (self.start - other.start).abs() <= SPAN_EPS && (self.end - other.end).abs() <= SPAN_EPS
    }
}

impl TryFrom<(f64, f64)> for Span {
    type Error = ValidationError;

    fn try_from((start, end): (f64, f64)) -> Result<Self, Self::Error> {
        Span::new(start, end)
    }
}

impl From<Span> for (f64, f64) {
    fn from(span: Span) -> Self {
        (span.start, span.end)
    }
}

/// A video's sampled-frame manifest.
///
/// Frame `j` is the sample taken at `j / fps` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VideoRecordRepr")]
pub struct VideoRecord {
    video_id: String,
    duration_s: f64,
    fps: f64,
    frames: Vec<String>,
}

#[derive(Deserialize)]
struct VideoRecordRepr {
    video_id: String,
    duration_s: f64,
    fps: f64,
    frames: Vec<String>,
}

impl TryFrom<VideoRecordRepr> for VideoRecord {
    type Error = ValidationError;

    fn try_from(r: VideoRecordRepr) -> Result<Self, Self::Error> {
        VideoRecord::new(r.video_id, r.duration_s, r.fps, r.frames)
    }
}

impl VideoRecord {
    pub fn new(
        video_id: impl Into<String>,
        duration_s: f64,
        fps: f64,
        frames: Vec<String>,
    ) -> Result<Self, ValidationError> {
        let video_id = video_id.into();
        if video_id.trim().is_empty() {
            return Err(ValidationError::new("video_id", "must not be empty"));
        }
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(ValidationError::new(
                "duration_s",
                format!("must be positive, got {duration_s}"),
            ));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(ValidationError::new(
                "fps",
                format!("must be positive, got {fps}"),
            ));
        }
        if frames.is_empty() {
            return Err(ValidationError::new("frames", "video has no frames"));
        }
        let max_frames = max_frame_count(duration_s, fps);
        if frames.len() > max_frames {
            return Err(ValidationError::new(
                "frames",
                format!(
                    "{} frames exceed ceil(duration*fps)+1 = {max_frames}",
                    frames.len()
                ),
            ));
        }
        Ok(Self {
            video_id,
            duration_s,
            fps,
            frames,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> &[String] {
        &self.frames
    }

    /// L_v, the number of sampled frames.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }
}

/// Upper bound on the number of frames sampled from a video.
pub fn max_frame_count(duration_s: f64, fps: f64) -> usize {
    (duration_s * fps).ceil() as usize + 1
}

/// Per-clip saliency annotations (QVHighlights style).
///
/// `scores[i]` holds one score per annotator for clip `clip_ids[i]`; clips
/// that are not listed have score 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyLabels {
    pub clip_ids: Vec<usize>,
    pub scores: Vec<Vec<u32>>,
}

impl SaliencyLabels {
    /// Dense per-clip score, taking the maximum over annotators.
    pub fn dense_max(&self, n_clips: usize) -> Vec<u32> {
        let mut dense = vec![0; n_clips];
        for (clip, scores) in self.clip_ids.iter().zip(&self.scores) {
            if let Some(slot) = dense.get_mut(*clip) {
                *slot = scores.iter().copied().max().unwrap_or(0);
            }
        }
        dense
    }
}

/// A natural-language query and its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QueryRecordRepr")]
pub struct QueryRecord {
    qid: String,
    video_id: String,
    raw_text: String,
    gt_spans: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_saliency: Option<SaliencyLabels>,
}

#[derive(Deserialize)]
struct QueryRecordRepr {
    qid: String,
    video_id: String,
    raw_text: String,
    #[serde(default)]
    gt_spans: Vec<Span>,
    #[serde(default)]
    gt_saliency: Option<SaliencyLabels>,
}

impl TryFrom<QueryRecordRepr> for QueryRecord {
    type Error = ValidationError;

    fn try_from(r: QueryRecordRepr) -> Result<Self, Self::Error> {
        QueryRecord::new(r.qid, r.video_id, r.raw_text, r.gt_spans, r.gt_saliency, None)
    }
}

impl QueryRecord {
    /// Builds a query; when `duration_s` is known every ground-truth span
    /// must end within it.
    pub fn new(
        qid: impl Into<String>,
        video_id: impl Into<String>,
        raw_text: impl Into<String>,
        gt_spans: Vec<Span>,
        gt_saliency: Option<SaliencyLabels>,
        duration_s: Option<f64>,
    ) -> Result<Self, ValidationError> {
        let qid = qid.into();
        let video_id = video_id.into();
        let raw_text = raw_text.into();
        if qid.is_empty() {
            return Err(ValidationError::new("qid", "must not be empty"));
        }
        if video_id.is_empty() {
            return Err(ValidationError::new("video_id", "must not be empty"));
        }
        if raw_text.trim().is_empty() {
            return Err(ValidationError::new("raw_text", "query text is empty"));
        }
        if let Some(duration) = duration_s {
            for span in &gt_spans {
                if span.end() > duration {
                    return Err(ValidationError::new(
                        "gt_spans",
                        format!(
                            "span [{}, {}] exceeds duration {duration}",
                            span.start(),
                            span.end()
                        ),
                    ));
                }
            }
        }
        if let Some(sal) = &gt_saliency {
            if sal.clip_ids.len() != sal.scores.len() {
                return Err(ValidationError::new(
                    "gt_saliency",
                    "clip_ids and scores differ in length",
                ));
            }
        }
        Ok(Self {
            qid,
            video_id,
            raw_text,
            gt_spans,
            gt_saliency,
        })
    }

    pub fn qid(&self) -> &str {
        &self.qid
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn gt_spans(&self) -> &[Span] {
        &self.gt_spans
    }

    pub fn gt_saliency(&self) -> Option<&SaliencyLabels> {
        self.gt_saliency.as_ref()
    }
}

/// The rewritten queries produced from one raw query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DebiasedRepr")]
pub struct DebiasedQuerySet {
    qid: String,
    raw_text: String,
    rewrites: Vec<String>,
    fallback_used: bool,
}

#[derive(Deserialize)]
struct DebiasedRepr {
    qid: String,
    raw_text: String,
    rewrites: Vec<String>,
    fallback_used: bool,
}

impl TryFrom<DebiasedRepr> for DebiasedQuerySet {
    type Error = ValidationError;

    fn try_from(r: DebiasedRepr) -> Result<Self, Self::Error> {
        DebiasedQuerySet::new(r.qid, r.raw_text, r.rewrites, r.fallback_used)
    }
}

impl DebiasedQuerySet {
    pub fn new(
        qid: impl Into<String>,
        raw_text: impl Into<String>,
        rewrites: Vec<String>,
        fallback_used: bool,
    ) -> Result<Self, ValidationError> {
        let raw_text = raw_text.into();
        if rewrites.is_empty() {
            return Err(ValidationError::new("rewrites", "at least one rewrite required"));
        }
        if rewrites.iter().any(|r| r.trim().is_empty()) {
            return Err(ValidationError::new("rewrites", "empty rewrite"));
        }
        if fallback_used && rewrites != [raw_text.clone()] {
            return Err(ValidationError::new(
                "rewrites",
                "fallback set must contain exactly the raw query",
            ));
        }
        Ok(Self {
            qid: qid.into(),
            raw_text,
            rewrites,
            fallback_used,
        })
    }

    /// The degenerate set used when no rewrite could be obtained.
    pub fn fallback(
        qid: impl Into<String>,
        raw_text: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let raw_text = raw_text.into();
        Self::new(qid, raw_text.clone(), vec![raw_text], true)
    }

    pub fn qid(&self) -> &str {
        &self.qid
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn rewrites(&self) -> &[String] {
        &self.rewrites
    }

    pub fn fallback_used(&self) -> bool {
        self.fallback_used
    }

    /// N_d of this set.
    pub fn len(&self) -> usize {
        self.rewrites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewrites.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSubject {
    Frame(usize),
    Span(usize),
}

/// A model-generated description of a frame or candidate span.
///
/// A caption whose source could not be read carries `failed = true` and an
/// empty text; scoring assigns it similarity −1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CaptionRepr")]
pub struct Caption {
    subject: CaptionSubject,
    text: String,
    provider_fingerprint: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    failed: bool,
}

#[derive(Deserialize)]
struct CaptionRepr {
    subject: CaptionSubject,
    text: String,
    provider_fingerprint: String,
    #[serde(default)]
    failed: bool,
}

impl TryFrom<CaptionRepr> for Caption {
    type Error = ValidationError;

    fn try_from(r: CaptionRepr) -> Result<Self, Self::Error> {
        if r.failed {
            Ok(Caption::failed(r.subject, r.provider_fingerprint))
        } else {
            Caption::new(r.subject, r.text, r.provider_fingerprint)
        }
    }
}

impl Caption {
    pub fn new(
        subject: CaptionSubject,
        text: impl Into<String>,
        provider_fingerprint: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ValidationError::new("caption", "caption text is empty"));
        }
        Ok(Self {
            subject,
            text,
            provider_fingerprint: provider_fingerprint.into(),
            failed: false,
        })
    }

    pub fn failed(subject: CaptionSubject, provider_fingerprint: impl Into<String>) -> Self {
        Self {
            subject,
            text: String::new(),
            provider_fingerprint: provider_fingerprint.into(),
            failed: true,
        }
    }

    pub fn subject(&self) -> CaptionSubject {
        self.subject
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn provider_fingerprint(&self) -> &str {
        &self.provider_fingerprint
    }

    pub fn is_failed(&self) -> bool {
        self.failed
    }
}

/// A pooled text embedding with non-zero norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, ValidationError> {
        if values.is_empty() {
            return Err(ValidationError::new("embedding", "zero-dimensional vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ValidationError::new("embedding", "non-finite component"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(ValidationError::new("embedding", "zero-norm vector"));
        }
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = ValidationError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

/// Frame-level similarities, one row per rewrite and one column per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct FrameScoreMatrix {
    rows: Vec<Vec<f64>>,
}

impl FrameScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, ValidationError> {
        let Some(first) = rows.first() else {
            return Err(ValidationError::new("frame_scores", "no rows"));
        };
        let cols = first.len();
        if cols == 0 {
            return Err(ValidationError::new("frame_scores", "no columns"));
        }
        for row in &rows {
            if row.len() != cols {
                return Err(ValidationError::new("frame_scores", "ragged rows"));
            }
            if let Some(v) = row.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(ValidationError::new(
                    "frame_scores",
                    format!("entry {v} outside [-1, 1]"),
                ));
            }
        }
        Ok(Self { rows })
    }

    /// Checks the shape against the query/video pair it came from.
    pub fn expect_shape(&self, n_rewrites: usize, n_frames: usize) -> Result<(), ValidationError> {
        if self.n_rows() != n_rewrites || self.n_cols() != n_frames {
            return Err(ValidationError::new(
                "frame_scores",
                format!(
                    "shape {}x{} does not match {n_rewrites}x{n_frames}",
                    self.n_rows(),
                    self.n_cols()
                ),
            ));
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(Vec::as_slice)
    }
}

impl TryFrom<Vec<Vec<f64>>> for FrameScoreMatrix {
    type Error = ValidationError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        FrameScoreMatrix::new(rows)
    }
}

impl From<FrameScoreMatrix> for Vec<Vec<f64>> {
    fn from(m: FrameScoreMatrix) -> Self {
        m.rows
    }
}

/// A candidate span and the rewrite row that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpan {
    pub span: Span,
    pub source_rewrite: usize,
}

impl CandidateSpan {
    pub fn new(span: Span, source_rewrite: usize, duration_s: f64) -> Result<Self, ValidationError> {
        if span.end() > duration_s {
            return Err(ValidationError::new(
                "candidate",
                format!("end {} exceeds duration {duration_s}", span.end()),
            ));
        }
        Ok(Self {
            span,
            source_rewrite,
        })
    }
}

/// A candidate with its span similarity, normalized length and combined score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSpan {
    span: CandidateSpan,
    s_span: f64,
    e_norm: f64,
    score: f64,
}

impl ScoredSpan {
    /// Scores `span` as `(1 − λ)·s_span + λ·(length / duration)`.
    pub fn new(
        span: CandidateSpan,
        s_span: f64,
        duration_s: f64,
        lambda: f64,
    ) -> Result<Self, ValidationError> {
        if !(-1.0..=1.0).contains(&s_span) {
            return Err(ValidationError::new(
                "s_span",
                format!("{s_span} outside [-1, 1]"),
            ));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ValidationError::new("lambda", format!("{lambda} outside [0, 1]")));
        }
        if duration_s.is_nan() || duration_s <= 0.0 {
            return Err(ValidationError::new("duration_s", "must be positive"));
        }
        let e_norm = (span.span.length() / duration_s).clamp(0.0, 1.0);
        Ok(Self {
            span,
            s_span,
            e_norm,
            score: (1.0 - lambda) * s_span + lambda * e_norm,
        })
    }

    pub fn candidate(&self) -> &CandidateSpan {
        &self.span
    }

    pub fn span(&self) -> Span {
        self.span.span
    }

    pub fn s_span(&self) -> f64 {
        self.s_span
    }

    pub fn e_norm(&self) -> f64 {
        self.e_norm
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// The three benchmark families plus generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    CharadesSta,
    ActivityNet,
    QvHighlights,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Temperatures {
    pub debias: f64,
    pub frame_caption: f64,
    pub span_caption: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            debias: 0.3,
            frame_caption: 0.2,
            span_caption: 0.2,
        }
    }
}

/// Frame sampling rate per dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpsTable {
    pub charades_sta: f64,
    pub activitynet: f64,
    pub qvhighlights: f64,
    pub synthetic: f64,
}

impl Default for FpsTable {
    fn default() -> Self {
        Self {
            charades_sta: 1.0,
            activitynet: 1.0,
            qvhighlights: 0.5,
            synthetic: 1.0,
        }
    }
}

impl FpsTable {
    pub fn for_dataset(&self, kind: DatasetKind) -> f64 {
        match kind {
            DatasetKind::CharadesSta => self.charades_sta,
            DatasetKind::ActivityNet => self.activitynet,
            DatasetKind::QvHighlights => self.qvhighlights,
            DatasetKind::Synthetic => self.synthetic,
        }
    }
}

/// Hyperparameters of the retrieval pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of debiased rewrites requested per query.
    pub n_d: usize,
    /// Histogram bin count for the adaptive threshold.
    pub eta: usize,
    /// Minimum number of moments the threshold bin must cover.
    pub kappa: usize,
    /// Run of below-threshold moments that closes a span.
    pub tau: usize,
    /// Weight of the span-length term in the combined score.
    pub lambda: f64,
    /// NMS IoU threshold.
    pub sigma: f64,
    pub temperatures: Temperatures,
    pub fps: FpsTable,
    /// Frames sent per span-caption request.
    pub max_span_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_d: 3,
            eta: 10,
            kappa: 7,
            tau: 5,
            lambda: 0.2,
            sigma: 0.9,
            temperatures: Temperatures::default(),
            fps: FpsTable::default(),
            max_span_frames: 8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.n_d == 0 {
            return Err(ValidationError::new("n_d", "must be at least 1"));
        }
        if self.eta == 0 {
            return Err(ValidationError::new("eta", "must be at least 1"));
        }
        if self.kappa == 0 {
            return Err(ValidationError::new("kappa", "must be at least 1"));
        }
        if self.tau == 0 {
            return Err(ValidationError::new("tau", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ValidationError::new("lambda", "must lie in [0, 1]"));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(ValidationError::new("sigma", "must lie in (0, 1]"));
        }
        if self.max_span_frames == 0 {
            return Err(ValidationError::new("max_span_frames", "must be at least 1"));
        }
        let t = &self.temperatures;
        for (name, v) in [
            ("temperatures.debias", t.debias),
            ("temperatures.frame_caption", t.frame_caption),
            ("temperatures.span_caption", t.span_caption),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ValidationError::new("temperatures", format!("{name} must be >= 0")));
            }
        }
        let f = &self.fps;
        for v in [f.charades_sta, f.activitynet, f.qvhighlights, f.synthetic] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ValidationError::new("fps", "frame rates must be positive"));
            }
        }
        Ok(())
    }
}
