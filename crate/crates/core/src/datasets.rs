//! Annotation loaders, frame manifests and the synthetic dataset generator.
//!
//! Every parser takes the file contents as a string so it can be driven
//! directly by tests and fuzzers; the `load_*` wrappers only add file I/O.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::synthetic::{frame_token, SyntheticPlan, VideoPlan, OBJECTS, SUBJECTS, VERBS};
use crate::error::{Error, LineError, ValidationError};
use crate::model::{max_frame_count, DatasetKind, QueryRecord, SaliencyLabels, Span, VideoRecord};

/// Whether malformed records abort the load or are skipped and reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

/// What an annotation file says about a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    /// Unknown for Charades-STA, whose annotation lines carry no duration.
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub videos: BTreeMap<String, VideoMeta>,
    pub queries: Vec<QueryRecord>,
    /// Records dropped in lenient mode.
    pub skipped: Vec<LineError>,
    /// Present for generated datasets.
    pub plan: Option<SyntheticPlan>,
}

impl Dataset {
    fn new(kind: DatasetKind) -> Self {
        Self {
            kind,
            videos: BTreeMap::new(),
            queries: Vec::new(),
            skipped: Vec::new(),
            plan: None,
        }
    }

    fn add_video(&mut self, video_id: &str, duration_s: Option<f64>) {
        self.videos
            .entry(video_id.to_string())
            .or_insert_with(|| VideoMeta {
                video_id: video_id.to_string(),
                duration_s,
            });
    }

    pub fn query(&self, qid: &str) -> Option<&QueryRecord> {
        self.queries.iter().find(|q| q.qid() == qid)
    }
}

fn line_error(line: usize, message: impl Into<String>) -> LineError {
    LineError {
        line,
        message: message.into(),
    }
}

fn report(mode: ParseMode, skipped: &mut Vec<LineError>, err: LineError) -> Result<(), LineError> {
    match mode {
        ParseMode::Strict => Err(err),
        ParseMode::Lenient => {
            skipped.push(err);
            Ok(())
        }
    }
}

/// Charades-STA: one `video_id start end##query` record per line. The qid
/// is the zero-based index of the record among non-blank lines.
pub fn parse_charades_sta(text: &str, mode: ParseMode) -> Result<Dataset, LineError> {
    let mut ds = Dataset::new(DatasetKind::CharadesSta);
    let mut index = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let qid = index.to_string();
        index += 1;
        match parse_charades_line(line, &qid) {
            Ok(q) => {
                ds.add_video(q.video_id(), None);
                ds.queries.push(q);
            }
            Err(msg) => report(mode, &mut ds.skipped, line_error(line_no, msg))?,
        }
    }
    Ok(ds)
}

fn parse_charades_line(line: &str, qid: &str) -> Result<QueryRecord, String> {
    let (head, query) = line.split_once("##").ok_or("missing '##' separator")?;
    let fields: Vec<&str> = head.split_whitespace().collect();
    let [vid, start, end] = fields[..] else {
        return Err(format!(
            "expected 'video_id start end' before '##', found {} field(s)",
            fields.len()
        ));
    };
    let num = |s: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("invalid time {s:?}"))
    };
    let span = Span::new(num(start)?, num(end)?).map_err(|e| e.to_string())?;
    QueryRecord::new(qid, vid, query.trim(), vec![span], None, None).map_err(|e| e.to_string())
}

pub fn serialize_charades_sta(queries: &[QueryRecord]) -> String {
    let mut out = String::new();
    for q in queries {
        for span in q.gt_spans() {
            out.push_str(&format!(
                "{} {} {}##{}\n",
                q.video_id(),
                span.start(),
                span.end(),
                q.raw_text()
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum QvhId {
    Number(u64),
    Text(String),
}

impl QvhId {
    fn into_string(self) -> String {
        match self {
            QvhId::Number(n) => n.to_string(),
            QvhId::Text(s) => s,
        }
    }

    fn from_qid(qid: &str) -> Self {
        match qid.parse::<u64>() {
            Ok(n) if n.to_string() == qid => QvhId::Number(n),
            _ => QvhId::Text(qid.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QvhLine {
    qid: QvhId,
    query: String,
    vid: String,
    duration: f64,
    #[serde(default)]
    relevant_windows: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    relevant_clip_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    saliency_scores: Vec<Vec<u32>>,
}

/// QVHighlights: one JSON object per line.
pub fn parse_qvhighlights(text: &str, mode: ParseMode) -> Result<Dataset, LineError> {
    let mut ds = Dataset::new(DatasetKind::QvHighlights);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_qvh_line(line) {
            Ok((q, duration)) => {
                ds.add_video(q.video_id(), Some(duration));
                ds.queries.push(q);
            }
            Err(msg) => report(mode, &mut ds.skipped, line_error(line_no, msg))?,
        }
    }
    Ok(ds)
}

fn parse_qvh_line(line: &str) -> Result<(QueryRecord, f64), String> {
    let rec: QvhLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if !(rec.duration.is_finite() && rec.duration > 0.0) {
        return Err(format!("duration must be positive, got {}", rec.duration));
    }
    let spans = rec
        .relevant_windows
        .iter()
        .map(|(s, e)| Span::new(*s, *e))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let saliency = if rec.relevant_clip_ids.is_empty() && rec.saliency_scores.is_empty() {
        None
    } else {
        Some(SaliencyLabels {
            clip_ids: rec.relevant_clip_ids,
            scores: rec.saliency_scores,
        })
    };
    let q = QueryRecord::new(
        rec.qid.into_string(),
        rec.vid,
        rec.query,
        spans,
        saliency,
        Some(rec.duration),
    )
    .map_err(|e| e.to_string())?;
    Ok((q, rec.duration))
}

pub fn serialize_qvhighlights(ds: &Dataset) -> Result<String, ValidationError> {
    let mut out = String::new();
    for q in &ds.queries {
        let duration = duration_of(ds, q.video_id())?;
        let (clip_ids, scores) = match q.gt_saliency() {
            Some(s) => (s.clip_ids.clone(), s.scores.clone()),
            None => (Vec::new(), Vec::new()),
        };
        let line = QvhLine {
            qid: QvhId::from_qid(q.qid()),
            query: q.raw_text().to_string(),
            vid: q.video_id().to_string(),
            duration,
            relevant_windows: q.gt_spans().iter().map(|s| (s.start(), s.end())).collect(),
            relevant_clip_ids: clip_ids,
            saliency_scores: scores,
        };
        out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
        out.push('\n');
    }
    Ok(out)
}

fn duration_of(ds: &Dataset, video_id: &str) -> Result<f64, ValidationError> {
    ds.videos
        .get(video_id)
        .and_then(|v| v.duration_s)
        .ok_or_else(|| ValidationError::new("duration_s", format!("unknown for video {video_id}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnetVideo {
    duration: f64,
    timestamps: Vec<(f64, f64)>,
    sentences: Vec<String>,
}

/// ActivityNet Captions: a JSON object mapping video id to
/// `{duration, timestamps, sentences}`. Query `i` of video `v` gets qid
/// `v_i`. Ends past the duration are clipped to it.
pub fn parse_activitynet(text: &str, mode: ParseMode) -> Result<Dataset, LineError> {
    let mut ds = Dataset::new(DatasetKind::ActivityNet);
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| line_error(e.line(), e.to_string()))?;
    for (vid, value) in map {
        let line_no = key_line(text, &vid);
        match parse_anet_video(&vid, value) {
            Ok((queries, duration)) => {
                ds.add_video(&vid, Some(duration));
                ds.queries.extend(queries);
            }
            Err(msg) => report(
                mode,
                &mut ds.skipped,
                line_error(line_no, format!("video {vid}: {msg}")),
            )?,
        }
    }
    Ok(ds)
}

fn key_line(text: &str, key: &str) -> usize {
    let needle = serde_json::to_string(key).unwrap_or_default();
    text.find(&needle)
        .map_or(1, |pos| text[..pos].matches('\n').count() + 1)
}

fn parse_anet_video(vid: &str, value: serde_json::Value) -> Result<(Vec<QueryRecord>, f64), String> {
    let v: AnetVideo = serde_json::from_value(value).map_err(|e| e.to_string())?;
    if !(v.duration.is_finite() && v.duration > 0.0) {
        return Err(format!("duration must be positive, got {}", v.duration));
    }
    if v.timestamps.len() != v.sentences.len() {
        return Err(format!(
            "{} timestamps but {} sentences",
            v.timestamps.len(),
            v.sentences.len()
        ));
    }
    let mut out = Vec::with_capacity(v.sentences.len());
    for (i, ((s, e), sentence)) in v.timestamps.iter().zip(&v.sentences).enumerate() {
        let span = Span::new(*s, e.min(v.duration)).map_err(|err| format!("query {i}: {err}"))?;
        let q = QueryRecord::new(
            format!("{vid}_{i}"),
            vid,
            sentence.trim(),
            vec![span],
            None,
            Some(v.duration),
        )
        .map_err(|err| format!("query {i}: {err}"))?;
        out.push(q);
    }
    Ok((out, v.duration))
}

pub fn serialize_activitynet(ds: &Dataset) -> Result<String, ValidationError> {
    let mut map: BTreeMap<&str, AnetVideo> = BTreeMap::new();
    for q in &ds.queries {
        let duration = duration_of(ds, q.video_id())?;
        let entry = map.entry(q.video_id()).or_insert_with(|| AnetVideo {
            duration,
            timestamps: Vec::new(),
            sentences: Vec::new(),
        });
        for s in q.gt_spans() {
            entry.timestamps.push((s.start(), s.end()));
            entry.sentences.push(q.raw_text().to_string());
        }
    }
    Ok(serde_json::to_string_pretty(&map).expect("plain data serializes"))
}

/// Frame files of one video directory, indexed by their numeric file stem.
/// Indices with no file map to the path where the file would be, so the
/// captioner sees them as unreadable.
pub fn frame_manifest(dir: &Path) -> std::io::Result<Vec<String>> {
    let mut found: BTreeMap<usize, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"));
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok());
        if let (true, Some(index)) = (is_image, index) {
            found.entry(index).or_insert(path);
        }
    }
    let Some(&last) = found.keys().next_back() else {
        return Ok(Vec::new());
    };
    Ok((0..=last)
        .map(|i| {
            found
                .get(&i)
                .cloned()
                .unwrap_or_else(|| dir.join(format!("{i}.jpg")))
                .to_string_lossy()
                .into_owned()
        })
        .collect())
}

/// Builds the frame manifest of one video. An unknown duration is taken
/// from the frame count; frames beyond the duration are dropped.
pub fn build_video(
    meta: &VideoMeta,
    fps: f64,
    frames_root: Option<&Path>,
    plan: Option<&SyntheticPlan>,
) -> Result<VideoRecord, Error> {
    let mut frames = match (plan.and_then(|p| p.videos.get(&meta.video_id)), frames_root) {
        (Some(v), _) => (0..v.n_frames).map(|j| frame_token(&v.video_id, j)).collect(),
        (None, Some(root)) => {
            let dir = root.join(&meta.video_id);
            frame_manifest(&dir).map_err(|e| Error::io(&dir, e))?
        }
        (None, None) => {
            return Err(Error::Config(format!(
                "no frames_root configured for video {}",
                meta.video_id
            )))
        }
    };
    if frames.is_empty() {
        return Err(Error::Other(format!("video {} has no frames", meta.video_id)));
    }
    let duration = meta.duration_s.unwrap_or(frames.len() as f64 / fps);
    frames.truncate(max_frame_count(duration, fps));
    Ok(VideoRecord::new(&meta.video_id, duration, fps, frames)?)
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub duration_range: (f64, f64),
    pub spans_per_video: (usize, usize),
    pub span_length_range: (f64, f64),
    /// Minimum gap between planted spans, in seconds.
    pub min_gap_s: f64,
    pub fps: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_videos: 50,
            duration_range: (60.0, 120.0),
            spans_per_video: (1, 2),
            span_length_range: (10.0, 30.0),
            min_gap_s: 10.0,
            fps: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let (dlo, dhi) = self.duration_range;
        let (nlo, nhi) = self.spans_per_video;
        let (llo, lhi) = self.span_length_range;
        if !(dlo > 0.0 && dlo <= dhi && dhi.is_finite()) {
            return Err(ValidationError::new("duration_range", "need 0 < lo <= hi"));
        }
        if !(nlo >= 1 && nlo <= nhi) {
            return Err(ValidationError::new("spans_per_video", "need 1 <= lo <= hi"));
        }
        if !(llo > 0.0 && llo <= lhi) {
            return Err(ValidationError::new("span_length_range", "need 0 < lo <= hi"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) || self.min_gap_s < 0.0 {
            return Err(ValidationError::new("fps", "must be positive"));
        }
        if nhi as f64 * llo + (nhi - 1) as f64 * self.min_gap_s > dlo {
            return Err(ValidationError::new(
                "spans_per_video",
                "the shortest video cannot hold the most spans",
            ));
        }
        Ok(())
    }
}

/// A generated dataset together with the plan the synthetic backend reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub videos: Vec<VideoRecord>,
    pub queries: Vec<QueryRecord>,
    pub plan: SyntheticPlan,
}

fn tenth(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Seeded generator: each video gets one query phrase planted in one or
/// more non-overlapping spans.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticDataset, ValidationError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut videos = Vec::with_capacity(config.n_videos);
    let mut queries = Vec::with_capacity(config.n_videos);
    let mut plan = SyntheticPlan::default();
    for v in 0..config.n_videos {
        let video_id = format!("syn{v:04}");
        let duration = tenth(rng.random_range(config.duration_range.0..=config.duration_range.1));
        let n_spans = rng.random_range(config.spans_per_video.0..=config.spans_per_video.1);
        let spans = place_spans(&mut rng, config, duration, n_spans)?;
        let phrase = format!(
            "a {} {} the {}",
            SUBJECTS[rng.random_range(0..SUBJECTS.len())],
            VERBS[rng.random_range(0..VERBS.len())],
            OBJECTS[rng.random_range(0..OBJECTS.len())]
        );
        let n_frames = ((duration * config.fps).ceil() as usize).max(1);
        let vp = VideoPlan {
            video_id: video_id.clone(),
            fps: config.fps,
            n_frames,
            spans: spans.clone(),
            phrase: phrase.clone(),
        };
        let clip_ids: Vec<usize> = (0..n_frames).filter(|j| vp.frame_in_span(*j)).collect();
        let saliency = SaliencyLabels {
            scores: vec![vec![4]; clip_ids.len()],
            clip_ids,
        };
        let frames = (0..n_frames).map(|j| frame_token(&video_id, j)).collect();
        videos.push(VideoRecord::new(&video_id, duration, config.fps, frames)?);
        queries.push(QueryRecord::new(
            format!("syn{v:04}_0"),
            &video_id,
            phrase,
            spans,
            Some(saliency),
            Some(duration),
        )?);
        plan.videos.insert(video_id, vp);
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        videos,
        queries,
        plan,
    })
}

fn place_spans(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    duration: f64,
    n_spans: usize,
) -> Result<Vec<Span>, ValidationError> {
    let (llo, lhi) = config.span_length_range;
    let mut lengths: Vec<f64> = (0..n_spans).map(|_| tenth(rng.random_range(llo..=lhi))).collect();
    let needed = |ls: &[f64]| ls.iter().sum::<f64>() + (ls.len() - 1) as f64 * config.min_gap_s;
    // shrink the longest span until everything fits; validate() guarantees
    // the minimum lengths do
    while needed(&lengths) > duration {
        let longest = (0..lengths.len())
            .max_by(|a, b| lengths[*a].total_cmp(&lengths[*b]))
            .expect("at least one span");
        lengths[longest] = (lengths[longest] - 1.0).max(llo);
    }
    let slack = duration - needed(&lengths);
    let mut cuts: Vec<f64> = (0..n_spans).map(|_| rng.random_range(0.0..=slack)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut spans = Vec::with_capacity(n_spans);
    let mut cursor = 0.0;
    let mut used_slack = 0.0;
    for (len, cut) in lengths.iter().zip(cuts) {
        cursor += cut - used_slack;
        used_slack = cut;
        let start = tenth(cursor).max(0.0);
        let end = tenth(start + len).min(duration);
        spans.push(Span::new(start, end)?);
        cursor = end + config.min_gap_s;
    }
    Ok(spans)
}

impl SyntheticDataset {
    pub fn to_dataset(&self) -> Dataset {
        let mut ds = Dataset::new(DatasetKind::Synthetic);
        for v in &self.videos {
            ds.add_video(v.video_id(), Some(v.duration_s()));
        }
        ds.queries = self.queries.clone();
        ds.plan = Some(self.plan.clone());
        ds
    }
}

/// A generated dataset file (the JSON written by [`SyntheticDataset`]).
pub fn parse_synthetic(text: &str) -> Result<Dataset, LineError> {
    let syn: SyntheticDataset =
        serde_json::from_str(text).map_err(|e| line_error(e.line(), e.to_string()))?;
    Ok(syn.to_dataset())
}

pub fn parse_dataset(kind: DatasetKind, text: &str, mode: ParseMode) -> Result<Dataset, LineError> {
    match kind {
        DatasetKind::CharadesSta => parse_charades_sta(text, mode),
        DatasetKind::QvHighlights => parse_qvhighlights(text, mode),
        DatasetKind::ActivityNet => parse_activitynet(text, mode),
        DatasetKind::Synthetic => parse_synthetic(text),
    }
}

/// Reads and parses an annotation file.
pub fn load_dataset(kind: DatasetKind, path: &Path, mode: ParseMode) -> Result<Dataset, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(kind, &text, mode).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// Hex SHA-256 of the annotation file bytes.
pub fn dataset_hash(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
