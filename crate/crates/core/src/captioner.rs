//! Frame-level and span-level captioning.

use futures::future::try_join_all;

use crate::backends::synthetic::SYNTHETIC_MEDIA_TYPE;
use crate::backends::{sha256_hex, BackendFingerprint, ChatBackend, ChatRequest, ContentPart, ImagePayload, Message};
use crate::error::BackendError;
use crate::model::{Caption, CaptionSubject, Span, VideoRecord};

pub const IMAGE_CAPTION_PROMPT: &str =
    "[image caption] Please provide a detailed description of the image content.";
pub const VIDEO_CAPTION_PROMPT: &str = "[Video caption] What is this video about?";

/// Model name and temperature for one captioning stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModel {
    pub model_name: String,
    pub temperature: f64,
}

impl StageModel {
    pub fn new(model_name: impl Into<String>, temperature: f64) -> Self {
        Self {
            model_name: model_name.into(),
            temperature,
        }
    }

    fn fingerprint_id(&self, provider_kind: &str, template: &str) -> String {
        BackendFingerprint {
            provider_kind: provider_kind.to_string(),
            model_name: self.model_name.clone(),
            prompt_hash: sha256_hex(template.as_bytes()),
            temperature: self.temperature,
        }
        .id()
    }
}

/// Resolves a frame reference from a manifest to image bytes.
pub trait FrameSource: Send + Sync {
    fn load(&self, frame_ref: &str) -> std::io::Result<ImagePayload>;
}

/// Reads image files from disk; `synthetic:` references are passed through
/// inline for the synthetic backend.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultFrameSource;

impl FrameSource for DefaultFrameSource {
    fn load(&self, frame_ref: &str) -> std::io::Result<ImagePayload> {
        if frame_ref.starts_with("synthetic:") {
            return Ok(ImagePayload {
                media_type: SYNTHETIC_MEDIA_TYPE.into(),
                bytes: frame_ref.as_bytes().to_vec(),
            });
        }
        let bytes = std::fs::read(frame_ref)?;
        let lower = frame_ref.to_ascii_lowercase();
        let media_type = if lower.ends_with(".png") {
            "image/png"
        } else if lower.ends_with(".webp") {
            "image/webp"
        } else {
            "image/jpeg"
        };
        Ok(ImagePayload {
            media_type: media_type.into(),
            bytes,
        })
    }
}

pub fn frame_caption_request(image: ImagePayload, stage: &StageModel) -> Result<ChatRequest, BackendError> {
    ChatRequest::new(
        &stage.model_name,
        stage.temperature,
        vec![Message::user(vec![
            ContentPart::Text(IMAGE_CAPTION_PROMPT.into()),
            ContentPart::Image(image),
        ])],
        IMAGE_CAPTION_PROMPT,
    )
}

pub fn span_caption_request(images: Vec<ImagePayload>, stage: &StageModel) -> Result<ChatRequest, BackendError> {
    let mut parts = vec![ContentPart::Text(VIDEO_CAPTION_PROMPT.into())];
    parts.extend(images.into_iter().map(ContentPart::Image));
    ChatRequest::new(
        &stage.model_name,
        stage.temperature,
        vec![Message::user(parts)],
        VIDEO_CAPTION_PROMPT,
    )
}

fn caption_from_reply(subject: CaptionSubject, reply: String, fingerprint: String) -> Result<Caption, BackendError> {
    Caption::new(subject, reply.trim(), fingerprint).map_err(|_| BackendError::Malformed {
        reason: format!("empty caption for {subject:?}"),
        excerpt: reply.chars().take(200).collect(),
    })
}

/// One caption per frame, in frame order. Frames that cannot be read get a
/// failed-caption sentinel instead of aborting the video.
pub async fn caption_frames<B: ChatBackend + ?Sized>(
    video: &VideoRecord,
    source: &dyn FrameSource,
    backend: &B,
    stage: &StageModel,
) -> Result<Vec<Caption>, BackendError> {
    let fingerprint = stage.fingerprint_id(backend.provider_kind(), IMAGE_CAPTION_PROMPT);
    let jobs = video.frames().iter().enumerate().map(|(j, frame_ref)| {
        let fingerprint = fingerprint.clone();
        async move {
            let subject = CaptionSubject::Frame(j);
            let image = match source.load(frame_ref) {
                Ok(img) => img,
                Err(e) => {
                    tracing::warn!(video = video.video_id(), frame = j, error = %e, "unreadable frame");
                    return Ok(Caption::failed(subject, fingerprint));
                }
            };
            let request = frame_caption_request(image, stage)?;
            let reply = backend.chat(&request).await?;
            caption_from_reply(subject, reply, fingerprint)
        }
    });
    try_join_all(jobs).await
}

/// Frame indices sent for a span caption: every frame whose timestamp lies
/// in `[start, end)`, thinned to `max_frames` by rounding an even spacing.
/// A span shorter than one frame period uses the frame nearest its middle.
pub fn sample_span_frames(span: &Span, fps: f64, n_frames: usize, max_frames: usize) -> Vec<usize> {
    assert!(n_frames > 0 && max_frames > 0);
    const EPS: f64 = 1e-9;
    let last_frame = n_frames - 1;
    let first = ((span.start() * fps - EPS).ceil().max(0.0) as usize).min(last_frame);
    let end_excl = (span.end() * fps - EPS).ceil().max(0.0) as usize;
    if end_excl <= first || span.start() * fps > last_frame as f64 + EPS {
        let mid = ((span.start() + span.end()) / 2.0 * fps).round().max(0.0) as usize;
        return vec![mid.min(last_frame)];
    }
    let last = (end_excl - 1).min(last_frame);
    let count = last - first + 1;
    if count <= max_frames {
        return (first..=last).collect();
    }
    if max_frames == 1 {
        return vec![(first + last) / 2];
    }
    let step = (last - first) as f64 / (max_frames - 1) as f64;
    (0..max_frames)
        .map(|k| (first as f64 + step * k as f64).round() as usize)
        .collect()
}

/// Captions one candidate span from up to `max_frames` of its frames.
pub async fn caption_span<B: ChatBackend + ?Sized>(
    video: &VideoRecord,
    span: &Span,
    span_id: usize,
    max_frames: usize,
    source: &dyn FrameSource,
    backend: &B,
    stage: &StageModel,
) -> Result<Caption, BackendError> {
    let fingerprint = stage.fingerprint_id(backend.provider_kind(), VIDEO_CAPTION_PROMPT);
    let subject = CaptionSubject::Span(span_id);
    let images: Vec<ImagePayload> = sample_span_frames(span, video.fps(), video.len(), max_frames)
        .into_iter()
        .filter_map(|j| source.load(&video.frames()[j]).ok())
        .collect();
    if images.is_empty() {
        return Ok(Caption::failed(subject, fingerprint));
    }
    let request = span_caption_request(images, stage)?;
    let reply = backend.chat(&request).await?;
    caption_from_reply(subject, reply, fingerprint)
}
