//! Ranking and temporal non-maximum suppression of scored candidates.

use std::cmp::Ordering;

use crate::backends::EmbedBackend;
use crate::error::{BackendError, ValidationError};
use crate::model::{CandidateSpan, Caption, DebiasedQuerySet, Embedding, ScoredSpan, Span};
use crate::scoring::{embed_captions, span_score_from_embeddings, FAILED_CAPTION_SIMILARITY};

/// Intersection over union of two intervals on the time axis.
pub fn temporal_iou(a: &Span, b: &Span) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    let union = a.end().max(b.end()) - a.start().min(b.start());
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Score descending, then earlier start, then longer span.
pub fn rank_order(a: &ScoredSpan, b: &ScoredSpan) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.span().start().total_cmp(&b.span().start()))
        .then_with(|| b.span().length().total_cmp(&a.span().length()))
}

/// Greedy NMS: keep the best remaining span and drop every span whose IoU
/// with it exceeds `sigma`.
pub fn nms(mut spans: Vec<ScoredSpan>, sigma: f64) -> Result<Vec<ScoredSpan>, ValidationError> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(ValidationError::new("sigma", format!("{sigma} outside (0, 1]")));
    }
    spans.sort_by(rank_order);
    let mut kept: Vec<ScoredSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        if kept.iter().all(|k| temporal_iou(&k.span(), &s.span()) <= sigma) {
            kept.push(s);
        }
    }
    Ok(kept)
}

/// Scores candidates from precomputed embeddings; a `None` caption gets
/// the failed-caption similarity.
pub fn score_candidates(
    candidates: &[CandidateSpan],
    caption_embeddings: &[Option<Embedding>],
    rewrite_embeddings: &[Embedding],
    duration_s: f64,
    lambda: f64,
) -> Result<Vec<ScoredSpan>, ValidationError> {
    if candidates.len() != caption_embeddings.len() {
        return Err(ValidationError::new(
            "span_captions",
            format!("{} captions for {} candidates", caption_embeddings.len(), candidates.len()),
        ));
    }
    candidates
        .iter()
        .zip(caption_embeddings)
        .map(|(c, e)| {
            let s = match e {
                Some(e) => span_score_from_embeddings(e, rewrite_embeddings)?,
                None => FAILED_CAPTION_SIMILARITY,
            };
            ScoredSpan::new(*c, s, duration_s, lambda)
        })
        .collect()
}

/// Span scoring, combined score and NMS for one query.
pub async fn select<E: EmbedBackend + ?Sized>(
    candidates: &[CandidateSpan],
    span_captions: &[Caption],
    debiased: &DebiasedQuerySet,
    embedder: &E,
    lambda: f64,
    sigma: f64,
    duration_s: f64,
) -> Result<Vec<ScoredSpan>, BackendError> {
    if candidates.len() != span_captions.len() {
        return Err(ValidationError::new(
            "span_captions",
            format!("{} captions for {} candidates", span_captions.len(), candidates.len()),
        )
        .into());
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let rewrites = embedder.embed(debiased.rewrites()).await?;
    let captions = embed_captions(span_captions, embedder).await?;
    let scored = score_candidates(candidates, &captions, &rewrites, duration_s, lambda)?;
    Ok(nms(scored, sigma)?)
}
