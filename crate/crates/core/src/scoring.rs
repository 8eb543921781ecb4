//! Cosine scoring of frames and spans against the debiased queries.

use crate::backends::{check_uniform_dim, EmbedBackend};
use crate::error::{BackendError, ValidationError};
use crate::model::{CandidateSpan, Caption, DebiasedQuerySet, Embedding, FrameScoreMatrix};

/// Similarity given to captions whose source could not be read.
pub const FAILED_CAPTION_SIMILARITY: f64 = -1.0;

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, ValidationError> {
    if a.dim() != b.dim() {
        return Err(ValidationError::new(
            "embedding",
            format!("dimension mismatch: {} vs {}", a.dim(), b.dim()),
        ));
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

/// Builds the frame-score matrix from already-computed embeddings; `None`
/// marks a failed caption.
pub fn frame_scores_from_embeddings(
    rewrites: &[Embedding],
    captions: &[Option<Embedding>],
) -> Result<FrameScoreMatrix, ValidationError> {
    let rows = rewrites
        .iter()
        .map(|q| {
            captions
                .iter()
                .map(|c| match c {
                    Some(c) => cosine(q, c),
                    None => Ok(FAILED_CAPTION_SIMILARITY),
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    FrameScoreMatrix::new(rows)
}

/// Embeddings for the non-failed captions, `None` in failed slots.
pub async fn embed_captions<E: EmbedBackend + ?Sized>(
    captions: &[Caption],
    embedder: &E,
) -> Result<Vec<Option<Embedding>>, BackendError> {
    let texts: Vec<String> = captions
        .iter()
        .filter(|c| !c.is_failed())
        .map(|c| c.text().to_string())
        .collect();
    let mut embedded = if texts.is_empty() {
        Vec::new()
    } else {
        embedder.embed(&texts).await?
    }
    .into_iter();
    Ok(captions
        .iter()
        .map(|c| if c.is_failed() { None } else { embedded.next() })
        .collect())
}

/// Frame scorer: cosine of every rewrite against every frame caption.
pub async fn frame_scores<E: EmbedBackend + ?Sized>(
    debiased: &DebiasedQuerySet,
    frame_captions: &[Caption],
    embedder: &E,
) -> Result<FrameScoreMatrix, BackendError> {
    if frame_captions.is_empty() {
        return Err(BackendError::InvalidRequest("no frame captions".into()));
    }
    let rewrites = embedder.embed(debiased.rewrites()).await?;
    let captions = embed_captions(frame_captions, embedder).await?;
    let mut all: Vec<Embedding> = rewrites.clone();
    all.extend(captions.iter().flatten().cloned());
    check_uniform_dim(&all)?;
    let m = frame_scores_from_embeddings(&rewrites, &captions)?;
    m.expect_shape(debiased.len(), frame_captions.len())?;
    Ok(m)
}

/// Mean cosine between one span caption and each rewrite.
pub fn span_score_from_embeddings(caption: &Embedding, rewrites: &[Embedding]) -> Result<f64, ValidationError> {
    if rewrites.is_empty() {
        return Err(ValidationError::new("rewrites", "no rewrite embeddings"));
    }
    let row = rewrites
        .iter()
        .map(|q| cosine(caption, q))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Span scorer for one caption.
pub async fn span_score<E: EmbedBackend + ?Sized>(
    span_caption: &Caption,
    debiased: &DebiasedQuerySet,
    embedder: &E,
) -> Result<f64, BackendError> {
    if span_caption.is_failed() {
        return Err(BackendError::InvalidRequest("span caption failed".into()));
    }
    let caption = embedder.embed(&[span_caption.text().to_string()]).await?;
    let rewrites = embedder.embed(debiased.rewrites()).await?;
    Ok(span_score_from_embeddings(&caption[0], &rewrites)?)
}

/// `(1 − λ)·s_span + λ·(length / duration)`.
pub fn combined_score(
    s_span: f64,
    span: &CandidateSpan,
    duration_s: f64,
    lambda: f64,
) -> Result<f64, ValidationError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ValidationError::new("lambda", format!("{lambda} outside [0, 1]")));
    }
    if duration_s.is_nan() || duration_s <= 0.0 {
        return Err(ValidationError::new("duration_s", "must be positive"));
    }
    let e_norm = (span.span.length() / duration_s).clamp(0.0, 1.0);
    Ok((1.0 - lambda) * s_span + lambda * e_norm)
}

/// Column-wise mean of the frame-score matrix: one saliency value per frame.
pub fn saliency_track(scores: &FrameScoreMatrix) -> Vec<f64> {
    let n = scores.n_rows() as f64;
    (0..scores.n_cols())
        .map(|j| scores.rows().map(|r| r[j]).sum::<f64>() / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::synthetic::SyntheticBackend;
    use crate::model::{CaptionSubject, ScoredSpan, Span};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&e(&[1.0, 2.0, 3.0]), &e(&[1.0, 2.0, 3.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let v = cosine(&e(&[1.0, 2.0, 2.0]), &e(&[2.0, 1.0, 2.0])).unwrap();
        assert!((v - 8.0 / 9.0).abs() < 1e-15);
        assert!(cosine(&e(&[1.0]), &e(&[1.0, 0.0])).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 8),
            b in prop::collection::vec(-10.0f64..10.0, 8),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let (ea, eb) = (e(&a), e(&b));
            let ab = cosine(&ea, &eb).unwrap();
            prop_assert!((ab - cosine(&eb, &ea).unwrap()).abs() <= 1e-12);
            let scaled = e(&a.iter().map(|x| x * c).collect::<Vec<_>>());
            prop_assert!((ab - cosine(&scaled, &eb).unwrap()).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn combined_score_monotone(
            s1 in -1.0f64..1.0, ds in 0.0f64..0.5,
            len in 1.0f64..50.0, dl in 0.0f64..40.0,
            lambda in 0.01f64..0.99,
        ) {
            let dur = 100.0;
            let c = |l: f64| CandidateSpan::new(Span::new(0.0, l).unwrap(), 0, dur).unwrap();
            let base = combined_score(s1, &c(len), dur, lambda).unwrap();
            prop_assert!(combined_score((s1 + ds).min(1.0), &c(len), dur, lambda).unwrap() >= base);
            prop_assert!(combined_score(s1, &c(len + dl), dur, lambda).unwrap() >= base);
        }
    }

    #[test]
    fn combined_score_cases() {
        let c = CandidateSpan::new(Span::new(10.0, 40.0).unwrap(), 0, 100.0).unwrap();
        assert_eq!(combined_score(0.37, &c, 100.0, 0.0).unwrap(), 0.37);
        assert!((combined_score(0.5, &c, 100.0, 0.2).unwrap() - 0.46).abs() < 1e-12);
        let full = CandidateSpan::new(Span::new(0.0, 100.0).unwrap(), 0, 100.0).unwrap();
        assert_eq!(combined_score(-0.8, &full, 100.0, 1.0).unwrap(), 1.0);
        assert!(combined_score(0.5, &c, 100.0, 1.2).is_err());
        let scored = ScoredSpan::new(c, 0.5, 100.0, 0.2).unwrap();
        assert_eq!(scored.score(), combined_score(0.5, &c, 100.0, 0.2).unwrap());
    }

    #[test]
    fn span_score_is_row_mean() {
        // caption (1,0); rewrites chosen to give cosines 0.2, 0.4, 0.9
        let cap = e(&[1.0, 0.0]);
        let rw: Vec<Embedding> = [0.2f64, 0.4, 0.9]
            .iter()
            .map(|c| e(&[*c, (1.0 - c * c).sqrt()]))
            .collect();
        let s = span_score_from_embeddings(&cap, &rw).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        let single = span_score_from_embeddings(&cap, &rw[1..2]).unwrap();
        assert!((single - cosine(&cap, &rw[1]).unwrap()).abs() < 1e-15);
    }

    #[tokio::test]
    async fn span_score_identical_text_is_one() {
        let b = SyntheticBackend::new(Arc::default());
        let d = DebiasedQuerySet::new("q", "raw", vec!["man opens door".into(); 2], false).unwrap();
        let cap = Caption::new(CaptionSubject::Span(0), "man opens door", "fp").unwrap();
        let s = span_score(&cap, &d, &b).await.unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[tokio::test]
    async fn frame_scores_shape_and_sentinel() {
        let b = SyntheticBackend::new(Arc::default());
        let d = DebiasedQuerySet::new("q", "raw", vec!["a b".into(), "c d".into(), "e f".into()], false).unwrap();
        let mut caps: Vec<Caption> = (0..33)
            .map(|j| Caption::new(CaptionSubject::Frame(j), "same text", "fp").unwrap())
            .collect();
        let m = frame_scores(&d, &caps, &b).await.unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (3, 33));
        for row in m.rows() {
            assert!(row.iter().all(|v| *v == row[0]));
        }
        caps[4] = Caption::failed(CaptionSubject::Frame(4), "fp");
        let m = frame_scores(&d, &caps, &b).await.unwrap();
        assert!(m.rows().all(|r| r[4] == -1.0));
    }

    #[test]
    fn saliency_is_column_mean() {
        let m = FrameScoreMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(saliency_track(&m), vec![0.5, 0.5]);
        let one = FrameScoreMatrix::new(vec![vec![0.1, 0.7, -0.2]]).unwrap();
        assert_eq!(saliency_track(&one), vec![0.1, 0.7, -0.2]);
    }
}
