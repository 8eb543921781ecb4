//! Candidate spans from a frame-score matrix.
//!
//! Each rewrite row gets its own threshold: the value range is cut into
//! `eta` equal bins and the threshold is the highest bin edge that at least
//! `kappa` frames reach. Frames above the threshold are grouped into spans,
//! bridging gaps shorter than `tau` frames.

use crate::error::ValidationError;
use crate::model::{CandidateSpan, FrameScoreMatrix, Span, SPAN_EPS};

/// Offset below the row minimum used when no bin edge qualifies, so every
/// frame is marked.
pub const FALLBACK_OFFSET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanGenParams {
    pub eta: usize,
    pub kappa: usize,
    pub tau: usize,
    pub fps: f64,
}

impl SpanGenParams {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.eta == 0 {
            return Err(ValidationError::new("eta", "must be at least 1"));
        }
        if self.kappa == 0 {
            return Err(ValidationError::new("kappa", "must be at least 1"));
        }
        if self.tau == 0 {
            return Err(ValidationError::new("tau", "must be at least 1"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(ValidationError::new("fps", "must be positive"));
        }
        Ok(())
    }
}

/// Threshold for one row of frame scores.
pub fn adaptive_threshold(row: &[f64], eta: usize, kappa: usize) -> Result<f64, ValidationError> {
    if row.is_empty() {
        return Err(ValidationError::new("row", "empty"));
    }
    if eta == 0 || kappa == 0 {
        return Err(ValidationError::new("eta/kappa", "must be at least 1"));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(ValidationError::new("row", "non-finite score"));
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let fallback = min - FALLBACK_OFFSET;
    if max == min {
        return Ok(fallback);
    }
    let range = max - min;
    for k in (0..eta).rev() {
        let edge = min + range * k as f64 / eta as f64;
        let reaching = sorted.len() - sorted.partition_point(|v| *v < edge);
        if reaching >= kappa {
            return Ok(edge);
        }
    }
    Ok(fallback)
}

/// Frame-index runs `[first, last]` of the frames scoring above `gamma`,
/// merged across gaps shorter than `tau` frames.
pub fn marked_runs(row: &[f64], gamma: f64, tau: usize) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (j, v) in row.iter().enumerate() {
        if *v > gamma {
            open = match open {
                Some((first, last)) if j - last - 1 < tau => Some((first, j)),
                Some(run) => {
                    runs.push(run);
                    Some((j, j))
                }
                None => Some((j, j)),
            };
        }
    }
    runs.extend(open);
    runs
}

/// Spans for one row, in seconds.
pub fn segment_row(row: &[f64], gamma: f64, tau: usize, fps: f64) -> Vec<Span> {
    marked_runs(row, gamma, tau)
        .into_iter()
        .filter_map(|(first, last)| Span::new(first as f64 / fps, (last + 1) as f64 / fps).ok())
        .collect()
}

/// Union of the per-row spans, clipped to the video, de-duplicated (the
/// lowest rewrite index wins) and ordered by rewrite index then start.
pub fn generate(
    scores: &FrameScoreMatrix,
    params: &SpanGenParams,
    duration_s: f64,
) -> Result<Vec<CandidateSpan>, ValidationError> {
    params.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(ValidationError::new("duration_s", "must be positive"));
    }
    let mut out: Vec<CandidateSpan> = Vec::new();
    for (i, row) in scores.rows().enumerate() {
        let gamma = adaptive_threshold(row, params.eta, params.kappa)?;
        for span in segment_row(row, gamma, params.tau, params.fps) {
            let end = span.end().min(duration_s);
            if end - span.start() <= SPAN_EPS {
                continue;
            }
            let clipped = Span::new(span.start(), end)?;
            if out.iter().any(|c| c.span.approx_eq(&clipped)) {
                continue;
            }
            out.push(CandidateSpan::new(clipped, i, duration_s)?);
        }
    }
    Ok(out)
}
