//! Moment retrieval and highlight detection metrics.
//!
//! IoU thresholds use `>=`. Average precision uses greedy rank-order
//! matching (each ground-truth span matched at most once) and the
//! interpolated precision envelope.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::model::Span;
use crate::selection::temporal_iou;

/// Ground-truth saliency at or above this counts as relevant.
pub const SALIENCY_BAR: u32 = 4;

/// Corpus count below which a content word is rare.
pub const RARE_WORD_COUNT: usize = 10;

pub const R1_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// `0.50, 0.55, ..., 0.95`.
pub fn map_grid() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// One predicted span with its ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "(f64, f64, f64)", try_from = "(f64, f64, f64)")]
pub struct RankedSpan {
    pub span: Span,
    pub score: f64,
}

impl TryFrom<(f64, f64, f64)> for RankedSpan {
    type Error = ValidationError;

    fn try_from((s, e, score): (f64, f64, f64)) -> Result<Self, Self::Error> {
        if !score.is_finite() {
            return Err(ValidationError::new("score", "not finite"));
        }
        Ok(Self { span: Span::new(s, e)?, score })
    }
}

impl From<RankedSpan> for (f64, f64, f64) {
    fn from(r: RankedSpan) -> Self {
        (r.span.start(), r.span.end(), r.score)
    }
}

/// Predictions sorted by score, highest first; equal scores keep input order.
pub fn by_rank(predictions: &[RankedSpan]) -> Vec<RankedSpan> {
    let mut v = predictions.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v
}

fn top1(predictions: &[RankedSpan]) -> Option<RankedSpan> {
    by_rank(predictions).first().copied()
}

/// Best IoU of `span` against any ground-truth span.
pub fn best_iou(span: &Span, gt: &[Span]) -> f64 {
    gt.iter().map(|g| temporal_iou(span, g)).fold(0.0, f64::max)
}

/// 1.0 when the top-ranked prediction reaches IoU `n` with some gt span.
pub fn r1_query(predictions: &[RankedSpan], gt: &[Span], n: f64) -> f64 {
    match top1(predictions) {
        Some(p) if best_iou(&p.span, gt) >= n => 1.0,
        _ => 0.0,
    }
}

pub fn miou_query(predictions: &[RankedSpan], gt: &[Span]) -> f64 {
    top1(predictions).map_or(0.0, |p| best_iou(&p.span, gt))
}

/// Interpolated average precision of a ranked list of hit/miss flags
/// against `n_relevant` positives.
pub fn interpolated_ap(hits: &[bool], n_relevant: usize) -> f64 {
    if n_relevant == 0 {
        return 0.0;
    }
    let mut mrec = vec![0.0];
    let mut mprec = vec![0.0];
    let mut tp = 0usize;
    for (i, hit) in hits.iter().enumerate() {
        tp += *hit as usize;
        mrec.push(tp as f64 / n_relevant as f64);
        mprec.push(tp as f64 / (i + 1) as f64);
    }
    mrec.push(1.0);
    mprec.push(0.0);
    for i in (0..mprec.len() - 1).rev() {
        mprec[i] = mprec[i].max(mprec[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mprec[i])
        .sum()
}

/// Average precision of one query's predictions at IoU threshold `m`.
pub fn average_precision(predictions: &[RankedSpan], gt: &[Span], m: f64) -> f64 {
    let mut matched = vec![false; gt.len()];
    let hits: Vec<bool> = by_rank(predictions)
        .iter()
        .map(|p| {
            let best = gt
                .iter()
                .enumerate()
                .filter(|(i, _)| !matched[*i])
                .map(|(i, g)| (i, temporal_iou(&p.span, g)))
                .filter(|(_, iou)| *iou >= m)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((i, _)) => {
                    matched[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    interpolated_ap(&hits, gt.len())
}

/// Highlight hit: is the clip with the highest predicted saliency relevant?
pub fn hit_at_1(predicted: &[f64], gt: &[u32]) -> Result<f64, ValidationError> {
    check_saliency(predicted, gt)?;
    let mut best = 0;
    for (i, v) in predicted.iter().enumerate() {
        if *v > predicted[best] {
            best = i;
        }
    }
    Ok(if gt[best] >= SALIENCY_BAR { 1.0 } else { 0.0 })
}

/// Highlight AP; `None` when the video has no relevant clip.
pub fn saliency_ap(predicted: &[f64], gt: &[u32]) -> Result<Option<f64>, ValidationError> {
    check_saliency(predicted, gt)?;
    let relevant = gt.iter().filter(|g| **g >= SALIENCY_BAR).count();
    if relevant == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|a, b| predicted[*b].total_cmp(&predicted[*a]));
    let hits: Vec<bool> = order.iter().map(|&i| gt[i] >= SALIENCY_BAR).collect();
    Ok(Some(interpolated_ap(&hits, relevant)))
}

fn check_saliency(predicted: &[f64], gt: &[u32]) -> Result<(), ValidationError> {
    if predicted.len() != gt.len() {
        return Err(ValidationError::new(
            "saliency",
            format!("{} predicted clips vs {} labelled", predicted.len(), gt.len()),
        ));
    }
    if predicted.is_empty() {
        return Err(ValidationError::new("saliency", "no clips"));
    }
    Ok(())
}

/// Everything needed to score one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEval {
    pub qid: String,
    pub predictions: Vec<RankedSpan>,
    pub gt_spans: Vec<Span>,
    /// Predicted per-clip saliency and dense ground truth, when both exist.
    pub saliency: Option<(Vec<f64>, Vec<u32>)>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn with_gt(queries: &[QueryEval]) -> impl Iterator<Item = &QueryEval> {
    queries.iter().filter(|q| !q.gt_spans.is_empty())
}

/// Mean of [`r1_query`] over queries that have ground truth.
pub fn r1_at(queries: &[QueryEval], n: f64) -> f64 {
    mean(with_gt(queries).map(|q| r1_query(&q.predictions, &q.gt_spans, n)))
}

pub fn miou(queries: &[QueryEval]) -> f64 {
    mean(with_gt(queries).map(|q| miou_query(&q.predictions, &q.gt_spans)))
}

pub fn map_at(queries: &[QueryEval], m: f64) -> f64 {
    mean(with_gt(queries).map(|q| average_precision(&q.predictions, &q.gt_spans, m)))
}

pub fn map_avg(queries: &[QueryEval]) -> f64 {
    mean(map_grid().iter().map(|m| map_at(queries, *m)))
}

/// Mean HIT@1 over queries with saliency; `None` when there are none.
pub fn mean_hit_at_1(queries: &[QueryEval]) -> Result<Option<f64>, ValidationError> {
    let vals = queries
        .iter()
        .filter_map(|q| q.saliency.as_ref())
        .map(|(p, g)| hit_at_1(p, g))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((!vals.is_empty()).then(|| mean(vals)))
}

/// Mean highlight AP over queries with at least one relevant clip.
pub fn vhd_map(queries: &[QueryEval]) -> Result<Option<f64>, ValidationError> {
    let mut vals = Vec::new();
    for (p, g) in queries.iter().filter_map(|q| q.saliency.as_ref()) {
        vals.extend(saliency_ap(p, g)?);
    }
    Ok((!vals.is_empty()).then(|| mean(vals)))
}

/// Ceiling reachable by a perfect ranker over a fixed candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBound {
    pub r1: BTreeMap<String, f64>,
    pub miou: f64,
}

/// Picks, per query, the candidate with the highest IoU against the ground
/// truth and evaluates R1 and mIoU on that choice.
pub fn oracle_bound(candidates: &[(Vec<Span>, Vec<Span>)], r1_thresholds: &[f64]) -> OracleBound {
    let picked: Vec<QueryEval> = candidates
        .iter()
        .map(|(cands, gt)| {
            let best = cands
                .iter()
                .map(|c| (c, best_iou(c, gt)))
                .fold(None::<(&Span, f64)>, |acc, (c, iou)| match acc {
                    Some((_, b)) if b >= iou => acc,
                    _ => Some((c, iou)),
                });
            QueryEval {
                qid: String::new(),
                predictions: best
                    .map(|(c, _)| RankedSpan { span: *c, score: 1.0 })
                    .into_iter()
                    .collect(),
                gt_spans: gt.clone(),
                saliency: None,
            }
        })
        .collect();
    OracleBound {
        r1: r1_thresholds
            .iter()
            .map(|n| (threshold_key(*n), r1_at(&picked, *n)))
            .collect(),
        miou: miou(&picked),
    }
}

const STOPWORDS: &[&str] = &[
    "the", "and", "are", "was", "were", "with", "his", "her", "their", "they", "them", "she", "him",
    "you", "your", "this", "that", "these", "those", "then", "than", "from", "into", "onto", "for",
    "while", "has", "have", "had", "been", "being", "its", "who", "what", "when", "where", "which",
    "there", "here", "out", "off", "over", "under", "some", "other", "another", "one", "two",
    "after", "before", "again", "also", "just", "not", "can", "will", "all", "any", "each", "more",
    "most", "very", "but", "about", "through", "our", "himself", "herself", "themselves",
    "something", "someone",
];

/// Lowercased words of length three or more that are not stopwords.
pub fn content_words(text: &str) -> impl Iterator<Item = String> + '_ {
    words(text).filter(|w| w.chars().count() >= 3 && !STOPWORDS.contains(&w.as_str()))
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
}

/// Occurrences of each content word across `corpus`.
pub fn word_counts<'a>(corpus: impl IntoIterator<Item = &'a str>) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for text in corpus {
        for w in content_words(text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Whether the first rewrite looks like a spelling or grammar repair of
/// the raw query: some raw word was replaced by a close variant (same
/// first letter, edit distance 1 or 2) that the raw query does not contain.
pub fn looks_corrected(raw: &str, rewrite: &str) -> bool {
    let raw_words: Vec<String> = words(raw).collect();
    let new_words: Vec<String> = words(rewrite).collect();
    if raw_words == new_words {
        return false;
    }
    raw_words
        .iter()
        .filter(|w| w.chars().count() >= 3 && !new_words.contains(w))
        .any(|w| {
            new_words.iter().filter(|n| !raw_words.contains(n)).any(|n| {
                if w.chars().next() != n.chars().next() {
                    return false;
                }
                let d = strsim::levenshtein(w, n);
                (1..=2).contains(&d) && d < w.chars().count()
            })
        })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCategory {
    pub rare: bool,
    pub error: bool,
}

impl QueryCategory {
    pub fn biased(&self) -> bool {
        self.rare || self.error
    }

    pub fn common(&self) -> bool {
        !self.biased()
    }
}

/// Categorizes each `(raw query, first rewrite)` against the corpus of all
/// raw queries in the split.
pub fn categorize_queries(queries: &[(&str, Option<&str>)]) -> Vec<QueryCategory> {
    let counts = word_counts(queries.iter().map(|(raw, _)| *raw));
    queries
        .iter()
        .map(|(raw, rewrite)| QueryCategory {
            rare: content_words(raw).any(|w| counts.get(&w).copied().unwrap_or(0) < RARE_WORD_COUNT),
            error: rewrite.is_some_and(|r| looks_corrected(raw, r)),
        })
        .collect()
}

/// Metric values for a set of queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub r1: BTreeMap<String, f64>,
    pub miou: f64,
    pub map: BTreeMap<String, f64>,
    pub map_avg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vhd_map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleBound>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub categories: BTreeMap<String, EvalReport>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl EvalReport {
    pub fn compute(queries: &[QueryEval], r1_thresholds: &[f64]) -> Result<Self, ValidationError> {
        Ok(Self {
            n_queries: queries.len(),
            r1: r1_thresholds
                .iter()
                .map(|n| (threshold_key(*n), r1_at(queries, *n)))
                .collect(),
            miou: miou(queries),
            map: map_grid()
                .iter()
                .map(|m| (threshold_key(*m), map_at(queries, *m)))
                .collect(),
            map_avg: map_avg(queries),
            hit_at_1: mean_hit_at_1(queries)?,
            vhd_map: vhd_map(queries)?,
            oracle: None,
            categories: BTreeMap::new(),
        })
    }

    /// Adds rare / error / biased / common breakdowns; `categories` is
    /// parallel to `queries`.
    pub fn with_categories(
        mut self,
        queries: &[QueryEval],
        categories: &[QueryCategory],
        r1_thresholds: &[f64],
    ) -> Result<Self, ValidationError> {
        if queries.len() != categories.len() {
            return Err(ValidationError::new("categories", "one category per query required"));
        }
        type Filter = fn(&QueryCategory) -> bool;
        let filters: [(&str, Filter); 4] = [
            ("rare", |c| c.rare),
            ("error", |c| c.error),
            ("biased", QueryCategory::biased),
            ("common", QueryCategory::common),
        ];
        for (name, keep) in filters {
            let subset: Vec<QueryEval> = queries
                .iter()
                .zip(categories)
                .filter(|(_, c)| keep(c))
                .map(|(q, _)| q.clone())
                .collect();
            self.categories
                .insert(name.to_string(), EvalReport::compute(&subset, r1_thresholds)?);
        }
        Ok(self)
    }

    /// Aligned plain-text table, one metric per row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![("queries".into(), self.n_queries.to_string())];
        for (k, v) in &self.r1 {
            rows.push((format!("R1@{k}"), pct(*v)));
        }
        rows.push(("mIoU".into(), pct(self.miou)));
        for (k, v) in &self.map {
            rows.push((format!("mAP@{k}"), pct(*v)));
        }
        rows.push(("mAP@avg".into(), pct(self.map_avg)));
        if let Some(v) = self.hit_at_1 {
            rows.push(("HIT@1".into(), pct(v)));
        }
        if let Some(v) = self.vhd_map {
            rows.push(("VHD mAP".into(), pct(v)));
        }
        if let Some(o) = &self.oracle {
            for (k, v) in &o.r1 {
                rows.push((format!("oracle R1@{k}"), pct(*v)));
            }
            rows.push(("oracle mIoU".into(), pct(o.miou)));
        }
        for (name, sub) in &self.categories {
            rows.push((format!("[{name}] queries"), sub.n_queries.to_string()));
            if sub.n_queries == 0 {
                continue;
            }
            for (k, v) in &sub.r1 {
                rows.push((format!("[{name}] R1@{k}"), pct(*v)));
            }
            rows.push((format!("[{name}] mIoU"), pct(sub.miou)));
            rows.push((format!("[{name}] mAP@avg"), pct(sub.map_avg)));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>7}");
        }
        out
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}
