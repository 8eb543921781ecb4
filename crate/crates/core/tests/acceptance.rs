//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every oracle here is written from the definitions, without
//! calling the code under test.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vmr_core::backends::synthetic::SyntheticBackend;
use vmr_core::datasets::{
    generate_synthetic, load_dataset, parse_activitynet, parse_charades_sta, parse_qvhighlights,
    serialize_activitynet, serialize_charades_sta, serialize_qvhighlights, ParseMode, SynthConfig,
};
use vmr_core::metrics::{map_grid, oracle_bound, EvalReport, QueryEval, RankedSpan, R1_THRESHOLDS};
use vmr_core::model::{
    CandidateSpan, DatasetKind, FrameScoreMatrix, FpsTable, PipelineConfig, SaliencyLabels, ScoredSpan, Span,
    Temperatures,
};
use vmr_core::run::{evals_from_results, Backends, RunConfig, Runner};
use vmr_core::scoring::combined_score;
use vmr_core::selection::nms;
use vmr_core::span_gen::{adaptive_threshold, generate, marked_runs, SpanGenParams};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn span(s: f64, e: f64) -> Span {
    Span::new(s, e).unwrap()
}

// ---------------------------------------------------------------------------
// Span generation oracles

fn threshold_oracle(row: &[f64], eta: usize, kappa: usize) -> f64 {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return lo - 1e-9;
    }
    let edges: Vec<f64> = (0..eta).map(|k| lo + (hi - lo) * k as f64 / eta as f64).collect();
    for edge in edges.iter().rev() {
        let reaching = row.iter().filter(|v| **v >= *edge).count();
        if reaching >= kappa {
            return *edge;
        }
    }
    lo - 1e-9
}

/// Runs of marked frames; a gap of `tau` or more unmarked frames closes a run.
fn runs_oracle(row: &[f64], gamma: f64, tau: usize) -> Vec<(usize, usize)> {
    let marked: Vec<usize> = (0..row.len()).filter(|&j| row[j] > gamma).collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for j in marked {
        match runs.last_mut() {
            Some(run) if j - run.1 <= tau => run.1 = j,
            _ => runs.push((j, j)),
        }
    }
    runs
}

fn spans_of(runs: &[(usize, usize)], fps: f64) -> Vec<(f64, f64)> {
    runs.iter().map(|(a, b)| (*a as f64 / fps, (*b + 1) as f64 / fps)).collect()
}

fn generated(row: &[f64], eta: usize, kappa: usize, tau: usize) -> Result<Vec<(f64, f64)>, String> {
    let m = FrameScoreMatrix::new(vec![row.to_vec()]).map_err(|e| e.to_string())?;
    let p = SpanGenParams { eta, kappa, tau, fps: 1.0 };
    let c = generate(&m, &p, row.len() as f64).map_err(|e| e.to_string())?;
    Ok(c.iter().map(|c| (c.span.start(), c.span.end())).collect())
}

fn golden_row() -> Vec<f64> {
    let mut row = vec![0.3; 33];
    row[0] = 0.0;
    row[5] = 0.55;
    row[15] = 0.62;
    row[30] = 0.1;
    for j in [9, 10, 11, 20, 21, 23, 24, 25] {
        row[j] = 0.75;
    }
    row[10] = 1.0;
    row[22] = 0.7;
    row
}

fn c1_golden() -> Outcome {
    let row = golden_row();
    let t = Instant::now();
    let gamma = adaptive_threshold(&row, 10, 7).map_err(|e| e.to_string())?;
    let spans = generated(&row, 10, 7, 5)?;
    let elapsed = t.elapsed();
    ensure!(gamma == 0.7, "gamma = {gamma}, expected 0.7");
    ensure!(spans == [(9.0, 12.0), (20.0, 26.0)], "spans {spans:?}");
    ensure!(elapsed < Duration::from_millis(1), "took {elapsed:?}");
    Ok(format!("gamma = 0.7, spans [9,12] [20,26] in {elapsed:?}"))
}

fn c2_span_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked_affine = 0;
    for case in 0..1000 {
        let len = rng.random_range(5..=200);
        let eta = rng.random_range(1..=20);
        let kappa = rng.random_range(1..=len.min(30));
        let tau = rng.random_range(1..=10);
        let row: Vec<f64> = match case % 4 {
            // coarse values make ties and exact edge hits common
            0 => (0..len).map(|_| rng.random_range(-4i32..=4) as f64 / 4.0).collect(),
            _ => (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        };
        let gamma = adaptive_threshold(&row, eta, kappa).map_err(|e| e.to_string())?;
        let want = threshold_oracle(&row, eta, kappa);
        ensure!(gamma.to_bits() == want.to_bits(), "case {case}: gamma {gamma} vs oracle {want}");
        let runs = marked_runs(&row, gamma, tau);
        ensure!(runs == runs_oracle(&row, gamma, tau), "case {case}: runs {runs:?}");
        ensure!(
            generated(&row, eta, kappa, tau)? == spans_of(&runs, 1.0),
            "case {case}: generate disagrees with per-row segmentation"
        );

        // Affine invariance, on a copy snapped to a binary grid and shrunk to
        // [-1/4, 1/4] so every transform below is exact and stays in [-1, 1].
        let snapped: Vec<f64> = row.iter().map(|v| (v * 1024.0).round() / 4096.0).collect();
        let base = generated(&snapped, eta, kappa, tau)?;
        for (scale, shift) in [(4.0, 0.0), (2.0, 0.5), (0.5, -0.5), (1.0, 0.75), (3.0, -0.25)] {
            let moved: Vec<f64> = snapped.iter().map(|v| v * scale + shift).collect();
            let got = generated(&moved, eta, kappa, tau)?;
            ensure!(got == base, "case {case}: x*{scale}+{shift} changed spans {base:?} -> {got:?}");
            checked_affine += 1;
        }
    }
    Ok(format!("1000 rows match the oracle; {checked_affine} affine transforms preserved spans"))
}

// ---------------------------------------------------------------------------
// Metric oracles

/// Annotator scores per clip; `None` marks an unlisted clip.
type ClipLabels = Vec<Option<Vec<u32>>>;

struct RandQuery {
    preds: Vec<(i32, i32, f64)>,
    gt: Vec<(i32, i32)>,
    /// Predicted saliency and per-clip annotator scores (missing clips score 0).
    saliency: Option<(Vec<f64>, ClipLabels)>,
}

fn iou_int(a: (i32, i32), b: (i32, i32)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}

fn ranked(preds: &[(i32, i32, f64)]) -> Vec<(i32, i32)> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|a, b| preds[*b].2.partial_cmp(&preds[*a].2).unwrap().then(a.cmp(b)));
    idx.into_iter().map(|i| (preds[i].0, preds[i].1)).collect()
}

fn top_best_iou(q: &RandQuery) -> f64 {
    match ranked(&q.preds).first() {
        None => 0.0,
        Some(p) => q.gt.iter().map(|g| iou_int(*p, *g)).fold(0.0, f64::max),
    }
}

/// Area under the envelope: each hit contributes 1/R times the best
/// precision reached at or after its rank.
fn ap_from_hits(hits: &[bool], relevant: usize) -> f64 {
    let precision: Vec<f64> = hits
        .iter()
        .scan(0usize, |tp, h| {
            *tp += *h as usize;
            Some(*tp)
        })
        .enumerate()
        .map(|(i, tp)| tp as f64 / (i + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            total += precision[k..].iter().copied().fold(0.0, f64::max);
        }
    }
    total / relevant as f64
}

fn ap_oracle(q: &RandQuery, m: f64) -> f64 {
    let mut used = vec![false; q.gt.len()];
    let mut hits = Vec::new();
    for p in ranked(&q.preds) {
        let mut pick: Option<(usize, f64)> = None;
        for (g, gt) in q.gt.iter().enumerate() {
            let iou = iou_int(p, *gt);
            if used[g] || iou < m {
                continue;
            }
            if pick.is_none_or(|(_, best)| iou > best) {
                pick = Some((g, iou));
            }
        }
        if let Some((g, _)) = pick {
            used[g] = true;
        }
        hits.push(pick.is_some());
    }
    ap_from_hits(&hits, q.gt.len())
}

fn relevance(labels: &[Option<Vec<u32>>]) -> Vec<bool> {
    labels
        .iter()
        .map(|l| l.as_ref().is_some_and(|s| s.iter().any(|v| *v >= 4)))
        .collect()
}

fn hit_oracle(pred: &[f64], labels: &[Option<Vec<u32>>]) -> f64 {
    let mut best = 0;
    for i in 1..pred.len() {
        if pred[i] > pred[best] {
            best = i;
        }
    }
    if relevance(labels)[best] {
        1.0
    } else {
        0.0
    }
}

fn vhd_ap_oracle(pred: &[f64], labels: &[Option<Vec<u32>>]) -> Option<f64> {
    let rel = relevance(labels);
    let n_rel = rel.iter().filter(|r| **r).count();
    if n_rel == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..pred.len()).collect();
    idx.sort_by(|a, b| pred[*b].partial_cmp(&pred[*a]).unwrap().then(a.cmp(b)));
    let hits: Vec<bool> = idx.iter().map(|i| rel[*i]).collect();
    Some(ap_from_hits(&hits, n_rel))
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn random_query(rng: &mut ChaCha8Rng) -> RandQuery {
    let rand_span = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0..28);
        (s, rng.random_range(s + 1..=30))
    };
    let n_gt = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=4) };
    let n_pred = rng.random_range(0..=10);
    let gt = (0..n_gt).map(|_| rand_span(rng)).collect();
    let preds = (0..n_pred)
        .map(|_| {
            let (s, e) = rand_span(rng);
            (s, e, rng.random_range(0..8) as f64 / 8.0)
        })
        .collect();
    let saliency = rng.random_bool(0.6).then(|| {
        let clips = rng.random_range(1..=12);
        let pred = (0..clips).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let labels = (0..clips)
            .map(|_| rng.random_bool(0.7).then(|| (0..3).map(|_| rng.random_range(0..=4)).collect()))
            .collect();
        (pred, labels)
    });
    RandQuery { preds, gt, saliency }
}

fn to_eval(i: usize, q: &RandQuery) -> QueryEval {
    let saliency = q.saliency.as_ref().map(|(pred, labels)| {
        let (clip_ids, scores): (Vec<usize>, Vec<Vec<u32>>) = labels
            .iter()
            .enumerate()
            .filter_map(|(c, l)| l.clone().map(|s| (c, s)))
            .unzip();
        let dense = SaliencyLabels { clip_ids, scores }.dense_max(pred.len());
        (pred.clone(), dense)
    });
    QueryEval {
        qid: i.to_string(),
        predictions: q
            .preds
            .iter()
            .map(|(s, e, score)| RankedSpan { span: span(*s as f64, *e as f64), score: *score })
            .collect(),
        gt_spans: q.gt.iter().map(|(s, e)| span(*s as f64, *e as f64)).collect(),
        saliency,
    }
}

fn c3_metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let mut compared = 0usize;
    for case in 0..500 {
        let n = rng.random_range(1..=5);
        let queries: Vec<RandQuery> = (0..n).map(|_| random_query(&mut rng)).collect();
        let evals: Vec<QueryEval> = queries.iter().enumerate().map(|(i, q)| to_eval(i, q)).collect();
        let report = EvalReport::compute(&evals, &R1_THRESHOLDS).map_err(|e| e.to_string())?;
        let scored: Vec<&RandQuery> = queries.iter().filter(|q| !q.gt.is_empty()).collect();

        let mut expect: Vec<(String, f64, f64)> = Vec::new();
        for t in R1_THRESHOLDS {
            let v: Vec<f64> = scored.iter().map(|q| (top_best_iou(q) >= t) as u8 as f64).collect();
            expect.push((format!("R1@{t}"), report.r1[&format!("{t:.2}")], mean_or_zero(&v)));
        }
        let v: Vec<f64> = scored.iter().map(|q| top_best_iou(q)).collect();
        expect.push(("mIoU".into(), report.miou, mean_or_zero(&v)));
        let mut per_m = Vec::new();
        for k in 0..10 {
            let m = (50 + 5 * k) as f64 / 100.0;
            let v: Vec<f64> = scored.iter().map(|q| ap_oracle(q, m)).collect();
            per_m.push(mean_or_zero(&v));
            expect.push((format!("mAP@{m}"), report.map[&format!("{m:.2}")], mean_or_zero(&v)));
        }
        expect.push(("mAP@avg".into(), report.map_avg, mean_or_zero(&per_m)));
        ensure!(
            close(report.map_avg, report.map.values().sum::<f64>() / map_grid().len() as f64),
            "case {case}: map_avg is not the mean of the grid"
        );

        let sal: Vec<_> = queries.iter().filter_map(|q| q.saliency.as_ref()).collect();
        let hits: Vec<f64> = sal.iter().map(|(p, l)| hit_oracle(p, l)).collect();
        let aps: Vec<f64> = sal.iter().filter_map(|(p, l)| vhd_ap_oracle(p, l)).collect();
        let want_hit = (!hits.is_empty()).then(|| mean_or_zero(&hits));
        let want_vhd = (!aps.is_empty()).then(|| mean_or_zero(&aps));
        let same = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        ensure!(same(report.hit_at_1, want_hit), "case {case}: HIT@1 {:?} vs {want_hit:?}", report.hit_at_1);
        ensure!(same(report.vhd_map, want_vhd), "case {case}: VHD mAP {:?} vs {want_vhd:?}", report.vhd_map);

        for (name, got, want) in &expect {
            ensure!(close(*got, *want), "case {case}: {name} = {got}, oracle {want}");
            ensure!((0.0..=1.0).contains(got), "case {case}: {name} = {got} outside [0, 1]");
        }
        compared += expect.len() + 2;
    }
    Ok(format!("500 instances, {compared} metric values within 1e-9"))
}

// ---------------------------------------------------------------------------
// NMS oracle

fn nms_oracle(items: &[(f64, f64, f64)], sigma: f64) -> Vec<(f64, f64, f64)> {
    let better = |a: &(f64, f64, f64), b: &(f64, f64, f64)| {
        a.2 > b.2 || (a.2 == b.2 && (a.0 < b.0 || (a.0 == b.0 && a.1 - a.0 > b.1 - b.0)))
    };
    let iou = |a: &(f64, f64, f64), b: &(f64, f64, f64)| {
        let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
        inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
    };
    let mut pool = items.to_vec();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            if better(&pool[i], &pool[best]) {
                best = i;
            }
        }
        let top = pool.remove(best);
        pool.retain(|o| iou(&top, o) <= sigma);
        kept.push(top);
    }
    kept
}

fn c4_nms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let duration = 60.0;
    let mut kept_total = 0;
    for case in 0..1000 {
        let n = rng.random_range(0..=25);
        let sigma = rng.random_range(1..=10) as f64 / 10.0;
        let mut raw = Vec::new();
        let mut seen = BTreeSet::new();
        for _ in 0..n {
            let s = rng.random_range(0..59);
            let e = rng.random_range(s + 1..=60);
            // duplicate (span, score) pairs have no defined order
            if seen.insert((s, e)) {
                raw.push((s as f64, e as f64, rng.random_range(-4i32..=4) as f64 / 4.0));
            }
        }
        let input: Vec<ScoredSpan> = raw
            .iter()
            .map(|(s, e, score)| {
                let c = CandidateSpan::new(span(*s, *e), 0, duration).unwrap();
                ScoredSpan::new(c, *score, duration, 0.0).unwrap()
            })
            .collect();
        let out = nms(input, sigma).map_err(|e| e.to_string())?;
        let tuples: Vec<(f64, f64, f64)> =
            out.iter().map(|s| (s.span().start(), s.span().end(), s.score())).collect();
        ensure!(tuples == nms_oracle(&raw, sigma), "case {case}: differs from greedy oracle");
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                let v = vmr_core::selection::temporal_iou(&a.span(), &b.span());
                ensure!(v <= sigma, "case {case}: kept pair with IoU {v} > {sigma}");
            }
        }
        ensure!(out.windows(2).all(|w| w[0].score() >= w[1].score()), "case {case}: scores increase");
        let again = nms(out.clone(), sigma).map_err(|e| e.to_string())?;
        ensure!(again == out, "case {case}: not idempotent");
        kept_total += out.len();
    }
    Ok(format!("1000 sets, {kept_total} kept spans checked"))
}

// ---------------------------------------------------------------------------
// Pipeline runs

fn runner(seed: u64, n_videos: usize, out: &Path, cache: Option<&Path>) -> Result<(Runner, Arc<SyntheticBackend>), String> {
    let syn = generate_synthetic(&SynthConfig { seed, n_videos, ..SynthConfig::default() }).map_err(|e| e.to_string())?;
    let backend = Arc::new(SyntheticBackend::new(Arc::new(syn.plan.clone())));
    let backends = Backends::synthetic(backend.clone(), cache, 8).map_err(|e| e.to_string())?;
    let config = RunConfig { output_dir: out.to_path_buf(), ..RunConfig::default() };
    Ok((Runner::new(config, syn.to_dataset(), backends), backend))
}

fn c5_synthetic(rt: &tokio::runtime::Runtime) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = Instant::now();
    let (r, _) = runner(2024, 50, dir.path(), None)?;
    ensure!(r.config.pipeline == PipelineConfig::default(), "not running the default pipeline");
    let out = rt.block_on(async {
        let d = r.ensure_debiased(r.config.pipeline.n_d, false).await?;
        let c = r.ensure_frame_captions(false).await?;
        let out = r.retrieve(&r.config.pipeline).await;
        Ok::<_, vmr_core::Error>((d, c, out))
    });
    let (debias, captions, out) = out.map_err(|e| e.to_string())?;
    ensure!(debias.ok() && captions.ok() && out.failures.is_empty(), "failures: {:?}", out.failures);
    let evals = evals_from_results(&r.dataset, &out.results).map_err(|e| e.to_string())?;
    let report = EvalReport::compute(&evals, &R1_THRESHOLDS).map_err(|e| e.to_string())?;
    let sets: Vec<(Vec<Span>, Vec<Span>)> = r
        .dataset
        .queries
        .iter()
        .zip(&out.results)
        .map(|(q, res)| (res.candidates.clone(), q.gt_spans().to_vec()))
        .collect();
    let oracle = oracle_bound(&sets, &R1_THRESHOLDS);
    let elapsed = t.elapsed();
    let (r1, miou, or1) = (report.r1["0.50"], report.miou, oracle.r1["0.50"]);
    let detail = format!("R1@0.5 {r1:.3}, mIoU {miou:.3}, oracle R1@0.5 {or1:.3}, {:.1} s", elapsed.as_secs_f64());
    ensure!(r.dataset.queries.len() == 50, "{} queries", r.dataset.queries.len());
    ensure!(r1 >= 0.9, "{detail}");
    ensure!(miou >= 0.7, "{detail}");
    ensure!(or1 >= r1, "{detail}");
    ensure!(elapsed < Duration::from_secs(30), "{detail}");
    Ok(detail)
}

fn c6_combined_score() -> Outcome {
    let duration = 120.0;
    let mut n = 0;
    for i in 0..10 {
        let lambda = i as f64 / 9.0;
        for j in 0..10 {
            let s = -1.0 + 2.0 * j as f64 / 9.0;
            let (a, b) = (j as f64 * 7.0, j as f64 * 7.0 + 3.0 + i as f64 * 5.5);
            let c = CandidateSpan::new(span(a, b), 0, duration).unwrap();
            let got = combined_score(s, &c, duration, lambda).map_err(|e| e.to_string())?;
            let want = (1.0 - lambda) * s + lambda * ((b - a) / duration);
            ensure!((got - want).abs() <= 1e-12, "lambda {lambda}, s {s}: {got} vs {want}");
            let scored = ScoredSpan::new(c, s, duration, lambda).map_err(|e| e.to_string())?;
            ensure!((scored.score() - want).abs() <= 1e-12, "ScoredSpan disagrees at lambda {lambda}");
            if i == 0 {
                ensure!(got == s, "lambda 0 gives {got}, expected {s}");
            }
            n += 1;
        }
    }
    Ok(format!("{n} cases within 1e-12"))
}

fn c7_cache_identity(rt: &tokio::runtime::Runtime) -> Outcome {
    let tmp = |_| tempfile::tempdir().map_err(|e| e.to_string());
    let (cache, a, b) = (tmp(0)?, tmp(1)?, tmp(2)?);
    let run = |out: &Path| -> Result<(Vec<u8>, usize), String> {
        let (r, backend) = runner(77, 10, out, Some(cache.path()))?;
        let summary = rt.block_on(r.cmd_retrieve()).map_err(|e| e.to_string())?;
        ensure!(summary.ok(), "failures: {:?}", summary.failures);
        let bytes = std::fs::read(out.join("predictions.jsonl")).map_err(|e| e.to_string())?;
        Ok((bytes, backend.total_calls()))
    };
    let (cold, cold_calls) = run(a.path())?;
    let (warm, warm_calls) = run(b.path())?;
    ensure!(cold_calls > 0, "cold run made no backend calls");
    ensure!(warm == cold, "prediction files differ");
    ensure!(warm_calls == 0, "warm run made {warm_calls} backend calls");
    Ok(format!("cold {cold_calls} calls, warm 0 calls, {} identical bytes", warm.len()))
}

fn c8_config_defaults() -> Outcome {
    let p = PipelineConfig::default();
    ensure!(
        (p.n_d, p.kappa, p.tau, p.eta) == (3, 7, 5, 10),
        "n_d/kappa/tau/eta = {:?}",
        (p.n_d, p.kappa, p.tau, p.eta)
    );
    ensure!((p.lambda, p.sigma) == (0.2, 0.9), "lambda/sigma = {:?}", (p.lambda, p.sigma));
    let t = Temperatures { debias: 0.3, frame_caption: 0.2, span_caption: 0.2 };
    ensure!(p.temperatures == t, "temperatures {:?}", p.temperatures);
    ensure!(
        (p.fps.charades_sta, p.fps.activitynet, p.fps.qvhighlights) == (1.0, 1.0, 0.5),
        "fps {:?}",
        p.fps
    );
    ensure!(p.fps.for_dataset(DatasetKind::QvHighlights) == FpsTable::default().qvhighlights, "fps lookup");
    let from_empty = RunConfig::from_toml("", &[]).map_err(|e| e.to_string())?;
    ensure!(from_empty.pipeline == p, "empty config file does not give the defaults");
    ensure!(RunConfig::default().pipeline == p, "RunConfig default pipeline differs");
    Ok("N_d 3, eta 10, kappa 7, tau 5, lambda 0.2, sigma 0.9, temps 0.3/0.2/0.2, fps 1/1/0.5".into())
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn c9_loaders() -> Outcome {
    let load = |kind, name| load_dataset(kind, &fixture(name), ParseMode::Strict).map_err(|e| e.to_string());

    let ch = load(DatasetKind::CharadesSta, "charades.txt")?;
    ensure!(ch.videos.contains_key("Y1BWP"), "Charades fixture lacks Y1BWP");
    let q = &ch.queries[0];
    ensure!(
        q.video_id() == "Y1BWP" && q.gt_spans() == [span(9.0, 12.0)] && q.raw_text() == "person opens a door",
        "first Charades record parsed as {q:?}"
    );
    let again = parse_charades_sta(&serialize_charades_sta(&ch.queries), ParseMode::Strict).map_err(|e| e.to_string())?;
    ensure!(again.queries == ch.queries, "Charades round trip lost data");

    let qv = load(DatasetKind::QvHighlights, "qvh.jsonl")?;
    let text = serialize_qvhighlights(&qv).map_err(|e| e.to_string())?;
    let again = parse_qvhighlights(&text, ParseMode::Strict).map_err(|e| e.to_string())?;
    ensure!(again.queries == qv.queries && again.videos == qv.videos, "QVHighlights round trip lost data");

    let an = load(DatasetKind::ActivityNet, "activitynet.json")?;
    let text = serialize_activitynet(&an).map_err(|e| e.to_string())?;
    let again = parse_activitynet(&text, ParseMode::Strict).map_err(|e| e.to_string())?;
    ensure!(again.queries == an.queries && again.videos == an.videos, "ActivityNet round trip lost data");

    let bad_lines = [
        ("charades", parse_charades_sta("A 1 2##ok\nA 1##short\n", ParseMode::Strict).err().map(|e| e.line), 2),
        (
            "qvhighlights",
            parse_qvhighlights("\n{\"qid\": 1, \"query\": \"q\", \"vid\": \"v\", \"duration\": -3}\n", ParseMode::Strict)
                .err()
                .map(|e| e.line),
            2,
        ),
        (
            "activitynet",
            parse_activitynet(
                "{\n\"a\": {\"duration\": 5, \"timestamps\": [[1, 2]], \"sentences\": [\"x\"]},\n\"b\": {\"duration\": 5, \"timestamps\": [[3, 1]], \"sentences\": [\"y\"]}\n}",
                ParseMode::Strict,
            )
            .err()
            .map(|e| e.line),
            3,
        ),
    ];
    for (name, got, want) in bad_lines {
        ensure!(got == Some(want), "{name}: strict error at line {got:?}, expected {want}");
    }
    Ok(format!(
        "{} + {} + {} records round-trip; strict errors report their lines",
        ch.queries.len(),
        qv.queries.len(),
        an.queries.len()
    ))
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    let criteria: Vec<(&str, Check)> = vec![
        ("span generator golden case", Box::new(c1_golden)),
        ("span generator vs brute-force oracle", Box::new(c2_span_oracle)),
        ("metrics vs brute-force evaluator", Box::new(c3_metrics_oracle)),
        ("NMS properties and greedy oracle", Box::new(c4_nms)),
        ("end-to-end synthetic run", Box::new(|| c5_synthetic(&rt))),
        ("combined score arithmetic", Box::new(c6_combined_score)),
        ("warm-cache determinism", Box::new(|| c7_cache_identity(&rt))),
        ("pipeline config defaults", Box::new(c8_config_defaults)),
        ("dataset loaders", Box::new(c9_loaders)),
    ];
    let limits = [None, Some(5), Some(10), Some(5), Some(30), None, None, None, None];
    let mut failed = 0;
    for (i, ((name, check), limit)) in criteria.iter().zip(limits).enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = t.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(secs)) if elapsed > Duration::from_secs(secs) => {
                Err(format!("took {:.2} s, limit {secs} s", elapsed.as_secs_f64()))
            }
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
