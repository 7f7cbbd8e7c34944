//! Recognition and endpointing metrics, the threshold grid search and the
//! latency/accuracy tradeoff curve.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::UtteranceRecord;
use crate::error::{Error, Result};
use crate::runtime::{fmt_sig9, replay, run_session, Mode, SessionTrace, StreamingModel, Thresholds};

/// Error counts and percentages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub wer: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub sub_rate: f64,
    pub deletions: usize,
    pub insertions: usize,
    pub substitutions: usize,
    pub ref_words: usize,
}

impl WerBreakdown {
    pub fn from_counts(deletions: usize, insertions: usize, substitutions: usize, ref_words: usize) -> Result<Self> {
        if ref_words == 0 {
            return Err(Error::Invalid("WER is undefined for an empty reference".into()));
        }
        let pct = |c: usize| 100.0 * c as f64 / ref_words as f64;
        Ok(WerBreakdown {
            wer: pct(deletions + insertions + substitutions),
            del_rate: pct(deletions),
            ins_rate: pct(insertions),
            sub_rate: pct(substitutions),
            deletions,
            insertions,
            substitutions,
            ref_words,
        })
    }

    pub fn errors(&self) -> usize {
        self.deletions + self.insertions + self.substitutions
    }
}

/// Edit counts `(deletions, insertions, substitutions)` from one minimal
/// Levenshtein alignment, backtracking with precedence
/// substitution/match > deletion > insertion.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> (usize, usize, usize) {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut del, mut ins, mut sub) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let miss = reference[i - 1] != hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(miss) {
                sub += usize::from(miss);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    (del, ins, sub)
}

pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<WerBreakdown> {
    let (d, i, s) = edit_counts(reference, hyp);
    WerBreakdown::from_counts(d, i, s, reference.len())
}

/// Pooled WER over `(reference, hypothesis)` pairs.
pub fn corpus_wer<'a, T: PartialEq + 'a>(pairs: impl IntoIterator<Item = (&'a [T], &'a [T])>) -> Result<WerBreakdown> {
    let (mut d, mut i, mut s, mut n) = (0, 0, 0, 0);
    for (r, h) in pairs {
        let (a, b, c) = edit_counts(r, h);
        d += a;
        i += b;
        s += c;
        n += r.len();
    }
    WerBreakdown::from_counts(d, i, s, n)
}

/// Endpoint latency of one short-query session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latency {
    pub ms: i64,
    /// Endpoint came before the speaker finished.
    pub cutoff: bool,
    /// False when no endpoint was declared and the sentinel was used.
    pub endpointed: bool,
}

/// `endpoint − end of last word`. Without an endpoint the utterance end
/// stands in for it.
pub fn endpoint_latency(trace: &SessionTrace, utt: &UtteranceRecord) -> Result<Latency> {
    let gt = utt
        .speech_end_ms()
        .ok_or_else(|| Error::Invalid(format!("utterance {} has no speech", utt.id)))?;
    let (end, endpointed) = match trace.endpoint_ms() {
        Some(e) => (e, true),
        None => (utt.duration_ms(), false),
    };
    let ms = end as i64 - gt as i64;
    Ok(Latency {
        ms,
        cutoff: ms < 0,
        endpointed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub latencies: Vec<i64>,
    pub ep50: i64,
    pub ep90: i64,
    pub cutoff_count: usize,
}

/// Nearest-rank percentile of an ascending list: element
/// `ceil(p·n/100) − 1`.
pub fn nearest_rank(sorted: &[i64], p: u32) -> Result<i64> {
    if sorted.is_empty() {
        return Err(Error::Invalid("percentile of an empty list".into()));
    }
    if p == 0 || p > 100 {
        return Err(Error::Invalid(format!("percentile {p} outside (0, 100]")));
    }
    let rank = (p as usize * sorted.len()).div_ceil(100);
    Ok(sorted[rank - 1])
}

pub fn latency_stats(latencies: &[i64]) -> Result<LatencyStats> {
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    Ok(LatencyStats {
        ep50: nearest_rank(&sorted, 50)?,
        ep90: nearest_rank(&sorted, 90)?,
        cutoff_count: latencies.iter().filter(|&&l| l < 0).count(),
        latencies: latencies.to_vec(),
    })
}

/// Fraction of frames that reached the recogniser.
pub fn speech_pct(traces: &[SessionTrace]) -> Result<f64> {
    let total: usize = traces.iter().map(|t| t.rows.len()).sum();
    if total == 0 {
        return Err(Error::Invalid("speech_pct over zero frames".into()));
    }
    let kept: usize = traces.iter().map(|t| t.unfiltered_frames()).sum();
    Ok(kept as f64 / total as f64)
}

/// End-of-query thresholds to search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub vad: f64,
    pub eoq: Vec<f64>,
    pub eos: Vec<f64>,
    pub wait_ms: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            vad: 0.5,
            // 1.0 disables the acoustic signal and 0.0 the decoder signal
            eoq: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0],
            eos: vec![0.0, 0.1, 0.3, 0.7, 1.2, 2.0],
            wait_ms: vec![0, 30, 60, 90, 120, 180],
        }
    }
}

impl SweepGrid {
    /// Threshold tuples in grid order (eoq outermost, wait innermost).
    pub fn points(&self) -> Vec<Thresholds> {
        let mut out = Vec::with_capacity(self.eoq.len() * self.eos.len() * self.wait_ms.len());
        for &eoq in &self.eoq {
            for &eos in &self.eos {
                for &wait_ms in &self.wait_ms {
                    out.push(Thresholds {
                        vad: self.vad,
                        eoq,
                        eos,
                        wait_ms,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub thresholds: Thresholds,
    pub wer: WerBreakdown,
    pub latency: LatencyStats,
    pub speech_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Index into `points` of the selected operating point, if any meets the
    /// budget.
    pub selected: Option<usize>,
    pub wer_budget: f64,
}

impl SweepResult {
    pub fn selected_point(&self) -> Result<&SweepPoint> {
        match self.selected {
            Some(i) => Ok(&self.points[i]),
            None => Err(Error::BudgetUnmet {
                budget: self.wer_budget,
                best_wer: self.points.iter().map(|p| p.wer.wer).fold(f64::INFINITY, f64::min),
            }),
        }
    }
}

/// Scores one set of short-query traces against their utterances.
pub fn score_short_queries(traces: &[SessionTrace], utts: &[&UtteranceRecord]) -> Result<(WerBreakdown, LatencyStats, f64)> {
    let lats = traces
        .iter()
        .zip(utts)
        .map(|(t, u)| endpoint_latency(t, u).map(|l| l.ms))
        .collect::<Result<Vec<_>>>()?;
    let w = corpus_wer(
        traces
            .iter()
            .zip(utts)
            .map(|(t, u)| (u.target_tokens.as_slice(), t.hypothesis.as_slice())),
    )?;
    Ok((w, latency_stats(&lats)?, speech_pct(traces)?))
}

/// Grid search from traces recorded with end-of-query disabled.
pub fn sweep_traces(full: &[SessionTrace], utts: &[&UtteranceRecord], grid: &SweepGrid, wer_budget: f64) -> Result<SweepResult> {
    let ths = grid.points();
    if ths.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    if full.is_empty() || full.len() != utts.len() {
        return Err(Error::Invalid(format!("{} traces for {} utterances", full.len(), utts.len())));
    }
    let mut points = Vec::with_capacity(ths.len());
    for th in ths {
        let traces = full.iter().map(|t| replay(t, &th)).collect::<Result<Vec<_>>>()?;
        let (wer, latency, sp) = score_short_queries(&traces, utts)?;
        points.push(SweepPoint {
            thresholds: th,
            wer,
            latency,
            speech_pct: sp,
        });
    }
    let selected = select_point(&points, wer_budget);
    Ok(SweepResult {
        points,
        selected,
        wer_budget,
    })
}

/// Lexicographically smallest `(ep50, ep90)` among points within budget;
/// the earliest in grid order wins ties.
pub fn select_point(points: &[SweepPoint], wer_budget: f64) -> Option<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.wer.wer <= wer_budget)
        .min_by_key(|(_, p)| (p.latency.ep50, p.latency.ep90))
        .map(|(i, _)| i)
}

/// Runs every utterance once with end-of-query disabled and sweeps the grid
/// by replay.
pub fn sweep<M: StreamingModel>(model: &M, utts: &[&UtteranceRecord], grid: &SweepGrid, wer_budget: f64) -> Result<SweepResult> {
    let full = full_traces(model, utts, grid.vad)?;
    sweep_traces(&full, utts, grid, wer_budget)
}

pub fn full_traces<M: StreamingModel>(model: &M, utts: &[&UtteranceRecord], vad: f64) -> Result<Vec<SessionTrace>> {
    utts.iter()
        .map(|u| run_session(model, u, Mode::ShortQuery, Thresholds::never_ending(vad)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub wer: f64,
    pub ep50_ms: i64,
}

/// Lower envelope of `(wer, ep50)`: ascending WER, strictly decreasing
/// latency, so every point beats all cheaper-WER points.
pub fn pareto_envelope(pairs: &[(f64, i64)]) -> Vec<CurvePoint> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<CurvePoint> = Vec::new();
    for (wer, ep50) in sorted {
        if out.last().is_none_or(|last| ep50 < last.ep50_ms) {
            out.push(CurvePoint { wer, ep50_ms: ep50 });
        }
    }
    out
}

pub fn tradeoff_curve(points: &[SweepPoint]) -> Vec<CurvePoint> {
    let pairs: Vec<(f64, i64)> = points.iter().map(|p| (p.wer.wer, p.latency.ep50)).collect();
    pareto_envelope(&pairs)
}

pub const SWEEP_COLUMNS: &str = "theta_eoq,theta_eos,w_ms,wer,del,ins,sub,ep50_ms,ep90_ms,speech_pct,cutoffs";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = format!("{SWEEP_COLUMNS}\n");
    for p in points {
        let t = p.thresholds;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_sig9(t.eoq),
            fmt_sig9(t.eos),
            t.wait_ms,
            fmt_sig9(p.wer.wer),
            fmt_sig9(p.wer.del_rate),
            fmt_sig9(p.wer.ins_rate),
            fmt_sig9(p.wer.sub_rate),
            p.latency.ep50,
            p.latency.ep90,
            fmt_sig9(p.speech_pct),
            p.latency.cutoff_count,
        );
    }
    out
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("wer,ep50_ms\n");
    for c in curve {
        let _ = writeln!(out, "{},{}", fmt_sig9(c.wer), c.ep50_ms);
    }
    out
}
