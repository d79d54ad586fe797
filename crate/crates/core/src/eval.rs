//! Error metrics against ground truth: body-compensated distance, per-frame
//! optimal assignment, percentiles and latency summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::assign;
use crate::error::EvalError;
use crate::geometry::Point2;
use crate::gmphd::TrackSet;
use crate::simulator::TruthRecord;

/// Distance from `estimate` to the circle of radius `r_h` around `truth`,
/// zero inside the circle.
pub fn compensated_error(estimate: &Point2, truth: &Point2, r_h: f64) -> f64 {
    let d = (estimate[0] - truth[0]).hypot(estimate[1] - truth[1]);
    (d - r_h).max(0.0)
}

/// Linearly interpolated percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub mean: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p95: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let mean = if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
        Self {
            mean,
            p50: percentile(&s, 50.0),
            p75: percentile(&s, 75.0),
            p90: percentile(&s, 90.0),
            p95: percentile(&s, 95.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub t: f64,
    pub truth_id: u32,
    pub label: u32,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CardinalityStats {
    pub frames: usize,
    pub correct_fraction: f64,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub mean_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub windows: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub budget_ms: f64,
    pub over_budget: usize,
    pub stages: BTreeMap<String, StageSummary>,
    /// `(upper bin edge in ms, count)` with 10 ms bins.
    pub histogram: Vec<(f64, usize)>,
}

impl LatencySummary {
    /// `totals` are per-window totals, `stages` per-window `(name, ms)` lists.
    pub fn from_samples(totals: &[f64], stages: &[Vec<(String, f64)>], budget_ms: f64) -> Self {
        let mut s = totals.to_vec();
        s.sort_by(f64::total_cmp);
        let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for w in stages {
            for (name, ms) in w {
                per.entry(name.clone()).or_default().push(*ms);
            }
        }
        let stages = per
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by(f64::total_cmp);
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                (k, StageSummary { mean_ms: mean, p99_ms: percentile(&v, 99.0) })
            })
            .collect();
        let bin = 10.0;
        let mut histogram: Vec<(f64, usize)> = Vec::new();
        for &x in &s {
            let b = ((x / bin).floor() as usize + 1) as f64 * bin;
            match histogram.last_mut() {
                Some((edge, n)) if *edge == b => *n += 1,
                _ => histogram.push((b, 1)),
            }
        }
        Self {
            windows: s.len(),
            mean_ms: if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 },
            p50_ms: percentile(&s, 50.0),
            p99_ms: percentile(&s, 99.0),
            max_ms: s.last().copied().unwrap_or(f64::NAN),
            budget_ms,
            over_budget: s.iter().filter(|&&x| x > budget_ms).count(),
            stages,
            histogram,
        }
    }

    /// Stage with the largest mean.
    pub fn dominant_stage(&self) -> Option<&str> {
        self.stages
            .iter()
            .max_by(|a, b| a.1.mean_ms.total_cmp(&b.1.mean_ms))
            .map(|(k, _)| k.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub torso_radius: f64,
    pub errors: Vec<ErrorRecord>,
    pub percentiles: Percentiles,
    pub missed: usize,
    pub false_tracks: usize,
    pub cardinality: CardinalityStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencySummary>,
}

impl EvaluationReport {
    pub fn error_values(&self) -> Vec<f64> {
        self.errors.iter().map(|e| e.error).collect()
    }

    /// Empirical CDF points `(error, fraction <= error)`.
    pub fn cdf(&self) -> Vec<(f64, f64)> {
        let mut v = self.error_values();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter().enumerate().map(|(i, &e)| (e, (i + 1) as f64 / n)).collect()
    }
}

/// Groups truth records into frames sorted by time.
fn truth_frames(truth: &[TruthRecord]) -> Vec<(f64, Vec<TruthRecord>)> {
    let mut sorted = truth.to_vec();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.id.cmp(&b.id)));
    let mut out: Vec<(f64, Vec<TruthRecord>)> = Vec::new();
    for r in sorted {
        match out.last_mut() {
            Some((t, v)) if (*t - r.t).abs() < 1e-9 => v.push(r),
            _ => out.push((r.t, vec![r])),
        }
    }
    out
}

/// Scores `tracks` against `truth`. Each track frame is matched to the
/// nearest truth frame in time, which must lie within `tolerance` seconds.
pub fn evaluate(
    tracks: &[TrackSet],
    truth: &[TruthRecord],
    r_h: f64,
    tolerance: f64,
) -> Result<EvaluationReport, EvalError> {
    if tracks.is_empty() {
        return Err(EvalError::Empty("no track frames"));
    }
    let frames = truth_frames(truth);
    if frames.is_empty() {
        return Err(EvalError::Empty("no truth records"));
    }
    let times: Vec<f64> = frames.iter().map(|f| f.0).collect();
    let mut errors = Vec::new();
    let (mut missed, mut false_tracks, mut correct, mut abs_card) = (0, 0, 0, 0usize);
    for ts in tracks {
        let k = times.partition_point(|&t| t < ts.timestamp);
        let best = [k.checked_sub(1), (k < times.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (times[a] - ts.timestamp).abs().total_cmp(&(times[b] - ts.timestamp).abs()))
            .expect("non-empty truth");
        if (times[best] - ts.timestamp).abs() > tolerance {
            return Err(EvalError::Misaligned {
                track_t: ts.timestamp,
                tolerance,
            });
        }
        let gt = &frames[best].1;
        let cost: Vec<Vec<f64>> = ts
            .states
            .iter()
            .map(|s| gt.iter().map(|g| compensated_error(&[s.x, s.y], &[g.x, g.y], r_h)).collect())
            .collect();
        let pairs = assign(&cost);
        for &(i, j) in &pairs {
            errors.push(ErrorRecord {
                t: ts.timestamp,
                truth_id: gt[j].id,
                label: ts.states[i].label,
                error: cost[i][j],
            });
        }
        missed += gt.len() - pairs.len();
        false_tracks += ts.states.len() - pairs.len();
        let diff = ts.states.len().abs_diff(gt.len());
        abs_card += diff;
        if diff == 0 {
            correct += 1;
        }
    }
    let values: Vec<f64> = errors.iter().map(|e| e.error).collect();
    let n = tracks.len();
    Ok(EvaluationReport {
        torso_radius: r_h,
        percentiles: Percentiles::of(&values),
        errors,
        missed,
        false_tracks,
        cardinality: CardinalityStats {
            frames: n,
            correct_fraction: correct as f64 / n as f64,
            mean_abs_error: abs_card as f64 / n as f64,
        },
        latency: None,
    })
}
