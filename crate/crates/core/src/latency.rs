//! Per-window wall-clock measurement of the tracking pipeline.

use crate::csi::CsiWindow;
use crate::error::StageError;
use crate::eval::LatencySummary;
use crate::pipeline::Pipeline;

/// Fewest warm-up windows excluded from the statistics.
pub const MIN_WARMUP: usize = 5;

/// Runs `windows` through `pipeline` `repetitions` times in order and
/// summarizes the per-window latency.
///
/// The first `max(warmup, MIN_WARMUP)` windows of the first pass are excluded,
/// and so is every window processed before the background average is full,
/// since those skip the dynamic stages. The pipeline keeps its state across
/// passes.
pub fn latency_benchmark(
    pipeline: &mut Pipeline,
    windows: &[CsiWindow],
    repetitions: usize,
    warmup: usize,
) -> Result<LatencySummary, StageError> {
    let skip = warmup.max(MIN_WARMUP);
    let mut totals = Vec::new();
    let mut stages = Vec::new();
    let mut seen = 0;
    for _ in 0..repetitions {
        for w in windows {
            let out = pipeline.run_window(w)?;
            seen += 1;
            if seen <= skip || out.timings.get("toi").is_none() {
                continue;
            }
            totals.push(out.timings.total_ms);
            stages.push(out.timings.stages);
        }
    }
    Ok(LatencySummary::from_samples(
        &totals,
        &stages,
        pipeline.config().latency_budget_ms,
    ))
}
