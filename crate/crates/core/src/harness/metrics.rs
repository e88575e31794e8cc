//! Per-replicate traces and cross-replicate aggregates.

use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub error_norm: f64,
    /// Total agent updates performed up to and including step `k`.
    pub updates_cum: u64,
}

#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub rows: Vec<TraceRow>,
    pub final_error: f64,
    pub mean_updates_per_agent: f64,
    /// Histogram of neighbor counts over agent-steps (mobile runs only).
    pub neighbor_hist: Vec<u64>,
    pub agent_steps: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregates {
    pub final_errors: Vec<f64>,
    pub mean_final_error: f64,
    pub max_final_error: f64,
    pub mean_updates_per_agent: f64,
    /// Pooled neighbor-count fractions over all replicates; empty for
    /// static algorithms.
    pub neighbor_fractions: Vec<f64>,
}

pub fn aggregate(reps: &[ReplicateResult]) -> Aggregates {
    let final_errors: Vec<f64> = reps.iter().map(|r| r.final_error).collect();
    let n = final_errors.len().max(1) as f64;
    let mean_final_error = final_errors.iter().sum::<f64>() / n;
    let max_final_error = final_errors.iter().cloned().fold(0.0, f64::max);
    let mean_updates_per_agent = reps.iter().map(|r| r.mean_updates_per_agent).sum::<f64>() / n;

    let bins = reps
        .iter()
        .map(|r| r.neighbor_hist.len())
        .max()
        .unwrap_or(0);
    let mut pooled = vec![0u64; bins];
    let mut total = 0u64;
    for r in reps {
        for (b, c) in r.neighbor_hist.iter().enumerate() {
            pooled[b] += c;
        }
        total += r.agent_steps;
    }
    let neighbor_fractions = if total == 0 {
        Vec::new()
    } else {
        pooled.iter().map(|c| *c as f64 / total as f64).collect()
    };

    Aggregates {
        final_errors,
        mean_final_error,
        max_final_error,
        mean_updates_per_agent,
        neighbor_fractions,
    }
}
