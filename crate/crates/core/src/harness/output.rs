//! Output files: `trace.csv`, `summary.json`, and `histogram.csv`. Floats
//! are written with shortest round-trip formatting so reruns are
//! byte-identical.

use super::config::ExperimentConfig;
use super::metrics::{aggregate, Aggregates, ReplicateResult};
use serde::Serialize;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    aggregates: Aggregates,
}

pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    reps: &[ReplicateResult],
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut trace = std::fs::File::create(dir.join("trace.csv"))?;
    writeln!(trace, "replicate,k,error_norm,updates_cum")?;
    for r in reps {
        for row in &r.rows {
            writeln!(
                trace,
                "{},{},{},{}",
                r.replicate, row.k, row.error_norm, row.updates_cum
            )?;
        }
    }

    let aggregates = aggregate(reps);
    let summary = Summary {
        config: cfg,
        aggregates,
    };
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialization"),
    )?;

    let mut hist = std::fs::File::create(dir.join("histogram.csv"))?;
    writeln!(hist, "neighbors,count,fraction")?;
    let bins = reps
        .iter()
        .map(|r| r.neighbor_hist.len())
        .max()
        .unwrap_or(0);
    let total: u64 = reps.iter().map(|r| r.agent_steps).sum();
    for b in 0..bins {
        let count: u64 = reps
            .iter()
            .map(|r| r.neighbor_hist.get(b).copied().unwrap_or(0))
            .sum();
        let fraction = if total == 0 {
            0.0
        } else {
            count as f64 / total as f64
        };
        writeln!(hist, "{b},{count},{fraction}")?;
    }
    Ok(())
}
