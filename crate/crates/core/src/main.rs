use clap::{Args, Parser, Subcommand};
use locnet::geometry;
use locnet::harness::{run_experiment, write_outputs, ExperimentConfig};
use locnet::mobile::{feasibility_check, Feasibility};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "locnet",
    about = "Distributed range-based localization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config and write trace/summary files.
    Run(RunArgs),
    /// Run an experiment once per value of a swept config field.
    Sweep(SweepArgs),
    /// Self-check the simplex-volume and weight computations against
    /// coordinate-based references on random instances.
    ValidateGeometry {
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Check the anchor-count conditions for a mobile network.
    Feasibility {
        #[arg(long)]
        anchors: usize,
        #[arg(long)]
        agents: usize,
        /// Spatial dimension.
        #[arg(long, default_value_t = 2)]
        dim: usize,
        /// Dimension of the union of agent motion spaces.
        #[arg(long, default_value_t = 0)]
        agent_motion_dim: usize,
        /// Dimension of the union of anchor motion spaces.
        #[arg(long, default_value_t = 0)]
        anchor_motion_dim: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory (default: out/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replicate count.
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    /// Swept field and values, e.g. `algorithm.params.beta=0.01,0.05,0.1`.
    #[arg(long)]
    param: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn fail(code: u8, error: &str, detail: String) -> ExitCode {
    eprintln!("{}", json!({ "error": error, "detail": detail }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::ValidateGeometry { samples, seed } => cmd_validate(samples, seed),
        Command::Feasibility {
            anchors,
            agents,
            dim,
            agent_motion_dim,
            anchor_motion_dim,
        } => {
            let verdict =
                feasibility_check(anchors, agents, agent_motion_dim, anchor_motion_dim, dim);
            let (feasible, reasons) = match verdict {
                Feasibility::Feasible => (true, Vec::new()),
                Feasibility::Infeasible(r) => (false, r),
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "feasible": feasible,
                    "reasons": reasons,
                }))
                .unwrap()
            );
            ExitCode::SUCCESS
        }
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, PathBuf), ExitCode> {
    let cfg = ExperimentConfig::load(path).map_err(|e| fail(1, "config", e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((cfg, base))
}

fn execute(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<(), ExitCode> {
    let reps = run_experiment(cfg, base).map_err(|e| match e {
        locnet::harness::RunError::Config(inner) => fail(1, "config", inner.to_string()),
        other => fail(2, "run", other.to_string()),
    })?;
    write_outputs(out, cfg, &reps).map_err(|e| fail(2, "io", e.to_string()))?;
    let agg = locnet::harness::aggregate(&reps);
    println!(
        "{}: {} replicate(s), mean final error {:.6}, outputs in {}",
        cfg.name,
        reps.len(),
        agg.mean_final_error,
        out.display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let (mut cfg, base) = match load_config(&args.config) {
        Ok(v) => v,
        Err(c) => return c,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    match execute(&cfg, &base, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(c) => c,
    }
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    let Some((path, values)) = args.param.split_once('=') else {
        return fail(1, "sweep", "expected --param dotted.path=v1,v2,...".into());
    };
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return fail(1, "config", e.to_string()),
    };
    let base_value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return fail(1, "config", e.to_string()),
    };
    let base_dir = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    for raw in values.split(',') {
        let mut doc = base_value.clone();
        let mut cursor = &mut doc;
        let segments: Vec<&str> = path.split('.').collect();
        for seg in &segments[..segments.len() - 1] {
            let Some(next) = cursor.get_mut(seg) else {
                return fail(1, "sweep", format!("no field `{seg}` in config"));
            };
            cursor = next;
        }
        let leaf = segments.last().unwrap();
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        match cursor.get_mut(leaf) {
            Some(slot) => *slot = parsed,
            None => return fail(1, "sweep", format!("no field `{leaf}` in config")),
        }
        let mut cfg: ExperimentConfig = match serde_json::from_value(doc) {
            Ok(c) => c,
            Err(e) => return fail(1, "config", e.to_string()),
        };
        if let Err(e) = cfg.validate() {
            return fail(1, "config", e.to_string());
        }
        cfg.name = format!("{}_{}={}", cfg.name, path, raw);
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
            .join(&cfg.name);
        if let Err(c) = execute(&cfg, &base_dir, &out) {
            return c;
        }
    }
    ExitCode::SUCCESS
}

/// Random simplexes in 1-3 dimensions: compare the distance-only volume and
/// weights against direct coordinate computations.
fn cmd_validate(samples: usize, seed: u64) -> ExitCode {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst_vol = 0.0f64;
    let mut worst_w = 0.0f64;
    for _ in 0..samples {
        let m = rng.gen_range(1..=3usize);
        let pts: Vec<Vec<f64>> = (0..=m)
            .map(|_| (0..m).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let sq = geometry::SquaredDistanceMatrix::from_points(&pts);
        let vol = match geometry::hypervolume_from_sqdists(&sq) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let reference = match geometry::coordinate_oracle_volume(&pts) {
            Ok(v) => v,
            Err(_) => continue,
        };
        if reference < 1e-6 {
            continue;
        }
        worst_vol = worst_vol.max((vol - reference).abs() / reference);

        // Interior point: weights from distances vs the affine solve.
        let interior: Vec<f64> = (0..m)
            .map(|c| pts.iter().map(|p| p[c]).sum::<f64>() / (m + 1) as f64)
            .collect();
        let simplex = match geometry::Simplex::new(m, (0..=m).collect(), sq) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let i_dists: Vec<f64> = pts.iter().map(|p| geometry::dist(p, &interior)).collect();
        let w = match geometry::barycentric_weights(&i_dists, &simplex, 1e-9) {
            Ok(w) => w,
            Err(_) => continue,
        };
        let reference_w = match geometry::coordinate_oracle_barycentric(&interior, &pts) {
            Ok(w) => w,
            Err(_) => continue,
        };
        for (a, b) in w.weights().iter().zip(&reference_w) {
            worst_w = worst_w.max((a - b).abs());
        }
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "samples": samples,
            "max_relative_volume_error": worst_vol,
            "max_weight_error": worst_w,
        }))
        .unwrap()
    );
    if worst_vol < 1e-6 && worst_w < 1e-6 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
