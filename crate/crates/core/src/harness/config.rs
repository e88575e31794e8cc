//! Experiment configuration: scene selection, algorithm parameters, run
//! shape. Everything round-trips through JSON.

use crate::mobile::{MobileParams, MotionModel, MotionNoise};
use crate::robust::StepSchedule;
use crate::scene::{Deployment, Node, Region, Role};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLayout {
    /// Anchors at region corners, in corner order.
    #[default]
    Corners,
    /// Anchors placed uniformly at random.
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SceneSpec {
    File {
        path: String,
    },
    Inline {
        deployment: Deployment,
    },
    Generated {
        dim: usize,
        side: f64,
        comm_radius: f64,
        n_agents: usize,
        n_anchors: usize,
        #[serde(default)]
        anchor_layout: AnchorLayout,
    },
}

impl SceneSpec {
    /// Materializes the scene. Generated scenes are redrawn per replicate
    /// from the given stream; file and inline scenes are fixed.
    pub fn build(&self, base_dir: &Path, rng: &mut ChaCha12Rng) -> Result<Deployment, ConfigError> {
        match self {
            SceneSpec::File { path } => {
                let full = base_dir.join(path);
                let text = std::fs::read_to_string(&full)?;
                Deployment::from_json(&text)
                    .map_err(|e| ConfigError::Invalid(format!("{}: {e}", full.display())))
            }
            SceneSpec::Inline { deployment } => {
                let mut dep = deployment.clone();
                dep.sync_anchor_estimates();
                dep.validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(dep)
            }
            SceneSpec::Generated {
                dim,
                side,
                comm_radius,
                n_agents,
                n_anchors,
                anchor_layout,
            } => {
                let region = Region::square(*side, *dim);
                let mut nodes = Vec::new();
                match anchor_layout {
                    AnchorLayout::Corners => {
                        let corners = corner_points(*dim, *side);
                        if *n_anchors > corners.len() {
                            return Err(ConfigError::Invalid(format!(
                                "corner layout supports at most {} anchors in {} dimensions",
                                corners.len(),
                                dim
                            )));
                        }
                        for (i, c) in corners.into_iter().take(*n_anchors).enumerate() {
                            nodes.push(Node::new(i, Role::Anchor, c));
                        }
                    }
                    AnchorLayout::Uniform => {
                        for i in 0..*n_anchors {
                            let p = (0..*dim).map(|_| rng.gen_range(0.0..*side)).collect();
                            nodes.push(Node::new(i, Role::Anchor, p));
                        }
                    }
                }
                for i in 0..*n_agents {
                    let p = (0..*dim).map(|_| rng.gen_range(0.0..*side)).collect();
                    nodes.push(Node::new(n_anchors + i, Role::Agent, p));
                }
                Deployment::new(*dim, region, *comm_radius, nodes)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }

    pub fn is_generated(&self) -> bool {
        matches!(self, SceneSpec::Generated { .. })
    }
}

/// Corners of the `[0, side]^dim` cube ordered by increasing bit count, so
/// the first `m + 1` of them span the space.
fn corner_points(dim: usize, side: f64) -> Vec<Vec<f64>> {
    let mut idx: Vec<usize> = (0..1usize << dim).collect();
    idx.sort_by_key(|v| (v.count_ones(), *v));
    idx.into_iter()
        .map(|bits| {
            (0..dim)
                .map(|a| if bits >> a & 1 == 1 { side } else { 0.0 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmSpec {
    /// The deterministic absorbing iteration on a static scene.
    Diloc {
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Stochastic-approximation iteration with unreliable, noisy links.
    Dlre {
        schedule: StepSchedule,
        /// Per-link activation probability.
        link_prob: f64,
        /// Std-dev of additive communication noise per coordinate.
        comm_sigma: f64,
    },
    /// Stochastic-approximation iteration with per-step weight recomputation
    /// from running-mean range estimates.
    Diland {
        schedule: StepSchedule,
        /// Std-dev of each raw range measurement.
        range_sigma: f64,
    },
    /// Opportunistic updates in a mobile network.
    Mobile {
        model: MotionModel,
        noise: MotionNoise,
        params: MobileParams,
    },
    /// Centralized Kalman filter on a planar random-walk tracking problem.
    Kf {
        process_sigma: f64,
        meas_sigma: f64,
        prior_sigma: f64,
    },
    /// Bootstrap particle filter on the same tracking problem.
    Pf {
        particles: usize,
        process_sigma: f64,
        meas_sigma: f64,
        prior_sigma: f64,
        #[serde(default = "default_resample_frac")]
        resample_frac: f64,
    },
}

fn default_tol() -> f64 {
    1e-10
}

fn default_resample_frac() -> f64 {
    0.5
}

impl AlgorithmSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmSpec::Diloc { .. } => "diloc",
            AlgorithmSpec::Dlre { .. } => "dlre",
            AlgorithmSpec::Diland { .. } => "diland",
            AlgorithmSpec::Mobile { .. } => "mobile",
            AlgorithmSpec::Kf { .. } => "kf",
            AlgorithmSpec::Pf { .. } => "pf",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub replicates: usize,
    /// Iterations (static algorithms) or time steps (mobile, filters).
    pub steps: usize,
    pub scene: SceneSpec,
    pub algorithm: AlgorithmSpec,
    /// Record every n-th step in the trace (the last step is always kept).
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.replicates == 0 {
            return Err(ConfigError::Invalid("replicates must be positive".into()));
        }
        if self.steps == 0 {
            return Err(ConfigError::Invalid("steps must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(ConfigError::Invalid("record_every must be positive".into()));
        }
        match &self.algorithm {
            AlgorithmSpec::Dlre {
                schedule,
                link_prob,
                comm_sigma,
            } => {
                crate::robust::validate_schedule(schedule, crate::robust::Algo::Dlre)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if !(*link_prob > 0.0 && *link_prob <= 1.0) {
                    return Err(ConfigError::Invalid("link_prob must be in (0, 1]".into()));
                }
                if *comm_sigma < 0.0 {
                    return Err(ConfigError::Invalid(
                        "comm_sigma must be nonnegative".into(),
                    ));
                }
            }
            AlgorithmSpec::Diland {
                schedule,
                range_sigma,
            } => {
                crate::robust::validate_schedule(schedule, crate::robust::Algo::Diland)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if *range_sigma < 0.0 {
                    return Err(ConfigError::Invalid(
                        "range_sigma must be nonnegative".into(),
                    ));
                }
            }
            AlgorithmSpec::Mobile { params, .. } => {
                params
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            AlgorithmSpec::Pf { particles, .. } => {
                if *particles == 0 {
                    return Err(ConfigError::Invalid("particles must be positive".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
