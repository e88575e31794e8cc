//! Experiment execution: per-replicate dispatch over the configured
//! algorithm, parallel across replicates with a deterministic result order.

use super::config::{AlgorithmSpec, ConfigError, ExperimentConfig};
use super::metrics::{ReplicateResult, TraceRow};
use super::rng::{stream, Purpose};
use crate::baselines::{
    kf_predict, kf_update, pf_step, GaussianBelief, LinearGaussianModel, ParticleSet,
};
use crate::diloc::{assemble_system, diloc_step, DilocError, NodeIndex, StateVector};
use crate::geometry::{self, SquaredDistanceMatrix};
use crate::mobile::{MobileParams, MobileSim, MotionModel, MotionNoise};
use crate::robust::{
    diland_step, dlre_step, ConsistentRangeEstimator, LinkModel, LinkSample, Member, StepSchedule,
    WeightedSet,
};
use crate::scene::{
    find_triangulation_set, Deployment, Role, SearchOptions, TriangulationSet, TrueDistances,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("triangulation failed: {0}")]
    Triangulation(String),
    #[error("solver failed: {0}")]
    Solver(#[from] DilocError),
}

/// Runs every replicate of the experiment. `base_dir` resolves relative
/// scene-file paths.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base_dir: &Path,
) -> Result<Vec<ReplicateResult>, RunError> {
    let base: PathBuf = base_dir.to_path_buf();
    (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, &base, rep))
        .collect()
}

fn run_replicate(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    rep: usize,
) -> Result<ReplicateResult, RunError> {
    let mut scene_rng = stream(cfg.seed, rep as u64, Purpose::SceneGen);
    let dep = cfg.scene.build(base_dir, &mut scene_rng)?;
    match &cfg.algorithm {
        AlgorithmSpec::Diloc { tol } => run_diloc(cfg, rep, dep, *tol),
        AlgorithmSpec::Dlre {
            schedule,
            link_prob,
            comm_sigma,
        } => run_dlre(cfg, rep, dep, schedule, *link_prob, *comm_sigma),
        AlgorithmSpec::Diland {
            schedule,
            range_sigma,
        } => run_diland(cfg, rep, dep, schedule, *range_sigma),
        AlgorithmSpec::Mobile {
            model,
            noise,
            params,
        } => run_mobile(cfg, rep, dep, *model, *noise, *params),
        AlgorithmSpec::Kf {
            process_sigma,
            meas_sigma,
            prior_sigma,
        } => Ok(run_tracking(
            cfg,
            rep,
            &dep,
            Tracker::Kf,
            *process_sigma,
            *meas_sigma,
            *prior_sigma,
            0,
            0.0,
        )),
        AlgorithmSpec::Pf {
            particles,
            process_sigma,
            meas_sigma,
            prior_sigma,
            resample_frac,
        } => Ok(run_tracking(
            cfg,
            rep,
            &dep,
            Tracker::Pf,
            *process_sigma,
            *meas_sigma,
            *prior_sigma,
            *particles,
            *resample_frac,
        )),
    }
}

/// Frozen triangulation sets from true distances, one per agent.
fn static_sets(dep: &Deployment) -> Result<Vec<TriangulationSet>, RunError> {
    let opts = SearchOptions::default();
    let mut sets = Vec::new();
    for agent in dep.agents() {
        let mut src = TrueDistances(dep);
        match find_triangulation_set(dep, agent.id, &mut src, &opts)
            .map_err(|e| RunError::Triangulation(e.to_string()))?
        {
            Some(s) => sets.push(s),
            None => {
                return Err(RunError::Triangulation(format!(
                    "agent {} has no triangulation set; enlarge the communication \
                     radius or add anchors",
                    agent.id
                )))
            }
        }
    }
    Ok(sets)
}

fn random_init(index: &NodeIndex, dep: &Deployment, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let m = dep.dim;
    DMatrix::from_fn(index.n_agents(), m, |_, c| {
        rng.gen_range(dep.region.min[c]..dep.region.max[c])
    })
}

fn record(rows: &mut Vec<TraceRow>, cfg: &ExperimentConfig, row: TraceRow) {
    if row.k % cfg.record_every == 0 || row.k == cfg.steps {
        rows.push(row);
    }
}

fn run_diloc(
    cfg: &ExperimentConfig,
    rep: usize,
    dep: Deployment,
    tol: f64,
) -> Result<ReplicateResult, RunError> {
    let index = NodeIndex::from_deployment(&dep);
    let sets = static_sets(&dep)?;
    let mats = assemble_system(&dep, &index, &sets)?;
    let truth = index.true_positions(&dep);
    let mut init_rng = stream(cfg.seed, rep as u64, Purpose::Init);
    let mut state = StateVector {
        x: random_init(&index, &dep, &mut init_rng),
        u: index.anchor_positions(&dep),
    };
    let n_agents = index.n_agents() as u64;

    let mut rows = Vec::new();
    record(
        &mut rows,
        cfg,
        TraceRow {
            k: 0,
            error_norm: (&state.x - &truth).norm(),
            updates_cum: 0,
        },
    );
    let mut steps_done = cfg.steps;
    for k in 1..=cfg.steps {
        let next = diloc_step(&state, &mats);
        let delta = (&next.x - &state.x).norm();
        state = next;
        record(
            &mut rows,
            cfg,
            TraceRow {
                k,
                error_norm: (&state.x - &truth).norm(),
                updates_cum: k as u64 * n_agents,
            },
        );
        if delta <= tol {
            steps_done = k;
            break;
        }
    }
    let final_error = (&state.x - &truth).norm();
    Ok(ReplicateResult {
        replicate: rep,
        rows,
        final_error,
        mean_updates_per_agent: steps_done as f64,
        neighbor_hist: Vec::new(),
        agent_steps: 0,
    })
}

/// Converts scene-space sets into index-space weighted sets.
fn to_weighted(dep: &Deployment, index: &NodeIndex, sets: &[TriangulationSet]) -> Vec<WeightedSet> {
    sets.iter()
        .map(|s| WeightedSet {
            owner: index.agent_row(s.owner).unwrap(),
            members: s
                .members
                .iter()
                .map(|&id| match dep.node(id).unwrap().role {
                    Role::Agent => Member::Agent(index.agent_row(id).unwrap()),
                    Role::Anchor => Member::Anchor(index.anchor_col(id).unwrap()),
                })
                .collect(),
            weights: s.weights.weights().to_vec(),
        })
        .collect()
}

fn run_dlre(
    cfg: &ExperimentConfig,
    rep: usize,
    dep: Deployment,
    schedule: &StepSchedule,
    link_prob: f64,
    comm_sigma: f64,
) -> Result<ReplicateResult, RunError> {
    let index = NodeIndex::from_deployment(&dep);
    let sets = to_weighted(&dep, &index, &static_sets(&dep)?);
    let truth = index.true_positions(&dep);
    let u = index.anchor_positions(&dep);
    let links = LinkModel::uniform(index.n_agents(), index.n_anchors(), link_prob);
    let mut init_rng = stream(cfg.seed, rep as u64, Purpose::Init);
    let mut x = random_init(&index, &dep, &mut init_rng);
    let mut link_rng = stream(cfg.seed, rep as u64, Purpose::Links);
    let m = dep.dim;
    let normal = (comm_sigma > 0.0).then(|| Normal::new(0.0, comm_sigma).unwrap());

    let mut rows = Vec::new();
    record(
        &mut rows,
        cfg,
        TraceRow {
            k: 0,
            error_norm: (&x - &truth).norm(),
            updates_cum: 0,
        },
    );
    for k in 1..=cfg.steps {
        let alpha = schedule.alpha(k - 1);
        let samples: Vec<Vec<LinkSample>> = sets
            .iter()
            .map(|s| {
                s.members
                    .iter()
                    .map(|_| LinkSample {
                        active: link_rng.gen_bool(link_prob),
                        noise: match &normal {
                            Some(n) => (0..m).map(|_| n.sample(&mut link_rng)).collect(),
                            None => Vec::new(),
                        },
                    })
                    .collect()
            })
            .collect();
        x = dlre_step(&x, &u, &sets, &links, &samples, alpha)?;
        record(
            &mut rows,
            cfg,
            TraceRow {
                k,
                error_norm: (&x - &truth).norm(),
                updates_cum: (k * sets.len()) as u64,
            },
        );
    }
    let final_error = (&x - &truth).norm();
    Ok(ReplicateResult {
        replicate: rep,
        rows,
        final_error,
        mean_updates_per_agent: cfg.steps as f64,
        neighbor_hist: Vec::new(),
        agent_steps: 0,
    })
}

fn run_diland(
    cfg: &ExperimentConfig,
    rep: usize,
    dep: Deployment,
    schedule: &StepSchedule,
    range_sigma: f64,
) -> Result<ReplicateResult, RunError> {
    let index = NodeIndex::from_deployment(&dep);
    let scene_sets = static_sets(&dep)?;
    let mut sets = to_weighted(&dep, &index, &scene_sets);
    let truth = index.true_positions(&dep);
    let u = index.anchor_positions(&dep);
    let mut init_rng = stream(cfg.seed, rep as u64, Purpose::Init);
    let mut x = random_init(&index, &dep, &mut init_rng);
    let mut range_rng = stream(cfg.seed, rep as u64, Purpose::Ranging);
    let normal = (range_sigma > 0.0).then(|| Normal::new(0.0, range_sigma).unwrap());
    let mut estimator = ConsistentRangeEstimator::new();
    let m = dep.dim;

    let mut rows = Vec::new();
    record(
        &mut rows,
        cfg,
        TraceRow {
            k: 0,
            error_norm: (&x - &truth).norm(),
            updates_cum: 0,
        },
    );
    for k in 1..=cfg.steps {
        // New noisy range observations for every pair each set depends on,
        // folded into the running means.
        for s in &scene_sets {
            let mut ids = s.members.clone();
            ids.push(s.owner);
            for a in 0..ids.len() {
                for b in a + 1..ids.len() {
                    let d = dep.true_distance(ids[a], ids[b]);
                    let meas = match &normal {
                        Some(n) => (d + n.sample(&mut range_rng)).max(0.0),
                        None => d,
                    };
                    estimator.observe(ids[a], ids[b], meas);
                }
            }
        }
        // Recompute weights from the averaged distances; keep the previous
        // weights when the averaged geometry is momentarily inconsistent.
        for (ws, s) in sets.iter_mut().zip(&scene_sets) {
            let sq = SquaredDistanceMatrix::from_distances(s.members.len(), |a, b| {
                estimator.mean(s.members[a], s.members[b]).unwrap()
            });
            let i_dists: Vec<f64> = s
                .members
                .iter()
                .map(|&j| estimator.mean(s.owner, j).unwrap())
                .collect();
            if let Ok(simplex) = geometry::Simplex::new(m, s.members.clone(), sq) {
                if let Ok(comps) = geometry::component_volumes(&i_dists, &simplex) {
                    if let Some(w) = geometry::barycentric_weights_unchecked(&comps) {
                        ws.weights = w.weights().to_vec();
                    }
                }
            }
        }
        let alpha = schedule.alpha(k - 1);
        x = diland_step(&x, &u, &sets, alpha);
        record(
            &mut rows,
            cfg,
            TraceRow {
                k,
                error_norm: (&x - &truth).norm(),
                updates_cum: (k * sets.len()) as u64,
            },
        );
    }
    let final_error = (&x - &truth).norm();
    Ok(ReplicateResult {
        replicate: rep,
        rows,
        final_error,
        mean_updates_per_agent: cfg.steps as f64,
        neighbor_hist: Vec::new(),
        agent_steps: 0,
    })
}

fn run_mobile(
    cfg: &ExperimentConfig,
    rep: usize,
    dep: Deployment,
    model: MotionModel,
    noise: MotionNoise,
    params: MobileParams,
) -> Result<ReplicateResult, RunError> {
    let motion_rng = stream(cfg.seed, rep as u64, Purpose::Motion);
    let ranging_rng = stream(cfg.seed, rep as u64, Purpose::Ranging);
    let mut sim = MobileSim::new(dep, model, noise, params, motion_rng, ranging_rng, false)
        .map_err(|e| RunError::Triangulation(e.to_string()))?;
    let mut init_rng = stream(cfg.seed, rep as u64, Purpose::Init);
    sim.randomize_estimates(&mut init_rng);

    let mut rows = Vec::new();
    record(
        &mut rows,
        cfg,
        TraceRow {
            k: 0,
            error_norm: sim.error_norm(),
            updates_cum: 0,
        },
    );
    let mut updates_cum = 0u64;
    for _ in 1..=cfg.steps {
        let rec = sim.step();
        updates_cum += rec.updates_this_step as u64;
        record(
            &mut rows,
            cfg,
            TraceRow {
                k: rec.k,
                error_norm: rec.error_norm,
                updates_cum,
            },
        );
    }
    Ok(ReplicateResult {
        replicate: rep,
        rows,
        final_error: sim.error_norm(),
        mean_updates_per_agent: sim.mean_updates_per_agent(),
        neighbor_hist: sim.neighbor_hist.clone(),
        agent_steps: sim.agent_steps,
    })
}

enum Tracker {
    Kf,
    Pf,
}

/// Planar random-walk target with direct position measurements: the linear
/// Gaussian problem the Kalman filter solves exactly, used to sanity-check
/// both centralized baselines on the same draws.
#[allow(clippy::too_many_arguments)]
fn run_tracking(
    cfg: &ExperimentConfig,
    rep: usize,
    dep: &Deployment,
    tracker: Tracker,
    process_sigma: f64,
    meas_sigma: f64,
    prior_sigma: f64,
    particles: usize,
    resample_frac: f64,
) -> ReplicateResult {
    let m = dep.dim;
    let mut rng = stream(cfg.seed, rep as u64, Purpose::Filter);
    let center: DVector<f64> = DVector::from_iterator(
        m,
        (0..m).map(|c| (dep.region.min[c] + dep.region.max[c]) / 2.0),
    );
    let process = Normal::new(0.0, process_sigma).unwrap();
    let meas = Normal::new(0.0, meas_sigma.max(1e-12)).unwrap();
    let model = LinearGaussianModel {
        f: DMatrix::identity(m, m),
        q: DMatrix::identity(m, m) * process_sigma * process_sigma,
        h: DMatrix::identity(m, m),
        r: DMatrix::identity(m, m) * meas_sigma * meas_sigma,
    };

    let mut truth = center.clone();
    let mut belief = GaussianBelief {
        mean: center.clone(),
        cov: DMatrix::identity(m, m) * prior_sigma * prior_sigma,
    };
    let prior = Normal::new(0.0, prior_sigma).unwrap();
    let mut particles_set = ParticleSet {
        particles: (0..particles.max(1))
            .map(|_| &center + DVector::from_fn(m, |_, _| prior.sample(&mut rng)))
            .collect(),
        weights: vec![1.0 / particles.max(1) as f64; particles.max(1)],
    };

    let mut rows = Vec::new();
    let mut err = match tracker {
        Tracker::Kf => (&belief.mean - &truth).norm(),
        Tracker::Pf => (particles_set.mean() - &truth).norm(),
    };
    record(
        &mut rows,
        cfg,
        TraceRow {
            k: 0,
            error_norm: err,
            updates_cum: 0,
        },
    );
    for k in 1..=cfg.steps {
        truth += DVector::from_fn(m, |_, _| process.sample(&mut rng));
        let z = &truth + DVector::from_fn(m, |_, _| meas.sample(&mut rng));
        match tracker {
            Tracker::Kf => {
                belief = kf_predict(&belief, &model);
                belief = kf_update(&belief, &model, &z).expect("nonsingular innovation");
                err = (&belief.mean - &truth).norm();
            }
            Tracker::Pf => {
                let r2 = meas_sigma.max(1e-12).powi(2);
                let step = pf_step(
                    &particles_set,
                    |p, r| p + DVector::from_fn(m, |_, _| process.sample(r)),
                    |p| (-0.5 * (&z - p).norm_squared() / r2).exp(),
                    resample_frac,
                    &mut rng,
                )
                .expect("particle step");
                particles_set = step.set;
                err = (particles_set.mean() - &truth).norm();
            }
        }
        record(
            &mut rows,
            cfg,
            TraceRow {
                k,
                error_norm: err,
                updates_cum: k as u64,
            },
        );
    }
    ReplicateResult {
        replicate: rep,
        rows,
        final_error: err,
        mean_updates_per_agent: cfg.steps as f64,
        neighbor_hist: Vec::new(),
        agent_steps: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{AnchorLayout, SceneSpec};

    fn diloc_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            seed: 9,
            replicates: 2,
            steps: 2000,
            scene: SceneSpec::Generated {
                dim: 2,
                side: 20.0,
                comm_radius: 60.0,
                n_agents: 6,
                n_anchors: 4,
                anchor_layout: AnchorLayout::Corners,
            },
            algorithm: AlgorithmSpec::Diloc { tol: 1e-12 },
            record_every: 10,
        }
    }

    #[test]
    fn diloc_replicates_converge_and_are_deterministic() {
        let cfg = diloc_config();
        let reps = run_experiment(&cfg, Path::new(".")).unwrap();
        assert_eq!(reps.len(), 2);
        for r in &reps {
            assert!(r.final_error < 1e-6, "final error {}", r.final_error);
        }
        let again = run_experiment(&cfg, Path::new(".")).unwrap();
        for (a, b) in reps.iter().zip(&again) {
            assert_eq!(a.final_error.to_bits(), b.final_error.to_bits());
            assert_eq!(a.rows.len(), b.rows.len());
        }
    }

    #[test]
    fn kf_beats_prior_on_tracking() {
        let mut cfg = diloc_config();
        cfg.steps = 200;
        cfg.algorithm = AlgorithmSpec::Kf {
            process_sigma: 0.1,
            meas_sigma: 0.5,
            prior_sigma: 5.0,
        };
        let reps = run_experiment(&cfg, Path::new(".")).unwrap();
        for r in &reps {
            assert!(r.final_error < 2.0);
        }
    }
}
