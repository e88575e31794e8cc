//! Opportunistic localization in mobile networks: motion models, the
//! Case (i)/(ii) updates with self-weight and anchor-weight floors, the
//! time-varying system matrices and their row classification, connectivity
//! and error-product monitors, the anchor-count feasibility checker, and the
//! M1-M3 noise gates.

use crate::diloc::NodeIndex;
use crate::geometry::{self, GeometryError, Point, SquaredDistanceMatrix};
use crate::scene::{
    find_triangulation_set, Deployment, DistanceSource, InclusionRule, Role, SearchOptions,
    SelectionPolicy, TriangulationSet,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MobileError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionModel {
    Static,
    /// Per-step random displacement `(d cos t, d sin t)` with
    /// `d ~ U[0, d_max]`, `t ~ U[0, 2pi)`; destinations outside the region
    /// are rejection-resampled.
    RandomWaypoint {
        d_max: f64,
    },
}

/// Noise growth coefficients: odometry variances grow with the cumulative
/// distance traveled, ranging variance grows with time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MotionNoise {
    pub k_d: f64,
    pub k_theta: f64,
    pub k_r: f64,
}

impl MotionNoise {
    pub fn is_noiseless(&self) -> bool {
        self.k_d == 0.0 && self.k_theta == 0.0 && self.k_r == 0.0
    }

    pub fn ranging_sigma(&self, k: usize) -> f64 {
        self.k_r * (k as f64).sqrt()
    }
}

/// Result of one motion step, rows aligned with `Deployment::nodes`.
#[derive(Debug, Clone)]
pub struct MotionOutcome {
    pub true_motion: Vec<Point>,
    /// Odometry reading: the true motion re-synthesized from noisy `(d, t)`.
    pub measured_motion: Vec<Point>,
}

/// Advances every node (agents and anchors alike) by its motion model and
/// returns both the true and the measured motion vectors. `cumulative` holds
/// the per-node distance traveled so far and is updated in place.
pub fn motion_step(
    dep: &mut Deployment,
    model: &MotionModel,
    noise: &MotionNoise,
    cumulative: &mut [f64],
    rng: &mut ChaCha12Rng,
) -> MotionOutcome {
    let n = dep.nodes.len();
    let mut true_motion = vec![vec![0.0; dep.dim]; n];
    let mut measured_motion = vec![vec![0.0; dep.dim]; n];
    match *model {
        MotionModel::Static => {}
        MotionModel::RandomWaypoint { d_max } => {
            assert_eq!(dep.dim, 2, "the random waypoint model is planar");
            for (idx, node) in dep.nodes.iter_mut().enumerate() {
                let (d, theta) = loop {
                    let d = rng.gen_range(0.0..d_max);
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    let cand = vec![node.pos[0] + d * theta.cos(), node.pos[1] + d * theta.sin()];
                    if dep.region.contains(&cand) {
                        break (d, theta);
                    }
                };
                let step = vec![d * theta.cos(), d * theta.sin()];
                node.pos[0] += step[0];
                node.pos[1] += step[1];
                cumulative[idx] += d;

                let (d_hat, theta_hat) = if noise.k_d == 0.0 && noise.k_theta == 0.0 {
                    (d, theta)
                } else {
                    let dist_total = cumulative[idx];
                    let sd = noise.k_d * dist_total.sqrt();
                    let st = noise.k_theta * dist_total.sqrt();
                    let nd = if sd > 0.0 {
                        Normal::new(0.0, sd).unwrap().sample(rng)
                    } else {
                        0.0
                    };
                    let nt = if st > 0.0 {
                        Normal::new(0.0, st).unwrap().sample(rng)
                    } else {
                        0.0
                    };
                    (d + nd, theta + nt)
                };
                measured_motion[idx] = vec![d_hat * theta_hat.cos(), d_hat * theta_hat.sin()];
                true_motion[idx] = step;
            }
        }
    }
    dep.sync_anchor_estimates();
    MotionOutcome {
        true_motion,
        measured_motion,
    }
}

/// Parameters of the opportunistic update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MobileParams {
    /// Self-weight floor; also the default value of `alpha_k`.
    pub beta: f64,
    /// Self weight used when a triangulation set exists; must be in
    /// `[beta, 1)`.
    pub alpha_k: f64,
    /// Minimum barycentric weight an anchor must carry to be usable.
    pub alpha_anchor: f64,
    /// Relative inclusion-test tolerance for noisy runs (modification M2).
    pub epsilon: f64,
    #[serde(default)]
    pub policy: SelectionPolicy,
    #[serde(default = "default_max_subsets")]
    pub max_subsets: usize,
    /// One agent updates per step (round-robin) instead of all eligible.
    #[serde(default)]
    pub sequential: bool,
}

fn default_max_subsets() -> usize {
    200
}

impl MobileParams {
    pub fn reference_defaults() -> Self {
        Self {
            beta: 0.01,
            alpha_k: 0.01,
            alpha_anchor: 0.01,
            epsilon: 0.2,
            policy: SelectionPolicy::MaxMinWeight,
            max_subsets: 200,
            sequential: false,
        }
    }

    pub fn validate(&self) -> Result<(), MobileError> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(MobileError::InvalidInput("beta must be in (0, 1)".into()));
        }
        if !(self.alpha_k >= self.beta && self.alpha_k < 1.0) {
            return Err(MobileError::InvalidInput(
                "alpha_k must be in [beta, 1)".into(),
            ));
        }
        if !(self.alpha_anchor > 0.0 && self.alpha_anchor < 1.0) {
            return Err(MobileError::InvalidInput(
                "alpha_anchor must be in (0, 1)".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(MobileError::InvalidInput("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One agent's location update. Case (i): no triangulation set, the agent
/// dead-reckons. Case (ii): convex mix of its own estimate and the set
/// members', then the motion is added.
pub fn opportunistic_update(
    est: &[f64],
    set: Option<&[(Vec<f64>, f64)]>,
    alpha_k: f64,
    beta: f64,
    measured_motion: &[f64],
) -> Result<Point, MobileError> {
    let m = est.len();
    let mut next = vec![0.0; m];
    match set {
        None => {
            if alpha_k != 1.0 {
                return Err(MobileError::InvalidInput(
                    "alpha_k must be 1 when no triangulation set exists".into(),
                ));
            }
            next.copy_from_slice(est);
        }
        Some(members) => {
            if !(alpha_k >= beta && alpha_k < 1.0) {
                return Err(MobileError::InvalidInput(format!(
                    "alpha_k = {alpha_k} outside [beta = {beta}, 1)"
                )));
            }
            for c in 0..m {
                next[c] = alpha_k * est[c];
            }
            for (pos, w) in members {
                for c in 0..m {
                    next[c] += (1.0 - alpha_k) * w * pos[c];
                }
            }
        }
    }
    for c in 0..m {
        next[c] += measured_motion[c];
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowClass {
    Identity,
    StochasticRow,
    SubStochasticRow,
}

/// An update applied at one step, in index space.
#[derive(Debug, Clone)]
pub struct AppliedUpdate {
    pub agent_row: usize,
    pub alpha_k: f64,
    /// `(member, barycentric weight)`; the effective matrix entry is
    /// `(1 - alpha_k) * weight`.
    pub members: Vec<(crate::robust::Member, f64)>,
}

/// Builds `(P_k, B_k)` for one step plus the per-row classification:
/// identity when the agent did not update, stochastic when no anchor was in
/// the set, sub-stochastic when an anchor absorbed part of the mass.
pub fn assemble_timevarying(
    n_agents: usize,
    n_anchors: usize,
    updates: &[AppliedUpdate],
) -> (DMatrix<f64>, DMatrix<f64>, Vec<RowClass>) {
    let mut p = DMatrix::<f64>::identity(n_agents, n_agents);
    let mut b = DMatrix::<f64>::zeros(n_agents, n_anchors);
    let mut classes = vec![RowClass::Identity; n_agents];
    for up in updates {
        let i = up.agent_row;
        p[(i, i)] = up.alpha_k;
        let mut has_anchor = false;
        for &(member, w) in &up.members {
            let entry = (1.0 - up.alpha_k) * w;
            match member {
                crate::robust::Member::Agent(j) => p[(i, j)] += entry,
                crate::robust::Member::Anchor(a) => {
                    b[(i, a)] += entry;
                    has_anchor = true;
                }
            }
        }
        classes[i] = if has_anchor {
            RowClass::SubStochasticRow
        } else {
            RowClass::StochasticRow
        };
    }
    (p, b, classes)
}

/// Running product of the time-varying system matrices; its norm decaying to
/// zero is the convergence certificate for the error dynamics.
#[derive(Debug, Clone)]
pub struct ErrorProductMonitor {
    product: DMatrix<f64>,
}

impl ErrorProductMonitor {
    pub fn new(n_agents: usize) -> Self {
        Self {
            product: DMatrix::identity(n_agents, n_agents),
        }
    }

    pub fn absorb(&mut self, p_k: &DMatrix<f64>) {
        self.product = p_k * &self.product;
    }

    /// Infinity (max row sum) norm of the running product.
    pub fn inf_norm(&self) -> f64 {
        (0..self.product.nrows())
            .map(|r| self.product.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Tracks when anchor information (propagated over multi-hop, multi-step
/// paths) reaches each agent.
#[derive(Debug, Clone)]
pub struct ConnectivityLog {
    /// Most recent anchor timestamp each agent's information derives from.
    tags: Vec<Option<usize>>,
    last_arrival: Vec<Option<usize>>,
    gaps: Vec<Vec<usize>>,
}

impl ConnectivityLog {
    pub fn new(n_agents: usize) -> Self {
        Self {
            tags: vec![None; n_agents],
            last_arrival: vec![None; n_agents],
            gaps: vec![Vec::new(); n_agents],
        }
    }

    /// Records that `agent_row` updated at step `k` using the given members.
    pub fn record_update(&mut self, agent_row: usize, members: &[crate::robust::Member], k: usize) {
        let mut incoming: Option<usize> = None;
        for m in members {
            let tag = match *m {
                crate::robust::Member::Anchor(_) => Some(k),
                crate::robust::Member::Agent(j) => self.tags[j],
            };
            incoming = match (incoming, tag) {
                (None, t) => t,
                (t, None) => t,
                (Some(a), Some(b)) => Some(a.max(b)),
            };
        }
        if let Some(t) = incoming {
            if self.tags[agent_row].map_or(true, |cur| t > cur) {
                let gap = k - self.last_arrival[agent_row].unwrap_or(0);
                self.gaps[agent_row].push(gap);
                self.last_arrival[agent_row] = Some(k);
                self.tags[agent_row] = Some(t);
            }
        }
    }

    pub fn arrivals(&self, agent_row: usize) -> usize {
        self.gaps[agent_row].len()
    }

    pub fn max_gap(&self, agent_row: usize) -> Option<usize> {
        self.gaps[agent_row].iter().max().copied()
    }

    /// Largest observed gap over all agents, or `None` if some agent never
    /// received anchor information.
    pub fn worst_gap(&self) -> Option<usize> {
        let mut worst = 0;
        for r in 0..self.gaps.len() {
            if self.gaps[r].is_empty() {
                return None;
            }
            worst = worst.max(*self.gaps[r].iter().max().unwrap());
        }
        Some(worst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Feasibility {
    Feasible,
    Infeasible(Vec<String>),
}

/// Necessary anchor-count conditions for mobile localization:
/// `|kappa| >= 1`, `|kappa| + |Omega| >= m + 2`, and
/// `|kappa| + dim(U M_i) + dim(U U_j) >= m + 1`.
pub fn feasibility_check(
    num_anchors: usize,
    num_agents: usize,
    dim_agent_motion_union: usize,
    dim_anchor_motion_union: usize,
    m: usize,
) -> Feasibility {
    let mut reasons = Vec::new();
    if num_anchors < 1 {
        reasons.push("at least one anchor is required".to_string());
    }
    if num_anchors + num_agents < m + 2 {
        reasons.push(format!(
            "need |anchors| + |agents| >= {}, got {}",
            m + 2,
            num_anchors + num_agents
        ));
    }
    if num_anchors + dim_agent_motion_union + dim_anchor_motion_union < m + 1 {
        reasons.push(format!(
            "need |anchors| + agent motion dim + anchor motion dim >= {}, got {}",
            m + 1,
            num_anchors + dim_agent_motion_union + dim_anchor_motion_union
        ));
    }
    if reasons.is_empty() {
        Feasibility::Feasible
    } else {
        Feasibility::Infeasible(reasons)
    }
}

/// Outcome of the M1/M2 gates on a candidate set under noisy distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Accept {
        eps_rel: f64,
    },
    /// A needed Cayley-Menger determinant has the infeasible sign.
    RejectM1,
    /// Relative inclusion-test error at or above epsilon.
    RejectM2,
}

/// Runs modifications M1 and M2 on a candidate set of `m + 1` members with
/// measured pairwise distances and measured distances from the updating
/// agent. On `Accept`, the subsequent weight computation renormalizes the
/// weights (M3).
pub fn noisy_update_gates(
    i_dists: &[f64],
    set_dists: &SquaredDistanceMatrix,
    m: usize,
    epsilon: f64,
) -> Result<Gate, GeometryError> {
    let total = match geometry::hypervolume_from_sqdists(set_dists) {
        Ok(v) if v > 0.0 => v,
        Ok(_) => return Ok(Gate::RejectM1),
        Err(GeometryError::NegativeSquaredVolume(_)) => return Ok(Gate::RejectM1),
        Err(e) => return Err(e),
    };
    let members: Vec<usize> = (0..=m).collect();
    let simplex = geometry::Simplex::new(m, members, set_dists.clone())?;
    let comps = match geometry::component_volumes(i_dists, &simplex) {
        Ok(c) => c,
        Err(GeometryError::NegativeSquaredVolume(_)) => return Ok(Gate::RejectM1),
        Err(e) => return Err(e),
    };
    let eps_rel = (comps.iter().sum::<f64>() - total).abs() / total;
    if eps_rel >= epsilon {
        return Ok(Gate::RejectM2);
    }
    Ok(Gate::Accept { eps_rel })
}

/// Noisy ranging on top of true geometry: one Gaussian sample per query.
struct NoisyRanging<'a> {
    dep: &'a Deployment,
    sigma: f64,
    rng: &'a mut ChaCha12Rng,
}

impl DistanceSource for NoisyRanging<'_> {
    fn dist(&mut self, i: usize, j: usize) -> f64 {
        let d = self.dep.true_distance(i, j);
        if self.sigma == 0.0 {
            d
        } else {
            (d + Normal::new(0.0, self.sigma).unwrap().sample(self.rng)).max(0.0)
        }
    }
}

/// Per-step record emitted by the simulation.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub k: usize,
    pub error_norm: f64,
    pub updates_this_step: usize,
}

/// The opportunistic mobile localization simulation: one anchor (or more),
/// all nodes moving, agents updating whenever they find a triangulation set.
pub struct MobileSim {
    pub dep: Deployment,
    pub model: MotionModel,
    pub noise: MotionNoise,
    pub params: MobileParams,
    pub index: NodeIndex,
    k: usize,
    cumulative: Vec<f64>,
    rng_motion: ChaCha12Rng,
    rng_ranging: ChaCha12Rng,
    seq_cursor: usize,
    pub connectivity: ConnectivityLog,
    pub monitor: Option<ErrorProductMonitor>,
    /// Histogram of neighbor counts over agent-steps.
    pub neighbor_hist: Vec<u64>,
    pub updates_per_agent: Vec<u64>,
    pub agent_steps: u64,
}

impl MobileSim {
    pub fn new(
        mut dep: Deployment,
        model: MotionModel,
        noise: MotionNoise,
        params: MobileParams,
        rng_motion: ChaCha12Rng,
        rng_ranging: ChaCha12Rng,
        track_product: bool,
    ) -> Result<Self, MobileError> {
        params.validate()?;
        dep.sync_anchor_estimates();
        let index = NodeIndex::from_deployment(&dep);
        let n_agents = index.n_agents();
        let n_nodes = dep.nodes.len();
        Ok(Self {
            dep,
            model,
            noise,
            params,
            k: 0,
            cumulative: vec![0.0; n_nodes],
            rng_motion,
            rng_ranging,
            seq_cursor: 0,
            connectivity: ConnectivityLog::new(n_agents),
            monitor: track_product.then(|| ErrorProductMonitor::new(n_agents)),
            neighbor_hist: Vec::new(),
            updates_per_agent: vec![0; n_agents],
            agent_steps: 0,
            index,
        })
    }

    /// Randomize initial agent estimates uniformly over the region.
    pub fn randomize_estimates(&mut self, rng: &mut ChaCha12Rng) {
        let region = self.dep.region.clone();
        for node in &mut self.dep.nodes {
            if node.role == Role::Agent {
                node.est_pos = (0..self.dep.dim)
                    .map(|a| rng.gen_range(region.min[a]..region.max[a]))
                    .collect();
            }
        }
    }

    pub fn error_norm(&self) -> f64 {
        self.dep
            .agents()
            .map(|n| geometry::dist2(&n.pos, &n.est_pos))
            .sum::<f64>()
            .sqrt()
    }

    fn search_options(&self) -> SearchOptions {
        let rule = if self.noise.is_noiseless() {
            InclusionRule::Exact { tol_rel: 1e-9 }
        } else {
            InclusionRule::Gated {
                epsilon: self.params.epsilon,
            }
        };
        SearchOptions {
            rule,
            policy: self.params.policy,
            max_subsets: self.params.max_subsets,
            anchor_weight_floor: self.params.alpha_anchor,
        }
    }

    /// Advances the simulation by one step and returns the post-step record.
    pub fn step(&mut self) -> StepRecord {
        let n_agents = self.index.n_agents();
        let opts = self.search_options();
        let sigma_r = self.noise.ranging_sigma(self.k);

        // Jacobi-style: all eligible agents read their neighbors' estimates
        // from the current step.
        let mut sets: Vec<Option<TriangulationSet>> = Vec::with_capacity(n_agents);
        let eligible: Vec<usize> = if self.params.sequential {
            let pick = self.seq_cursor % n_agents;
            self.seq_cursor += 1;
            vec![pick]
        } else {
            (0..n_agents).collect()
        };
        for row in 0..n_agents {
            let id = self.index.agent_ids[row];
            let neighbor_count = self.dep.neighbors(id).unwrap().len();
            if (neighbor_count) >= self.neighbor_hist.len() {
                self.neighbor_hist.resize(neighbor_count + 1, 0);
            }
            self.neighbor_hist[neighbor_count] += 1;
            self.agent_steps += 1;

            if !eligible.contains(&row) {
                sets.push(None);
                continue;
            }
            let mut src = NoisyRanging {
                dep: &self.dep,
                sigma: sigma_r,
                rng: &mut self.rng_ranging,
            };
            let set = find_triangulation_set(&self.dep, id, &mut src, &opts).unwrap();
            sets.push(set);
        }

        let mut updates: Vec<AppliedUpdate> = Vec::new();
        let mut new_estimates: Vec<(usize, Point)> = Vec::new();
        for (row, set) in sets.iter().enumerate() {
            let id = self.index.agent_ids[row];
            let est = self.dep.node(id).unwrap().est_pos.clone();
            match set {
                None => {
                    // Case (i): handled by adding the motion below.
                    let _ = est;
                }
                Some(ts) => {
                    let members: Vec<(Vec<f64>, f64)> = ts
                        .members
                        .iter()
                        .zip(ts.weights.weights())
                        .map(|(&j, &w)| (self.dep.node(j).unwrap().est_pos.clone(), w))
                        .collect();
                    let zero_motion = vec![0.0; self.dep.dim];
                    let next = opportunistic_update(
                        &est,
                        Some(&members),
                        self.params.alpha_k,
                        self.params.beta,
                        &zero_motion,
                    )
                    .unwrap();
                    new_estimates.push((id, next));
                    let indexed: Vec<(crate::robust::Member, f64)> = ts
                        .members
                        .iter()
                        .zip(ts.weights.weights())
                        .map(|(&j, &w)| {
                            let member = match self.dep.node(j).unwrap().role {
                                Role::Agent => {
                                    crate::robust::Member::Agent(self.index.agent_row(j).unwrap())
                                }
                                Role::Anchor => {
                                    crate::robust::Member::Anchor(self.index.anchor_col(j).unwrap())
                                }
                            };
                            (member, w)
                        })
                        .collect();
                    self.connectivity.record_update(
                        row,
                        &indexed.iter().map(|(m, _)| *m).collect::<Vec<_>>(),
                        self.k,
                    );
                    self.updates_per_agent[row] += 1;
                    updates.push(AppliedUpdate {
                        agent_row: row,
                        alpha_k: self.params.alpha_k,
                        members: indexed,
                    });
                }
            }
        }
        let updates_this_step = updates.len();
        if let Some(monitor) = &mut self.monitor {
            let (p_k, _, _) = assemble_timevarying(n_agents, self.index.n_anchors(), &updates);
            monitor.absorb(&p_k);
        }
        for (id, next) in new_estimates {
            self.dep.node_mut(id).unwrap().est_pos = next;
        }

        // Motion: everyone moves, agents dead-reckon with measured motion.
        let outcome = motion_step(
            &mut self.dep,
            &self.model,
            &self.noise,
            &mut self.cumulative,
            &mut self.rng_motion,
        );
        for (idx, node) in self.dep.nodes.iter_mut().enumerate() {
            if node.role == Role::Agent {
                for c in 0..node.est_pos.len() {
                    node.est_pos[c] += outcome.measured_motion[idx][c];
                }
            }
        }

        self.k += 1;
        StepRecord {
            k: self.k,
            error_norm: self.error_norm(),
            updates_this_step,
        }
    }

    pub fn run(&mut self, steps: usize) -> Vec<StepRecord> {
        (0..steps).map(|_| self.step()).collect()
    }

    /// Fraction of agent-steps with exactly `count` neighbors.
    pub fn neighbor_fraction(&self, count: usize) -> f64 {
        if self.agent_steps == 0 {
            return 0.0;
        }
        self.neighbor_hist.get(count).copied().unwrap_or(0) as f64 / self.agent_steps as f64
    }

    pub fn mean_updates_per_agent(&self) -> f64 {
        if self.updates_per_agent.is_empty() {
            return 0.0;
        }
        self.updates_per_agent.iter().sum::<u64>() as f64 / self.updates_per_agent.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robust::Member;
    use crate::scene::{Node, Region};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn static_model_produces_zero_motion() {
        let nodes = vec![Node::new(0, Role::Agent, vec![1.0, 1.0])];
        let mut dep = Deployment::new(2, Region::square(10.0, 2), 1.0, nodes).unwrap();
        let mut cum = vec![0.0];
        let out = motion_step(
            &mut dep,
            &MotionModel::Static,
            &MotionNoise::default(),
            &mut cum,
            &mut rng(1),
        );
        assert_eq!(out.true_motion[0], vec![0.0, 0.0]);
        assert_eq!(dep.node(0).unwrap().pos, vec![1.0, 1.0]);
    }

    #[test]
    fn waypoint_run_stays_inside_region() {
        let nodes = vec![
            Node::new(0, Role::Agent, vec![10.0, 10.0]),
            Node::new(1, Role::Anchor, vec![5.0, 5.0]),
        ];
        let mut dep = Deployment::new(2, Region::square(20.0, 2), 2.0, nodes).unwrap();
        let mut cum = vec![0.0; 2];
        let model = MotionModel::RandomWaypoint { d_max: 5.0 };
        let mut r = rng(2);
        for _ in 0..3000 {
            motion_step(&mut dep, &model, &MotionNoise::default(), &mut cum, &mut r);
            for n in &dep.nodes {
                assert!(dep.region.contains(&n.pos));
            }
        }
        assert!(cum[0] > 0.0);
    }

    #[test]
    fn case_one_keeps_error_unchanged() {
        let est = vec![3.0, 4.0];
        let motion = vec![0.5, -0.25];
        let next = opportunistic_update(&est, None, 1.0, 0.01, &motion).unwrap();
        assert_eq!(next, vec![3.5, 3.75]);
        assert!(opportunistic_update(&est, None, 0.5, 0.01, &motion).is_err());
    }

    #[test]
    fn anchor_set_contracts_error_by_alpha() {
        // Three exact anchors: new error = alpha * old error.
        let est = vec![12.0, 3.0];
        let anchors = vec![
            (vec![0.0, 0.0], 0.3),
            (vec![10.0, 0.0], 0.3),
            (vec![0.0, 10.0], 0.4),
        ];
        // The fixed point is the barycentric combination of the members.
        let combo = [3.0, 4.0];
        let alpha = 0.01;
        let zero = vec![0.0, 0.0];
        let next = opportunistic_update(&est, Some(&anchors), alpha, 0.01, &zero).unwrap();
        let old_err = [est[0] - combo[0], est[1] - combo[1]];
        let new_err = [next[0] - combo[0], next[1] - combo[1]];
        assert!((new_err[0] - alpha * old_err[0]).abs() < 1e-12);
        assert!((new_err[1] - alpha * old_err[1]).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_with_set_is_rejected() {
        let est = vec![0.0, 0.0];
        let members = vec![(vec![1.0, 0.0], 1.0)];
        let zero = vec![0.0, 0.0];
        assert!(opportunistic_update(&est, Some(&members), 1.0, 0.01, &zero).is_err());
    }

    #[test]
    fn timevarying_rows_classify() {
        let (p, b, classes) = assemble_timevarying(3, 1, &[]);
        assert_eq!(p, DMatrix::identity(3, 3));
        assert_eq!(b, DMatrix::zeros(3, 1));
        assert!(classes.iter().all(|c| *c == RowClass::Identity));

        let updates = vec![
            AppliedUpdate {
                agent_row: 0,
                alpha_k: 0.01,
                members: vec![
                    (Member::Agent(1), 0.5),
                    (Member::Agent(2), 0.3),
                    (Member::Anchor(0), 0.2),
                ],
            },
            AppliedUpdate {
                agent_row: 1,
                alpha_k: 0.01,
                members: vec![(Member::Agent(0), 0.6), (Member::Agent(2), 0.4)],
            },
        ];
        let (p, b, classes) = assemble_timevarying(3, 1, &updates);
        assert_eq!(classes[0], RowClass::SubStochasticRow);
        assert_eq!(classes[1], RowClass::StochasticRow);
        assert_eq!(classes[2], RowClass::Identity);
        let row0: f64 = p.row(0).iter().sum::<f64>() + b.row(0).iter().sum::<f64>();
        assert!((row0 - 1.0).abs() < 1e-12);
        let row0_p: f64 = p.row(0).iter().sum();
        assert!(row0_p < 1.0 - 0.2 * (1.0 - 0.01) + 1e-12);
        let row1: f64 = p.row(1).iter().sum();
        assert!((row1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_history_keeps_norm_one() {
        let mut monitor = ErrorProductMonitor::new(4);
        for _ in 0..10 {
            monitor.absorb(&DMatrix::identity(4, 4));
        }
        assert_eq!(monitor.inf_norm(), 1.0);
    }

    #[test]
    fn anchor_cycle_drives_product_down() {
        // Each step one agent updates against three anchors: its row becomes
        // beta at the diagonal; one full cycle scales the product by beta.
        let beta = 0.01;
        let mut monitor = ErrorProductMonitor::new(3);
        for agent in 0..3 {
            let updates = vec![AppliedUpdate {
                agent_row: agent,
                alpha_k: beta,
                members: vec![
                    (Member::Anchor(0), 0.3),
                    (Member::Anchor(1), 0.3),
                    (Member::Anchor(2), 0.4),
                ],
            }];
            let (p, _, _) = assemble_timevarying(3, 3, &updates);
            monitor.absorb(&p);
        }
        assert!(monitor.inf_norm() <= beta + 1e-12);
    }

    #[test]
    fn feasibility_examples() {
        assert_eq!(feasibility_check(1, 5, 2, 0, 2), Feasibility::Feasible);
        assert!(matches!(
            feasibility_check(0, 5, 2, 2, 2),
            Feasibility::Infeasible(_)
        ));
        // All static with a single anchor: condition (35) fails.
        assert!(matches!(
            feasibility_check(1, 5, 0, 0, 2),
            Feasibility::Infeasible(_)
        ));
    }

    #[test]
    fn gates_accept_noiseless_interior_point() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![4.0, 0.0],
            vec![0.0, 4.0],
            vec![1.0, 1.0],
        ];
        let set = SquaredDistanceMatrix::from_points(&pts[..3]);
        let i_dists: Vec<f64> = pts[..3]
            .iter()
            .map(|p| geometry::dist(p, &pts[3]))
            .collect();
        match noisy_update_gates(&i_dists, &set, 2, 0.2).unwrap() {
            Gate::Accept { eps_rel } => assert!(eps_rel < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gates_reject_wrong_sign_determinant() {
        // Inflate one pairwise distance past the triangle inequality.
        let mut set = SquaredDistanceMatrix::zeros(3);
        set.set(0, 1, 1.0);
        set.set(1, 2, 1.0);
        set.set(0, 2, 25.0);
        let gate = noisy_update_gates(&[1.0, 1.0, 1.0], &set, 2, 0.2).unwrap();
        assert_eq!(gate, Gate::RejectM1);
    }

    #[test]
    fn gates_reject_large_relative_error() {
        let pts = vec![vec![0.0, 0.0], vec![4.0, 0.0], vec![0.0, 4.0]];
        let set = SquaredDistanceMatrix::from_points(&pts);
        // Point outside the triangle: inclusion error well above 20%.
        let outside = vec![6.0, 6.0];
        let i_dists: Vec<f64> = pts.iter().map(|p| geometry::dist(p, &outside)).collect();
        let gate = noisy_update_gates(&i_dists, &set, 2, 0.2).unwrap();
        assert_eq!(gate, Gate::RejectM2);
    }

    fn small_mobile_sim(seed: u64, noise: MotionNoise) -> MobileSim {
        let mut nodes = vec![Node::new(0, Role::Anchor, vec![10.0, 10.0])];
        let mut r = rng(seed ^ 0xABCD);
        for i in 1..=5 {
            nodes.push(Node::new(
                i,
                Role::Agent,
                vec![r.gen_range(0.0..20.0), r.gen_range(0.0..20.0)],
            ));
        }
        let dep = Deployment::new(2, Region::square(20.0, 2), 2.0, nodes).unwrap();
        let mut sim = MobileSim::new(
            dep,
            MotionModel::RandomWaypoint { d_max: 5.0 },
            noise,
            MobileParams::reference_defaults(),
            rng(seed),
            rng(seed.wrapping_add(1)),
            true,
        )
        .unwrap();
        let mut init_rng = rng(seed.wrapping_add(2));
        sim.randomize_estimates(&mut init_rng);
        sim
    }

    #[test]
    fn noiseless_error_dynamics_are_exact() {
        // In a noiseless run, x*_{k+1} - x_{k+1} = P_k (x*_k - x_k): the
        // running product applied to e_0 reproduces the current error.
        let mut sim = small_mobile_sim(5, MotionNoise::default());
        let e0 = {
            let truth = sim.index.true_positions(&sim.dep);
            let est = sim.index.estimated_positions(&sim.dep);
            truth - est
        };
        for _ in 0..200 {
            sim.step();
        }
        let truth = sim.index.true_positions(&sim.dep);
        let est = sim.index.estimated_positions(&sim.dep);
        let err = truth - est;
        let predicted = &sim.monitor.as_ref().unwrap().product * &e0;
        assert!((err - predicted).norm() < 1e-9);
    }

    #[test]
    fn sequential_mode_updates_at_most_one_agent() {
        let mut sim = small_mobile_sim(6, MotionNoise::default());
        sim.params.sequential = true;
        for _ in 0..50 {
            let rec = sim.step();
            assert!(rec.updates_this_step <= 1);
        }
    }
}
