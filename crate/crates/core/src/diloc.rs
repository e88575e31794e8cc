//! Static-network DILOC: system-matrix assembly, the linear iteration
//! `x_{k+1} = P x_k + B u*`, its closed-form limit, and spectral diagnostics.

use crate::scene::{Deployment, Role, TriangulationSet};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DilocError {
    #[error("agents without a triangulation set: {0:?}")]
    IncompleteTriangulation(Vec<usize>),
    #[error("(I - P) is singular: some agent has no path to an anchor")]
    NotAbsorbing,
    #[error("power iteration did not converge")]
    NumericalFailure,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Maps node ids to agent rows and anchor columns (each sorted by id).
#[derive(Debug, Clone)]
pub struct NodeIndex {
    pub agent_ids: Vec<usize>,
    pub anchor_ids: Vec<usize>,
}

impl NodeIndex {
    pub fn from_deployment(dep: &Deployment) -> Self {
        let mut agent_ids: Vec<usize> = dep.agents().map(|n| n.id).collect();
        let mut anchor_ids: Vec<usize> = dep.anchors().map(|n| n.id).collect();
        agent_ids.sort_unstable();
        anchor_ids.sort_unstable();
        Self {
            agent_ids,
            anchor_ids,
        }
    }

    pub fn agent_row(&self, id: usize) -> Option<usize> {
        self.agent_ids.binary_search(&id).ok()
    }

    pub fn anchor_col(&self, id: usize) -> Option<usize> {
        self.anchor_ids.binary_search(&id).ok()
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchor_ids.len()
    }

    /// N x m matrix of true agent positions, row order = agent rows.
    pub fn true_positions(&self, dep: &Deployment) -> DMatrix<f64> {
        rows_from(dep, &self.agent_ids, |n| &n.pos)
    }

    pub fn estimated_positions(&self, dep: &Deployment) -> DMatrix<f64> {
        rows_from(dep, &self.agent_ids, |n| &n.est_pos)
    }

    pub fn anchor_positions(&self, dep: &Deployment) -> DMatrix<f64> {
        rows_from(dep, &self.anchor_ids, |n| &n.pos)
    }
}

fn rows_from<'a>(
    dep: &'a Deployment,
    ids: &[usize],
    f: impl Fn(&'a crate::scene::Node) -> &'a Vec<f64>,
) -> DMatrix<f64> {
    let m = dep.dim;
    let mut out = DMatrix::zeros(ids.len(), m);
    for (r, &id) in ids.iter().enumerate() {
        let p = f(dep.node(id).unwrap());
        for c in 0..m {
            out[(r, c)] = p[c];
        }
    }
    out
}

/// The `(P, B)` pair of barycentric weight matrices driving the iteration.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub p: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl SystemMatrices {
    /// The `[[I, 0], [B, P]]` transition matrix of the absorbing chain.
    pub fn upsilon(&self) -> DMatrix<f64> {
        let n = self.p.nrows();
        let m = self.b.ncols();
        let mut u = DMatrix::zeros(n + m, n + m);
        for i in 0..m {
            u[(i, i)] = 1.0;
        }
        u.view_mut((m, 0), (n, m)).copy_from(&self.b);
        u.view_mut((m, m), (n, n)).copy_from(&self.p);
        u
    }
}

/// Agent estimates (`N x m`) together with anchor locations (`M x m`).
#[derive(Debug, Clone)]
pub struct StateVector {
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

/// Fills `P[i][j]` and `B[i][a]` from each agent's triangulation set.
/// Every agent must have a set; `sets` is indexed arbitrarily but must cover
/// all agents.
pub fn assemble_system(
    dep: &Deployment,
    index: &NodeIndex,
    sets: &[TriangulationSet],
) -> Result<SystemMatrices, DilocError> {
    let n = index.n_agents();
    let m = index.n_anchors();
    let mut p = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut covered = vec![false; n];
    for set in sets {
        let Some(row) = index.agent_row(set.owner) else {
            continue;
        };
        covered[row] = true;
        for (&member, &w) in set.members.iter().zip(set.weights.weights()) {
            match dep.node(member).map(|nde| nde.role) {
                Some(Role::Agent) => {
                    let col = index.agent_row(member).unwrap();
                    p[(row, col)] = w;
                }
                Some(Role::Anchor) => {
                    let col = index.anchor_col(member).unwrap();
                    b[(row, col)] = w;
                }
                None => {
                    return Err(DilocError::DimensionMismatch(format!(
                        "set member {member} not in deployment"
                    )))
                }
            }
        }
    }
    let missing: Vec<usize> = covered
        .iter()
        .enumerate()
        .filter(|(_, c)| !**c)
        .map(|(r, _)| index.agent_ids[r])
        .collect();
    if !missing.is_empty() {
        return Err(DilocError::IncompleteTriangulation(missing));
    }
    Ok(SystemMatrices { p, b })
}

/// One DILOC iteration; anchors are unchanged by construction.
pub fn diloc_step(s: &StateVector, mats: &SystemMatrices) -> StateVector {
    StateVector {
        x: &mats.p * &s.x + &mats.b * &s.u,
        u: s.u.clone(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub max_iters: usize,
    /// Successive-iterate Frobenius change threshold.
    pub tol: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// `||x_k - x*||` per iteration when true positions were supplied,
    /// otherwise the successive-change norms.
    pub error_trace: Vec<f64>,
    pub final_state: StateVector,
    pub converged: bool,
    pub iterations: usize,
}

/// Iterates `diloc_step` until the state stops moving or `max_iters`.
pub fn diloc_run(
    s0: StateVector,
    mats: &SystemMatrices,
    stop: StopRule,
    truth: Option<&DMatrix<f64>>,
) -> RunResult {
    let mut state = s0;
    let mut trace = Vec::new();
    let record = |state: &StateVector, trace: &mut Vec<f64>| {
        if let Some(t) = truth {
            trace.push((&state.x - t).norm());
        }
    };
    record(&state, &mut trace);
    if state.x.nrows() == 0 {
        return RunResult {
            error_trace: trace,
            final_state: state,
            converged: true,
            iterations: 0,
        };
    }
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..stop.max_iters {
        let next = diloc_step(&state, mats);
        let delta = (&next.x - &state.x).norm();
        state = next;
        iterations = k + 1;
        record(&state, &mut trace);
        if truth.is_none() {
            trace.push(delta);
        }
        if delta <= stop.tol {
            converged = true;
            break;
        }
    }
    RunResult {
        error_trace: trace,
        final_state: state,
        converged,
        iterations,
    }
}

/// The fixed point `(I - P)^{-1} B u`, which equals the true agent
/// coordinates whenever the triangulation sets are valid.
pub fn closed_form_limit(
    mats: &SystemMatrices,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DilocError> {
    let n = mats.p.nrows();
    let i_minus_p = DMatrix::identity(n, n) - &mats.p;
    let rhs = &mats.b * u;
    let lu = i_minus_p.clone().lu();
    let x = lu.solve(&rhs).ok_or(DilocError::NotAbsorbing)?;
    // Guard against a numerically singular (I - P) that LU still "solves".
    let residual = (&i_minus_p * &x - &rhs).norm();
    let scale = rhs.norm().max(x.norm()).max(1.0);
    if residual > 1e-6 * scale {
        return Err(DilocError::NotAbsorbing);
    }
    Ok(x)
}

/// Spectral radius of a nonnegative matrix.
pub fn spectral_radius(p: &DMatrix<f64>) -> Result<f64, DilocError> {
    let n = p.nrows();
    if n != p.ncols() {
        return Err(DilocError::DimensionMismatch(
            "spectral_radius needs a square matrix".into(),
        ));
    }
    if n == 0 {
        return Ok(0.0);
    }
    // Power iteration on |P| + I. The shift makes the matrix aperiodic, so
    // the iteration cannot cycle, and the dominant eigenvalue moves to
    // 1 + rho(|P|), which for nonnegative P is 1 + rho(P).
    let shifted = p.map(f64::abs) + DMatrix::identity(n, n);
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = f64::NAN;
    for _ in 0..500_000 {
        let w = &shifted * &v;
        let norm = w.norm();
        if !norm.is_finite() {
            return Err(DilocError::NumericalFailure);
        }
        v = w / norm;
        if (norm - lambda).abs() <= 1e-12 * norm {
            return Ok((norm - 1.0).max(0.0));
        }
        lambda = norm;
    }
    if lambda.is_finite() {
        Ok((lambda - 1.0).max(0.0))
    } else {
        Err(DilocError::NumericalFailure)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        find_triangulation_set, Deployment, Node, Region, Role, SearchOptions, TrueDistances,
    };
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn triangle_deployment(agent_positions: &[Vec<f64>]) -> Deployment {
        let mut nodes = vec![
            Node::new(0, Role::Anchor, vec![0.0, 0.0]),
            Node::new(1, Role::Anchor, vec![20.0, 0.0]),
            Node::new(2, Role::Anchor, vec![0.0, 20.0]),
        ];
        for (i, p) in agent_positions.iter().enumerate() {
            nodes.push(Node::new(3 + i, Role::Agent, p.clone()));
        }
        Deployment::new(2, Region::square(20.0, 2), 100.0, nodes).unwrap()
    }

    fn solve_sets(dep: &Deployment) -> (NodeIndex, SystemMatrices) {
        let index = NodeIndex::from_deployment(dep);
        let mut src = TrueDistances(dep);
        let sets: Vec<_> = index
            .agent_ids
            .iter()
            .map(|&id| {
                find_triangulation_set(dep, id, &mut src, &SearchOptions::default())
                    .unwrap()
                    .unwrap()
            })
            .collect();
        let mats = assemble_system(dep, &index, &sets).unwrap();
        (index, mats)
    }

    #[test]
    fn single_agent_three_anchor_rows() {
        let dep = triangle_deployment(&[vec![5.0, 5.0]]);
        let (_, mats) = solve_sets(&dep);
        assert_eq!(mats.p[(0, 0)], 0.0);
        let row_sum: f64 = mats.b.row(0).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn incomplete_triangulation_reports_agents() {
        let dep = triangle_deployment(&[vec![5.0, 5.0]]);
        let index = NodeIndex::from_deployment(&dep);
        match assemble_system(&dep, &index, &[]) {
            Err(DilocError::IncompleteTriangulation(ids)) => assert_eq!(ids, vec![3]),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn one_dimensional_one_step_recovery() {
        let nodes = vec![
            Node::new(0, Role::Anchor, vec![0.0]),
            Node::new(1, Role::Anchor, vec![1.0]),
            Node::new(2, Role::Agent, vec![0.3]),
        ];
        let dep = Deployment::new(1, Region::square(1.0, 1), 10.0, nodes).unwrap();
        let (index, mats) = solve_sets(&dep);
        let s0 = StateVector {
            x: DMatrix::from_row_slice(1, 1, &[7.0]),
            u: index.anchor_positions(&dep),
        };
        let s1 = diloc_step(&s0, &mats);
        assert!((s1.x[(0, 0)] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn true_locations_are_a_fixed_point() {
        let dep = triangle_deployment(&[vec![4.0, 3.0], vec![8.0, 6.0], vec![3.0, 9.0]]);
        let (index, mats) = solve_sets(&dep);
        let truth = index.true_positions(&dep);
        let s = StateVector {
            x: truth.clone(),
            u: index.anchor_positions(&dep),
        };
        let next = diloc_step(&s, &mats);
        assert!((&next.x - &truth).norm() < 1e-9);
    }

    #[test]
    fn run_converges_from_arbitrary_initialization() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let positions: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                // Uniform inside the anchor triangle x + y < 20.
                loop {
                    let x = rng.gen_range(0.5..19.5);
                    let y = rng.gen_range(0.5..19.5);
                    if x + y < 19.0 {
                        return vec![x, y];
                    }
                }
            })
            .collect();
        let dep = triangle_deployment(&positions);
        let (index, mats) = solve_sets(&dep);
        let truth = index.true_positions(&dep);
        let x0 = DMatrix::from_fn(10, 2, |_, _| rng.gen_range(-100.0..100.0));
        let s0 = StateVector {
            x: x0,
            u: index.anchor_positions(&dep),
        };
        let result = diloc_run(s0, &mats, StopRule::default(), Some(&truth));
        assert!(result.converged);
        assert!(*result.error_trace.last().unwrap() < 1e-6);
        let rho = spectral_radius(&mats.p).unwrap();
        assert!(rho < 1.0, "rho = {rho}");
        let limit = closed_form_limit(&mats, &index.anchor_positions(&dep)).unwrap();
        assert!((limit - truth).norm() < 1e-9);
    }

    #[test]
    fn empty_agent_set_is_trivially_converged() {
        let mats = SystemMatrices {
            p: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, 3),
        };
        let s0 = StateVector {
            x: DMatrix::zeros(0, 2),
            u: DMatrix::zeros(3, 2),
        };
        let r = diloc_run(s0, &mats, StopRule::default(), None);
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn all_anchor_sets_converge_in_one_step() {
        let mats = SystemMatrices {
            p: DMatrix::zeros(1, 1),
            b: DMatrix::from_row_slice(1, 3, &[0.2, 0.3, 0.5]),
        };
        let u = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let limit = closed_form_limit(&mats, &u).unwrap();
        let s0 = StateVector {
            x: DMatrix::from_row_slice(1, 2, &[50.0, -3.0]),
            u: u.clone(),
        };
        let s1 = diloc_step(&s0, &mats);
        assert!((&s1.x - &limit).norm() < 1e-12);
    }

    #[test]
    fn mutually_dependent_agents_are_not_absorbing() {
        // Two agents pointing only at each other: (I - P) singular.
        let mats = SystemMatrices {
            p: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            b: DMatrix::zeros(2, 1),
        };
        let u = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(matches!(
            closed_form_limit(&mats, &u),
            Err(DilocError::NotAbsorbing)
        ));
    }

    #[test]
    fn spectral_radius_edge_cases() {
        assert_eq!(spectral_radius(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
        let stochastic = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.25, 0.75]);
        let rho = spectral_radius(&stochastic).unwrap();
        assert!((rho - 1.0).abs() < 1e-9);
    }

    #[test]
    fn upsilon_is_row_stochastic() {
        let dep = triangle_deployment(&[vec![4.0, 3.0], vec![8.0, 6.0]]);
        let (_, mats) = solve_sets(&dep);
        let ups = mats.upsilon();
        for r in 0..ups.nrows() {
            let sum: f64 = ups.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn error_contracts_through_p() {
        let dep = triangle_deployment(&[vec![4.0, 3.0], vec![8.0, 6.0], vec![3.0, 9.0]]);
        let (index, mats) = solve_sets(&dep);
        let truth = index.true_positions(&dep);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-50.0..50.0));
        let s = StateVector {
            x: x.clone(),
            u: index.anchor_positions(&dep),
        };
        let next = diloc_step(&s, &mats);
        let e_next = &truth - &next.x;
        let expected = &mats.p * (&truth - &x);
        assert!((e_next - expected).norm() < 1e-9);
    }
}
