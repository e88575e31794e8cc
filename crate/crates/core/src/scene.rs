//! Deployment and neighborhood model: node roster, communication radius,
//! neighbor queries and triangulation-set search.

use crate::geometry::{
    self, dist, BarycentricWeights, GeometryError, Inclusion, Point, Simplex, SquaredDistanceMatrix,
};
use itertools::Itertools;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid deployment: {0}")]
    InvalidDeployment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Agent,
    Anchor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub role: Role,
    pub pos: Point,
    /// Current location estimate; anchors always report their true position.
    #[serde(skip)]
    pub est_pos: Point,
}

impl Node {
    pub fn new(id: usize, role: Role, pos: Point) -> Self {
        let est_pos = pos.clone();
        Self {
            id,
            role,
            pos,
            est_pos,
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Region {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Region {
    pub fn square(side: f64, dim: usize) -> Self {
        Self {
            min: vec![0.0; dim],
            max: vec![side; dim],
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.min.len()
            && p.iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Deployment {
    pub dim: usize,
    pub region: Region,
    pub comm_radius: f64,
    pub nodes: Vec<Node>,
}

impl Deployment {
    pub fn new(
        dim: usize,
        region: Region,
        comm_radius: f64,
        nodes: Vec<Node>,
    ) -> Result<Self, SceneError> {
        let dep = Self {
            dim,
            region,
            comm_radius,
            nodes,
        };
        dep.validate()?;
        Ok(dep)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.comm_radius <= 0.0 {
            return Err(SceneError::InvalidDeployment(
                "comm_radius must be positive".into(),
            ));
        }
        if self.region.min.len() != self.dim || self.region.max.len() != self.dim {
            return Err(SceneError::InvalidDeployment(
                "region dimension mismatch".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(SceneError::InvalidDeployment(format!(
                    "duplicate node id {}",
                    n.id
                )));
            }
            if n.pos.len() != self.dim {
                return Err(SceneError::InvalidDeployment(format!(
                    "node {} has dimension {} != {}",
                    n.id,
                    n.pos.len(),
                    self.dim
                )));
            }
            if !self.region.contains(&n.pos) {
                return Err(SceneError::InvalidDeployment(format!(
                    "node {} lies outside the region",
                    n.id
                )));
            }
        }
        Ok(())
    }

    pub fn node(&self, id: usize) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: usize) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn agents(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.role == Role::Agent)
    }

    pub fn anchors(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.role == Role::Anchor)
    }

    /// All nodes within the (closed) communication ball of node `i`,
    /// measured on true positions.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>, SceneError> {
        let me = self
            .node(i)
            .ok_or_else(|| SceneError::InvalidInput(format!("unknown node id {i}")))?;
        let mut out: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| n.id != i && dist(&n.pos, &me.pos) <= self.comm_radius)
            .map(|n| n.id)
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn true_distance(&self, i: usize, j: usize) -> f64 {
        dist(&self.node(i).unwrap().pos, &self.node(j).unwrap().pos)
    }

    /// After moving nodes, re-pin anchor estimates to their true positions.
    pub fn sync_anchor_estimates(&mut self) {
        for n in &mut self.nodes {
            if n.role == Role::Anchor {
                n.est_pos = n.pos.clone();
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        let dep: Deployment =
            serde_json::from_str(s).map_err(|e| SceneError::InvalidDeployment(e.to_string()))?;
        let mut dep = dep;
        for n in &mut dep.nodes {
            n.est_pos = n.pos.clone();
        }
        dep.validate()?;
        Ok(dep)
    }
}

/// Provider of (possibly noisy or estimated) inter-node distances.
pub trait DistanceSource {
    fn dist(&mut self, i: usize, j: usize) -> f64;
}

/// Exact distances from true positions.
pub struct TrueDistances<'a>(pub &'a Deployment);

impl DistanceSource for TrueDistances<'_> {
    fn dist(&mut self, i: usize, j: usize) -> f64 {
        self.0.true_distance(i, j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// First passing subset in lexicographic member order.
    FirstPassing,
    /// Among passing subsets, maximize the minimum barycentric weight;
    /// better conditioned under noise.
    #[default]
    MaxMinWeight,
}

/// How a candidate subset is admitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InclusionRule {
    /// Strict-interior inclusion test at the given relative tolerance.
    Exact { tol_rel: f64 },
    /// Noise gates: skip subsets whose determinants have the wrong sign and
    /// subsets whose relative inclusion error is at least `epsilon`.
    Gated { epsilon: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub rule: InclusionRule,
    pub policy: SelectionPolicy,
    /// Evaluate at most this many subsets per query.
    pub max_subsets: usize,
    /// Reject sets containing an anchor whose barycentric weight falls below
    /// this floor (0 disables the check).
    pub anchor_weight_floor: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            rule: InclusionRule::Exact { tol_rel: 1e-9 },
            policy: SelectionPolicy::MaxMinWeight,
            max_subsets: 200,
            anchor_weight_floor: 0.0,
        }
    }
}

/// An agent's chosen `m + 1` neighbors plus their barycentric weights.
#[derive(Debug, Clone)]
pub struct TriangulationSet {
    pub owner: usize,
    pub members: Vec<usize>,
    pub weights: BarycentricWeights,
    pub anchor_mask: Vec<bool>,
}

impl TriangulationSet {
    pub fn anchor_count(&self) -> usize {
        self.anchor_mask.iter().filter(|a| **a).count()
    }
}

struct Candidate {
    members: Vec<usize>,
    weights: BarycentricWeights,
    min_weight: f64,
    anchors: usize,
}

/// Searches the `(m + 1)`-subsets of `i`'s neighborhood for a set whose
/// convex hull strictly contains `i`, using distances from `dist_source`.
/// Returns `None` when no subset passes (the no-update case in mobile runs).
pub fn find_triangulation_set(
    dep: &Deployment,
    i: usize,
    dist_source: &mut dyn DistanceSource,
    opts: &SearchOptions,
) -> Result<Option<TriangulationSet>, SceneError> {
    let neighbors = dep.neighbors(i)?;
    let need = dep.dim + 1;
    if neighbors.len() < need {
        return Ok(None);
    }

    // One sample per unordered pair per query, so a noisy source stays
    // consistent across the subsets that share a link.
    let mut cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut d = |a: usize, b: usize, src: &mut dyn DistanceSource| -> f64 {
        let key = if a < b { (a, b) } else { (b, a) };
        *cache.entry(key).or_insert_with(|| src.dist(key.0, key.1))
    };

    let mut best: Option<Candidate> = None;
    let mut evaluated = 0usize;
    'subsets: for combo in neighbors.iter().cloned().combinations(need) {
        if evaluated >= opts.max_subsets {
            break;
        }
        evaluated += 1;
        let sq =
            SquaredDistanceMatrix::from_distances(need, |l, j| d(combo[l], combo[j], dist_source));
        let simplex = match Simplex::new(dep.dim, combo.clone(), sq) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let i_dists: Vec<f64> = combo.iter().map(|&j| d(i, j, dist_source)).collect();

        let weights = match opts.rule {
            InclusionRule::Exact { tol_rel } => {
                match geometry::inclusion_test(&i_dists, &simplex, tol_rel) {
                    Ok(Inclusion::Inside) => {
                        match geometry::barycentric_weights(&i_dists, &simplex, tol_rel) {
                            Ok(w) => w,
                            Err(_) => continue,
                        }
                    }
                    _ => continue,
                }
            }
            InclusionRule::Gated { epsilon } => {
                // M1: wrong-sign determinant. M2: relative inclusion error.
                let comps = match geometry::component_volumes(&i_dists, &simplex) {
                    Ok(c) => c,
                    Err(GeometryError::NegativeSquaredVolume(_)) => continue,
                    Err(_) => continue,
                };
                let eps_rel = (comps.iter().sum::<f64>() - simplex.hypervolume()).abs()
                    / simplex.hypervolume();
                if eps_rel >= epsilon {
                    continue;
                }
                let sum: f64 = comps.iter().sum();
                if sum <= 0.0 {
                    continue;
                }
                // M3: renormalize so the weights sum to one exactly.
                match geometry::barycentric_weights_unchecked(&comps) {
                    Some(w) => w,
                    None => continue,
                }
            }
        };

        let anchors = combo
            .iter()
            .filter(|&&j| dep.node(j).map(|n| n.role == Role::Anchor).unwrap_or(false))
            .count();
        if opts.anchor_weight_floor > 0.0 {
            for (idx, &j) in combo.iter().enumerate() {
                if dep.node(j).map(|n| n.role == Role::Anchor).unwrap_or(false)
                    && weights.weights()[idx] < opts.anchor_weight_floor
                {
                    continue 'subsets;
                }
            }
        }
        let min_weight = weights
            .weights()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let cand = Candidate {
            members: combo,
            weights,
            min_weight,
            anchors,
        };

        match opts.policy {
            SelectionPolicy::FirstPassing => {
                best = Some(cand);
                break;
            }
            SelectionPolicy::MaxMinWeight => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        cand.min_weight > b.min_weight
                            || (cand.min_weight == b.min_weight && cand.anchors > b.anchors)
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
    }

    Ok(best.map(|c| {
        let anchor_mask = c
            .members
            .iter()
            .map(|&j| dep.node(j).map(|n| n.role == Role::Anchor).unwrap_or(false))
            .collect();
        TriangulationSet {
            owner: i,
            members: c.members,
            weights: c.weights,
            anchor_mask,
        }
    }))
}
