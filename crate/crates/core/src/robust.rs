//! Noise-robust static iterations: link failures (R0), communication noise
//! (R1), single-shot noisy ranging (R2a) and consistent range estimation
//! (R2b), the DLRE and DILAND updates, and their step-size schedules.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

use crate::diloc::{DilocError, SystemMatrices};

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("rejected for {algo:?}: {reason}")]
    Rejected { algo: Algo, reason: String },
    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Dlre,
    Diland,
}

/// Step-size schedule `alpha(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `a / (k + k0)`; satisfies both persistence conditions.
    Harmonic {
        a: f64,
        k0: f64,
    },
    /// `a / (k + 1)^tau`.
    PowerLaw {
        a: f64,
        tau: f64,
    },
    Constant {
        c: f64,
    },
}

impl StepSchedule {
    pub fn alpha(&self, k: usize) -> f64 {
        let k = k as f64;
        match *self {
            StepSchedule::Harmonic { a, k0 } => a / (k + k0),
            StepSchedule::PowerLaw { a, tau } => a / (k + 1.0).powf(tau),
            StepSchedule::Constant { c } => c,
        }
    }
}

/// DLRE needs `sum alpha = inf` and `sum alpha^2 < inf`; DILAND only needs
/// nonnegative steps with a divergent sum.
pub fn validate_schedule(s: &StepSchedule, algo: Algo) -> Result<(), ScheduleError> {
    let positive = |v: f64, name: &str| {
        if v > 0.0 {
            Ok(())
        } else {
            Err(ScheduleError::InvalidParams(format!(
                "{name} must be positive"
            )))
        }
    };
    match *s {
        StepSchedule::Harmonic { a, k0 } => {
            positive(a, "a")?;
            positive(k0, "k0")?;
            Ok(())
        }
        StepSchedule::PowerLaw { a, tau } => {
            positive(a, "a")?;
            if tau > 1.0 {
                return Err(ScheduleError::Rejected {
                    algo,
                    reason: "tau > 1 makes sum(alpha) finite".into(),
                });
            }
            if algo == Algo::Dlre && tau <= 0.5 {
                return Err(ScheduleError::Rejected {
                    algo,
                    reason: "tau <= 1/2 makes sum(alpha^2) infinite".into(),
                });
            }
            Ok(())
        }
        StepSchedule::Constant { c } => {
            positive(c, "c")?;
            if algo == Algo::Dlre {
                return Err(ScheduleError::Rejected {
                    algo,
                    reason: "constant steps have sum(alpha^2) = inf".into(),
                });
            }
            Ok(())
        }
    }
}

/// A triangulation-set member resolved to a system-matrix index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    /// Agent row index.
    Agent(usize),
    /// Anchor column index.
    Anchor(usize),
}

/// An agent's frozen triangulation set in index space, with weights that a
/// caller may replace per step (noisy re-computation).
#[derive(Debug, Clone)]
pub struct WeightedSet {
    /// Agent row of the owner.
    pub owner: usize,
    pub members: Vec<Member>,
    pub weights: Vec<f64>,
}

/// Link activation probabilities, `q[agent row][member]` with agents first.
#[derive(Debug, Clone)]
pub struct LinkModel {
    q: DMatrix<f64>,
    n_agents: usize,
}

impl LinkModel {
    pub fn uniform(n_agents: usize, n_anchors: usize, q: f64) -> Self {
        assert!(q > 0.0 && q <= 1.0, "link probability must be in (0, 1]");
        Self {
            q: DMatrix::from_element(n_agents, n_agents + n_anchors, q),
            n_agents,
        }
    }

    pub fn set(&mut self, owner: usize, member: Member, q: f64) {
        assert!(q > 0.0 && q <= 1.0);
        let col = self.col(member);
        self.q[(owner, col)] = q;
    }

    fn col(&self, member: Member) -> usize {
        match member {
            Member::Agent(j) => j,
            Member::Anchor(a) => self.n_agents + a,
        }
    }

    pub fn q(&self, owner: usize, member: Member) -> f64 {
        self.q[(owner, self.col(member))]
    }
}

/// Per-link sample for one DLRE step: activation plus communication noise on
/// the received state (one row vector of dimension m).
#[derive(Debug, Clone)]
pub struct LinkSample {
    pub active: bool,
    pub noise: Vec<f64>,
}

impl LinkSample {
    pub fn clean() -> Self {
        Self {
            active: true,
            noise: Vec::new(),
        }
    }
}

/// One DLRE step: per agent,
/// `x_i <- (1 - a) x_i + a [ sum_j e p_hat / q (x_j + v) + sum e b_hat / q (u + v) ]`.
/// `samples[i]` must align with `sets[i].members`; dormant links contribute
/// nothing, active ones are divided by the link probability.
pub fn dlre_step(
    x: &DMatrix<f64>,
    u: &DMatrix<f64>,
    sets: &[WeightedSet],
    links: &LinkModel,
    samples: &[Vec<LinkSample>],
    alpha: f64,
) -> Result<DMatrix<f64>, DilocError> {
    let m = x.ncols();
    let mut next = x.clone();
    for (set, set_samples) in sets.iter().zip(samples) {
        let i = set.owner;
        let mut innovation = vec![0.0; m];
        for ((member, &w), sample) in set.members.iter().zip(&set.weights).zip(set_samples) {
            if !sample.active {
                continue;
            }
            let q = links.q(i, *member);
            if q <= 0.0 {
                return Err(DilocError::DimensionMismatch(
                    "link probability must be positive for a set member".into(),
                ));
            }
            let scaled = w / q;
            let src = match *member {
                Member::Agent(j) => x.row(j),
                Member::Anchor(a) => u.row(a),
            };
            for (c, v) in innovation.iter_mut().enumerate() {
                *v += scaled * (src[c] + sample.noise.get(c).copied().unwrap_or(0.0));
            }
        }
        for c in 0..m {
            next[(i, c)] = (1.0 - alpha) * x[(i, c)] + alpha * innovation[c];
        }
    }
    Ok(next)
}

/// One DILAND step: `x_i <- (1 - a) x_i + a [ sum p_bar x_j + sum b_bar u ]`,
/// with weights computed from history-averaged distances.
pub fn diland_step(
    x: &DMatrix<f64>,
    u: &DMatrix<f64>,
    sets: &[WeightedSet],
    alpha: f64,
) -> DMatrix<f64> {
    let m = x.ncols();
    let mut next = x.clone();
    for set in sets {
        let i = set.owner;
        let mut innovation = vec![0.0; m];
        for (member, &w) in set.members.iter().zip(&set.weights) {
            match *member {
                Member::Agent(j) => {
                    for c in 0..m {
                        innovation[c] += w * x[(j, c)];
                    }
                }
                Member::Anchor(a) => {
                    for c in 0..m {
                        innovation[c] += w * u[(a, c)];
                    }
                }
            }
        }
        for c in 0..m {
            next[(i, c)] = (1.0 - alpha) * x[(i, c)] + alpha * innovation[c];
        }
    }
    next
}

/// Steady-state limit of DLRE under biased weights:
/// `(I - P - S_P)^{-1} (B + S_B) u`.
pub fn bias_of_limit(
    p: &DMatrix<f64>,
    s_p: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s_b: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DilocError> {
    let mats = SystemMatrices {
        p: p + s_p,
        b: b + s_b,
    };
    crate::diloc::closed_form_limit(&mats, u)
}

/// Per-link running mean of all past distance measurements (R2b).
#[derive(Debug, Clone, Default)]
pub struct ConsistentRangeEstimator {
    stats: HashMap<(usize, usize), (u64, f64)>,
}

impl ConsistentRangeEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(i: usize, j: usize) -> (usize, usize) {
        if i < j {
            (i, j)
        } else {
            (j, i)
        }
    }

    pub fn observe(&mut self, i: usize, j: usize, measured: f64) {
        let entry = self.stats.entry(Self::key(i, j)).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += (measured - entry.1) / entry.0 as f64;
    }

    pub fn mean(&self, i: usize, j: usize) -> Option<f64> {
        self.stats.get(&Self::key(i, j)).map(|&(_, m)| m)
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.stats
            .get(&Self::key(i, j))
            .map(|&(c, _)| c)
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn harmonic_passes_both() {
        let s = StepSchedule::Harmonic { a: 1.0, k0: 1.0 };
        assert!(validate_schedule(&s, Algo::Dlre).is_ok());
        assert!(validate_schedule(&s, Algo::Diland).is_ok());
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.alpha(9), 0.1);
    }

    #[test]
    fn constant_rejected_for_dlre_only() {
        let s = StepSchedule::Constant { c: 0.5 };
        assert!(matches!(
            validate_schedule(&s, Algo::Dlre),
            Err(ScheduleError::Rejected { .. })
        ));
        assert!(validate_schedule(&s, Algo::Diland).is_ok());
    }

    #[test]
    fn steep_power_law_rejected_for_both() {
        let s = StepSchedule::PowerLaw { a: 1.0, tau: 2.0 };
        assert!(validate_schedule(&s, Algo::Dlre).is_err());
        assert!(validate_schedule(&s, Algo::Diland).is_err());
    }

    #[test]
    fn shallow_power_law_rejected_for_dlre() {
        let s = StepSchedule::PowerLaw { a: 1.0, tau: 0.5 };
        assert!(validate_schedule(&s, Algo::Dlre).is_err());
        assert!(validate_schedule(&s, Algo::Diland).is_ok());
    }

    fn toy_system() -> (DMatrix<f64>, DMatrix<f64>, Vec<WeightedSet>) {
        // One agent updating against two anchors and itself-free set, plus a
        // second agent mixing the first with an anchor.
        let x = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 0.5, 2.0]);
        let u = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 10.0, 10.0]);
        let sets = vec![
            WeightedSet {
                owner: 0,
                members: vec![Member::Anchor(0), Member::Anchor(1), Member::Agent(1)],
                weights: vec![0.25, 0.25, 0.5],
            },
            WeightedSet {
                owner: 1,
                members: vec![Member::Agent(0), Member::Anchor(0), Member::Anchor(1)],
                weights: vec![0.2, 0.4, 0.4],
            },
        ];
        (x, u, sets)
    }

    fn clean_samples(sets: &[WeightedSet]) -> Vec<Vec<LinkSample>> {
        sets.iter()
            .map(|s| s.members.iter().map(|_| LinkSample::clean()).collect())
            .collect()
    }

    #[test]
    fn noiseless_dlre_with_unit_alpha_is_diloc() {
        let (x, u, sets) = toy_system();
        let links = LinkModel::uniform(2, 2, 1.0);
        let dlre = dlre_step(&x, &u, &sets, &links, &clean_samples(&sets), 1.0).unwrap();
        let diland = diland_step(&x, &u, &sets, 1.0);
        assert!((&dlre - &diland).norm() < 1e-15);
        // Manual DILOC row 0: 0.25*u0 + 0.25*u1 + 0.5*x1.
        assert!((dlre[(0, 0)] - (0.25 * 0.0 + 0.25 * 10.0 + 0.5 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn all_dormant_links_shrink_toward_origin() {
        let (x, u, sets) = toy_system();
        let links = LinkModel::uniform(2, 2, 0.5);
        let samples: Vec<Vec<LinkSample>> = sets
            .iter()
            .map(|s| {
                s.members
                    .iter()
                    .map(|_| LinkSample {
                        active: false,
                        noise: Vec::new(),
                    })
                    .collect()
            })
            .collect();
        let alpha = 0.3;
        let next = dlre_step(&x, &u, &sets, &links, &samples, alpha).unwrap();
        assert!((&next - &(&x * (1.0 - alpha))).norm() < 1e-12);
    }

    #[test]
    fn dlre_innovation_expectation_matches_p_b() {
        // Average of sampled innovations approaches (P + S_P) x + (B + S_B) u.
        let (x, u, sets) = toy_system();
        let q = 0.7;
        let links = LinkModel::uniform(2, 2, q);
        let sigma = 0.05;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let normal = Normal::new(0.0, sigma).unwrap();
        let trials = 100_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..trials {
            let samples: Vec<Vec<LinkSample>> = sets
                .iter()
                .map(|s| {
                    s.members
                        .iter()
                        .map(|_| LinkSample {
                            active: rng.gen::<f64>() < q,
                            noise: (0..2).map(|_| normal.sample(&mut rng)).collect(),
                        })
                        .collect()
                })
                .collect();
            // alpha = 1 makes the step output exactly the innovation.
            acc += dlre_step(&x, &u, &sets, &links, &samples, 1.0).unwrap();
        }
        acc /= trials as f64;
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.2, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.25, 0.25, 0.4, 0.4]);
        let expected = &p * &x + &b * &u;
        // 4 standard errors of the Monte Carlo mean; dominated by the
        // Bernoulli link term w/q * state.
        let tol = 4.0 * 10.0 / (trials as f64).sqrt();
        assert!((acc - expected).norm() < tol);
    }

    #[test]
    fn single_sample_mean_equals_sample() {
        let mut est = ConsistentRangeEstimator::new();
        est.observe(2, 7, 3.25);
        assert_eq!(est.mean(7, 2), Some(3.25));
        assert_eq!(est.count(2, 7), 1);
    }

    #[test]
    fn running_mean_concentrates() {
        let d = 4.0;
        let sigma = 0.5;
        let mut failures = 0;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, sigma).unwrap();
        let trials = 1000;
        let n = 400;
        for _ in 0..trials {
            let mut est = ConsistentRangeEstimator::new();
            for _ in 0..n {
                est.observe(0, 1, d + normal.sample(&mut rng));
            }
            if (est.mean(0, 1).unwrap() - d).abs() > 5.0 * sigma / (n as f64).sqrt() {
                failures += 1;
            }
        }
        // 5 sigma leaves essentially no mass; allow 1% failures.
        assert!(
            failures <= trials / 100,
            "{failures} of {trials} outside the band"
        );
    }

    #[test]
    fn bias_formula_degenerates_without_bias() {
        let p = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DMatrix::from_row_slice(1, 3, &[0.2, 0.3, 0.5]);
        let u = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 4.0, 0.0, 0.0, 4.0]);
        let z1 = DMatrix::zeros(1, 1);
        let z3 = DMatrix::zeros(1, 3);
        let unbiased = bias_of_limit(&p, &z1, &b, &z3, &u).unwrap();
        let plain = crate::diloc::closed_form_limit(
            &SystemMatrices {
                p: p.clone(),
                b: b.clone(),
            },
            &u,
        )
        .unwrap();
        assert!((&unbiased - &plain).norm() < 1e-12);

        // Small synthetic S_B shifts the limit by (I - P)^{-1} S_B u.
        let s_b = DMatrix::from_row_slice(1, 3, &[0.01, -0.005, 0.0]);
        let biased = bias_of_limit(&p, &z1, &b, &s_b, &u).unwrap();
        let shift = &s_b * &u; // (I - P)^{-1} = I here
        assert!((&biased - &plain - shift).norm() < 1e-12);
    }
}
