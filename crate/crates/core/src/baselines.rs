//! Centralized Bayesian baselines: a linear Kalman filter and a bootstrap
//! particle filter with systematic resampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("innovation covariance is singular")]
    DegenerateMeasurement,
    #[error("all particle weights vanished")]
    DegenerateWeights,
}

#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    /// State transition.
    pub f: DMatrix<f64>,
    /// Process noise covariance.
    pub q: DMatrix<f64>,
    /// Measurement matrix.
    pub h: DMatrix<f64>,
    /// Measurement noise covariance.
    pub r: DMatrix<f64>,
}

pub fn kf_predict(belief: &GaussianBelief, model: &LinearGaussianModel) -> GaussianBelief {
    let mean = &model.f * &belief.mean;
    let cov = &model.f * &belief.cov * model.f.transpose() + &model.q;
    GaussianBelief {
        mean,
        cov: symmetrize(&cov),
    }
}

pub fn kf_update(
    belief: &GaussianBelief,
    model: &LinearGaussianModel,
    z: &DVector<f64>,
) -> Result<GaussianBelief, FilterError> {
    if z.len() != model.h.nrows() {
        return Err(FilterError::DimensionMismatch(format!(
            "measurement has {} rows, H has {}",
            z.len(),
            model.h.nrows()
        )));
    }
    let innovation = z - &model.h * &belief.mean;
    let s = &model.h * &belief.cov * model.h.transpose() + &model.r;
    let s_inv = s
        .clone()
        .try_inverse()
        .ok_or(FilterError::DegenerateMeasurement)?;
    let gain = &belief.cov * model.h.transpose() * s_inv;
    let mean = &belief.mean + &gain * innovation;
    let n = belief.mean.len();
    let cov = (DMatrix::identity(n, n) - &gain * &model.h) * &belief.cov;
    Ok(GaussianBelief {
        mean,
        cov: symmetrize(&cov),
    })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.particles[0].len());
        for (p, w) in self.particles.iter().zip(&self.weights) {
            acc += p * *w;
        }
        acc
    }

    /// Effective sample size, `1 / sum w^2`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Systematic resampling: one uniform offset, evenly spaced positions.
pub fn systematic_resample(set: &ParticleSet, rng: &mut ChaCha12Rng) -> ParticleSet {
    let n = set.particles.len();
    let offset = rng.gen_range(0.0..1.0) / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = set.weights[0];
    let mut idx = 0;
    for j in 0..n {
        let target = offset + j as f64 / n as f64;
        while cum < target && idx + 1 < n {
            idx += 1;
            cum += set.weights[idx];
        }
        out.push(set.particles[idx].clone());
    }
    ParticleSet {
        particles: out,
        weights: vec![1.0 / n as f64; n],
    }
}

/// Outcome of one bootstrap-filter step.
pub struct PfStep {
    pub set: ParticleSet,
    pub resampled: bool,
    /// Set when all likelihoods vanished and weights were reset to uniform.
    pub weight_reset: bool,
}

/// One bootstrap particle filter step: propagate through `dynamics`, weight
/// by `likelihood` against the measurement, resample when the effective
/// sample size drops below `resample_frac * n`.
pub fn pf_step<D, L>(
    set: &ParticleSet,
    mut dynamics: D,
    likelihood: L,
    resample_frac: f64,
    rng: &mut ChaCha12Rng,
) -> Result<PfStep, FilterError>
where
    D: FnMut(&DVector<f64>, &mut ChaCha12Rng) -> DVector<f64>,
    L: Fn(&DVector<f64>) -> f64,
{
    let n = set.particles.len();
    let mut particles = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (p, w) in set.particles.iter().zip(&set.weights) {
        let next = dynamics(p, rng);
        let lw = w * likelihood(&next);
        particles.push(next);
        weights.push(lw);
    }
    let total: f64 = weights.iter().sum();
    let mut weight_reset = false;
    if total <= 0.0 || !total.is_finite() {
        weights = vec![1.0 / n as f64; n];
        weight_reset = true;
    } else {
        for w in &mut weights {
            *w /= total;
        }
    }
    let mut out = ParticleSet { particles, weights };
    let mut resampled = false;
    if out.ess() < resample_frac * n as f64 {
        out = systematic_resample(&out, rng);
        resampled = true;
    }
    Ok(PfStep {
        set: out,
        resampled,
        weight_reset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn scalar_model(q: f64, r: f64) -> LinearGaussianModel {
        LinearGaussianModel {
            f: DMatrix::from_element(1, 1, 1.0),
            q: DMatrix::from_element(1, 1, q),
            h: DMatrix::from_element(1, 1, 1.0),
            r: DMatrix::from_element(1, 1, r),
        }
    }

    #[test]
    fn scalar_kf_matches_hand_recursion() {
        // Independent recursion with scalar arithmetic.
        let model = scalar_model(0.5, 2.0);
        let mut belief = GaussianBelief {
            mean: DVector::from_element(1, 0.0),
            cov: DMatrix::from_element(1, 1, 10.0),
        };
        let (mut m, mut p) = (0.0_f64, 10.0_f64);
        for z in [1.0, 0.5, 2.0, -1.0, 0.25] {
            belief = kf_predict(&belief, &model);
            belief = kf_update(&belief, &model, &DVector::from_element(1, z)).unwrap();
            let p_pred = p + 0.5;
            let k = p_pred / (p_pred + 2.0);
            m += k * (z - m);
            p = (1.0 - k) * p_pred;
            assert!((belief.mean[0] - m).abs() < 1e-12);
            assert!((belief.cov[(0, 0)] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn update_shrinks_variance() {
        let model = scalar_model(0.0, 1.0);
        let belief = GaussianBelief {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, 4.0),
        };
        let updated = kf_update(&belief, &model, &DVector::from_element(1, 1.0)).unwrap();
        assert!(updated.cov[(0, 0)] < belief.cov[(0, 0)]);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let mut model = scalar_model(0.0, 0.0);
        model.h = DMatrix::from_element(1, 1, 0.0);
        let belief = GaussianBelief {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, 1.0),
        };
        assert!(matches!(
            kf_update(&belief, &model, &DVector::from_element(1, 1.0)),
            Err(FilterError::DegenerateMeasurement)
        ));
    }

    #[test]
    fn pf_tracks_scalar_random_walk() {
        // Bootstrap PF on the same model the KF solves exactly; the PF mean
        // should land near the KF mean.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let model = scalar_model(0.5, 1.0);
        let q = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
        let n = 2000;
        let prior = Normal::new(0.0, 2.0).unwrap();
        let mut set = ParticleSet {
            particles: (0..n)
                .map(|_| DVector::from_element(1, prior.sample(&mut rng)))
                .collect(),
            weights: vec![1.0 / n as f64; n],
        };
        let mut belief = GaussianBelief {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, 4.0),
        };
        let mut truth = 0.0;
        for _ in 0..30 {
            truth += q.sample(&mut rng);
            let z = truth + Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
            belief = kf_predict(&belief, &model);
            belief = kf_update(&belief, &model, &DVector::from_element(1, z)).unwrap();
            let step = pf_step(
                &set,
                |p, r| DVector::from_element(1, p[0] + q.sample(r)),
                |p| (-0.5 * (z - p[0]).powi(2)).exp(),
                0.5,
                &mut rng,
            )
            .unwrap();
            set = step.set;
        }
        assert!((set.mean()[0] - belief.mean[0]).abs() < 0.3);
    }

    #[test]
    fn single_particle_filter_runs() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let set = ParticleSet {
            particles: vec![DVector::from_element(1, 0.0)],
            weights: vec![1.0],
        };
        let step = pf_step(&set, |p, _| p.clone(), |_| 1.0, 0.5, &mut rng).unwrap();
        assert_eq!(step.set.particles.len(), 1);
        assert!((step.set.weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vanishing_likelihood_resets_weights() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let set = ParticleSet {
            particles: vec![DVector::from_element(1, 0.0); 4],
            weights: vec![0.25; 4],
        };
        let step = pf_step(&set, |p, _| p.clone(), |_| 0.0, 0.5, &mut rng).unwrap();
        assert!(step.weight_reset);
        assert!((step.set.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_resample_preserves_heavy_particles() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let set = ParticleSet {
            particles: (0..4).map(|i| DVector::from_element(1, i as f64)).collect(),
            weights: vec![0.97, 0.01, 0.01, 0.01],
        };
        let out = systematic_resample(&set, &mut rng);
        let heavy = out.particles.iter().filter(|p| p[0] == 0.0).count();
        assert!(heavy >= 3);
    }
}
