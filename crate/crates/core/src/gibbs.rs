//! Exact Gaussian solutions of the single-stage control problem, its Gibbs measure
//! and the dual linear-Gaussian filter, together with the weighted-ensemble
//! (importance sampling) approximation of a Gibbs measure.
//!
//! The control problem is fixed: `X₁ = x₀ + U + V₁`, `V₁ ~ N(0, I)`, stage cost
//! `½|X₁|² + ½|U|²`. Its uncontrolled law is `ρ⁰ = N(x₀, I)` and the Gibbs measure
//! `ρ*(dx) ∝ e^{-½|x|²} ρ⁰(dx) = N(x₀/2, ½I)`.

use std::f64::consts::LN_2;

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::linalg::{
    gain_from_covariances, sample_gaussian, Ensemble, GaussianSpec, SpdMatrix, StateVector,
};
use crate::rng::RngStream;

/// Effective sample sizes below this fraction of `N` are reported as degenerate.
pub const ESS_WARNING_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SocpInstance {
    x0: StateVector,
}

impl SocpInstance {
    pub fn new(x0: StateVector) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::InvalidConfig("dimension must be at least 1".into()));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("initial state must be finite".into()));
        }
        Ok(Self { x0 })
    }

    pub fn zero(d: usize) -> Self {
        assert!(d >= 1, "dimension must be at least 1");
        Self {
            x0: StateVector::zeros(d),
        }
    }

    pub fn from_slice(x0: &[f64]) -> Result<Self> {
        Self::new(StateVector::from_column_slice(x0))
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn x0(&self) -> &StateVector {
        &self.x0
    }

    /// `ρ⁰ = N(x₀, I)`, the law of `X₁` under `U = 0`.
    pub fn uncontrolled_law(&self) -> GaussianSpec {
        GaussianSpec::isotropic(self.x0.clone(), 1.0)
    }

    /// `ρᵘ = N(x₀ + u, I)`.
    pub fn controlled_law(&self, u: &StateVector) -> GaussianSpec {
        GaussianSpec::isotropic(&self.x0 + u, 1.0)
    }

    pub(crate) fn check_dim(&self, v: &StateVector) -> Result<()> {
        if v.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            })
        }
    }
}

/// Nonnegative cost evaluated on a particle.
pub trait CostFunction {
    fn cost(&self, x: &[f64]) -> f64;
}

impl<F> CostFunction for F
where
    F: Fn(&[f64]) -> f64,
{
    fn cost(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// `c(x) = ½|x|²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticCost;

impl CostFunction for QuadraticCost {
    fn cost(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Negative log-likelihood `c(y; z) = ½|z − h(y)|²_{R⁻¹}` of the observation model
/// `Z = h(Y) + W`, `W ~ N(0, R)`.
pub struct LogLikelihood<H> {
    z: StateVector,
    r_chol: Cholesky<f64, nalgebra::Dyn>,
    h: H,
}

impl<H> LogLikelihood<H>
where
    H: Fn(&[f64]) -> StateVector,
{
    pub fn new(z: StateVector, r: &SpdMatrix, h: H) -> Result<Self> {
        if z.len() != r.dim() {
            return Err(Error::DimensionMismatch {
                expected: z.len(),
                got: r.dim(),
            });
        }
        let r_chol = Cholesky::new(r.as_matrix().clone())
            .ok_or_else(|| Error::NotSpd("observation noise covariance".into()))?;
        Ok(Self { z, r_chol, h })
    }
}

impl<H> CostFunction for LogLikelihood<H>
where
    H: Fn(&[f64]) -> StateVector,
{
    fn cost(&self, y: &[f64]) -> f64 {
        let innovation = &self.z - (self.h)(y);
        // |e|²_{R⁻¹} = |L⁻¹ e|² with R = L Lᵀ
        let whitened = self
            .r_chol
            .l()
            .solve_lower_triangular(&innovation)
            .expect("Cholesky factor has a positive diagonal");
        0.5 * whitened.norm_squared()
    }
}

/// How raw weights are turned into weights averaging one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightNormalization {
    /// Divide by the empirical mean of the raw weights.
    SelfNormalized,
    /// Divide by a known expectation, given as its logarithm.
    Exact { log_normalizer: f64 },
}

/// Particles with importance weights. Weights are scaled so that `(1/N)Σ wᵢ = 1`
/// when `normalized` is set.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    pub particles: Ensemble,
    pub weights: StateVector,
    pub normalized: bool,
    log_mean_raw_weight: f64,
}

impl WeightedEnsemble {
    /// Builds the ensemble from log raw weights, exponentiating after subtracting
    /// the maximum.
    pub fn from_log_weights(
        particles: Ensemble,
        log_weights: &[f64],
        normalization: WeightNormalization,
    ) -> Result<Self> {
        let n = particles.ncols();
        if n == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        assert_eq!(n, log_weights.len(), "one log-weight per particle");
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights {
                max_log_weight: max,
                min_cost: -max,
            });
        }
        let shifted: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
        let sum: f64 = shifted.iter().sum();
        let log_mean_raw_weight = max + sum.ln() - (n as f64).ln();

        let (weights, normalized) = match normalization {
            WeightNormalization::SelfNormalized => {
                let scale = n as f64 / sum;
                (shifted.iter().map(|w| w * scale).collect::<Vec<_>>(), true)
            }
            WeightNormalization::Exact { log_normalizer } => {
                let w: Vec<f64> = log_weights
                    .iter()
                    .map(|lw| (lw - log_normalizer).exp())
                    .collect();
                if w.iter().all(|&v| v == 0.0) {
                    return Err(Error::DegenerateWeights {
                        max_log_weight: max - log_normalizer,
                        min_cost: -max,
                    });
                }
                (w, false)
            }
        };
        Ok(Self {
            particles,
            weights: StateVector::from_vec(weights),
            normalized,
            log_mean_raw_weight,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    /// `(1/N) Σ wᵢ xᵢ`; the Gibbs-mean estimate.
    pub fn weighted_mean(&self) -> StateVector {
        (&self.particles * &self.weights) / self.len() as f64
    }

    /// `(Σ wᵢ)² / Σ wᵢ²`, invariant to the weight scale.
    pub fn ess(&self) -> f64 {
        let s: f64 = self.weights.sum();
        let s2: f64 = self.weights.norm_squared();
        s * s / s2
    }

    pub fn max_weight_share(&self) -> f64 {
        self.weights.max() / self.weights.sum()
    }

    pub fn is_degenerate(&self) -> bool {
        self.ess() < ESS_WARNING_FRACTION * self.len() as f64
    }

    /// `−log((1/N) Σ e^{−c(Xⁱ)})`, the empirical free energy when the raw weights
    /// are `e^{−c}`.
    pub fn free_energy_estimate(&self) -> f64 {
        -self.log_mean_raw_weight
    }
}

/// `u* = −x₀/2`.
pub fn exact_optimal_control(instance: &SocpInstance) -> StateVector {
    instance.x0() * -0.5
}

/// `ρ* = N(x₀/2, ½I)`.
pub fn exact_gibbs_measure(instance: &SocpInstance) -> GaussianSpec {
    GaussianSpec::isotropic(instance.x0() * 0.5, 0.5)
}

/// `D(ρᵘ ‖ ρ⁰) = ½|u|²`.
pub fn kl_controlled_vs_uncontrolled(u: &StateVector) -> f64 {
    0.5 * u.norm_squared()
}

/// `E[½|X₁|² + ½|u|²]` for deterministic `u`, with `X₁ ~ N(x₀ + u, I)`.
pub fn expected_total_cost(instance: &SocpInstance, u: &StateVector) -> Result<f64> {
    instance.check_dim(u)?;
    let d = instance.dim() as f64;
    Ok(0.5 * ((instance.x0() + u).norm_squared() + d) + 0.5 * u.norm_squared())
}

/// `F = −log ρ⁰(e^{−c}) = (d/2) ln 2 + |x₀|²/4`.
pub fn free_energy(instance: &SocpInstance) -> f64 {
    0.5 * instance.dim() as f64 * LN_2 + 0.25 * instance.x0().norm_squared()
}

/// `D(p ‖ q)` between Gaussians.
pub fn kl_gaussian(p: &GaussianSpec, q: &GaussianSpec) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    let d = p.dim() as f64;
    let q_chol = Cholesky::new(q.cov.as_matrix().clone())
        .ok_or_else(|| Error::NotSpd("reference covariance".into()))?;
    let p_chol = Cholesky::new(p.cov.as_matrix().clone())
        .ok_or_else(|| Error::NotSpd("candidate covariance".into()))?;
    let trace_term = q_chol.solve(p.cov.as_matrix()).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&q_chol.solve(&diff));
    let log_det = |c: &Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    Ok(0.5 * (trace_term + maha - d + log_det(&q_chol) - log_det(&p_chol)))
}

/// `μ(c)` for `c = ½|x|²` and Gaussian `μ`: `½(|m|² + tr S)`.
pub fn expected_quadratic_cost(mu: &GaussianSpec) -> f64 {
    0.5 * (mu.mean.norm_squared() + mu.cov.trace())
}

/// Gibbs objective `D(μ ‖ ρ⁰) + μ(c)` for a Gaussian candidate.
pub fn gibbs_objective(instance: &SocpInstance, mu: &GaussianSpec) -> Result<f64> {
    Ok(kl_gaussian(mu, &instance.uncontrolled_law())? + expected_quadratic_cost(mu))
}

/// Importance-sampling approximation of the Gibbs measure of `(prior, cost)`.
pub fn gibbs_empirical(
    prior: &GaussianSpec,
    cost: &dyn CostFunction,
    n: usize,
    rng: &mut RngStream,
) -> Result<WeightedEnsemble> {
    let particles = sample_gaussian(prior, n, rng)?;
    let d = prior.dim();
    let log_w: Vec<f64> = particles
        .as_slice()
        .chunks_exact(d)
        .map(|x| -cost.cost(x))
        .collect();
    WeightedEnsemble::from_log_weights(particles, &log_w, WeightNormalization::SelfNormalized)
}

/// Conjugate update for `Z = Y + W`, `Y ~ prior`, `W ~ N(0, R)`, computed with the
/// Kalman gain `K = Θ(Θ + R)⁻¹`: mean `θ + K(z − θ)`, covariance `(I − K)Θ`.
pub fn linear_gaussian_posterior(
    prior: &GaussianSpec,
    noise_cov: &SpdMatrix,
    z: &StateVector,
) -> Result<GaussianSpec> {
    if z.len() != prior.dim() {
        return Err(Error::DimensionMismatch {
            expected: prior.dim(),
            got: z.len(),
        });
    }
    let gain = gain_from_covariances(&prior.cov, noise_cov)?.matrix;
    let mean = &prior.mean + &gain * (z - &prior.mean);
    let d = prior.dim();
    let cov = (DMatrix::identity(d, d) - &gain) * prior.cov.as_matrix();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianSpec::new(mean, SpdMatrix::new(cov)?)
}

/// Posterior of the dual filter `Z₁ = Y₀ + W₁`, `Y₀ ~ N(x₀, I)`, `W₁ ~ N(0, I)`
/// given `Z₁ = z`: `N((x₀ + z)/2, ½I)`.
pub fn dual_filter_posterior(instance: &SocpInstance, z: &StateVector) -> Result<GaussianSpec> {
    instance.check_dim(z)?;
    linear_gaussian_posterior(
        &instance.uncontrolled_law(),
        &SpdMatrix::identity(instance.dim()),
        z,
    )
}

/// Draws of `X₁` under the non-adapted control `U* = u* + (1/√2 − 1)V₁`.
pub fn sample_nonadapted_optimal(
    instance: &SocpInstance,
    n: usize,
    rng: &mut RngStream,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let d = instance.dim();
    let u_star = exact_optimal_control(instance);
    let noise_factor = std::f64::consts::FRAC_1_SQRT_2 - 1.0;
    let mut v = DMatrix::<f64>::zeros(d, n);
    rng.fill_standard_normal(v.as_mut_slice());
    let mut x = v.clone();
    for (mut xc, vc) in x.column_iter_mut().zip(v.column_iter()) {
        let control = &u_star + vc * noise_factor;
        xc.copy_from(&(instance.x0() + control + vc));
    }
    Ok(x)
}
