//! Interacting particle system (ensemble Kalman type) controller.
//!
//! Equal-weight particles `Y₀ⁱ ~ N(x₀, I)` are moved by
//! `Y₁ⁱ = Y₀ⁱ − L (Y₀ⁱ + W₀ⁱ)` with `W₀ⁱ ~ N(0, I)`, the analysis step of the dual
//! filter observed at `z = 0`. The control estimate is `mean(Y₁) − x₀`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gibbs::SocpInstance;
use crate::linalg::{
    column_mean, empirical_moments, gain_from_covariances, Ensemble, GaussianSpec, SpdMatrix,
    StateVector,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GainMode {
    /// `L = Σ⁽ᴺ⁾(Σ⁽ᴺ⁾ + I)⁻¹` from the run's own ensemble.
    Empirical,
    /// `L = Cov(Y₀)(Cov(Y₀) + Cov(W₀))⁻¹ = ½I` with exact covariances.
    MeanField,
}

#[derive(Debug, Clone, Copy)]
pub struct IpsConfig {
    pub n_particles: usize,
    pub gain_mode: GainMode,
}

impl IpsConfig {
    pub fn new(n_particles: usize, gain_mode: GainMode) -> Self {
        Self {
            n_particles,
            gain_mode,
        }
    }

    fn validate(&self) -> Result<()> {
        let needed = match self.gain_mode {
            GainMode::Empirical => 2,
            GainMode::MeanField => 1,
        };
        if self.n_particles < needed {
            return Err(Error::TooFewSamples {
                needed,
                got: self.n_particles,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IpsResult {
    pub control_estimate: StateVector,
    pub ensemble_before: Ensemble,
    pub noise: Ensemble,
    pub ensemble_after: Ensemble,
    pub gain: DMatrix<f64>,
    /// Set when the gain solve fell back to the clamped eigendecomposition.
    pub gain_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct IpsEstimate {
    pub control_estimate: StateVector,
    pub gain_fallback: bool,
}

/// Mean-field gain from the exact covariances `Cov(Y₀) = Cov(W₀) = I`.
pub fn mean_field_gain(d: usize) -> Result<DMatrix<f64>> {
    Ok(gain_from_covariances(&SpdMatrix::identity(d), &SpdMatrix::identity(d))?.matrix)
}

/// Exact law of `Y₁ = Y₀ − L(Y₀ + W₀)` for a fixed gain, with `Y₀ ~ N(x₀, I)` and
/// `W₀ ~ N(0, I)` independent: `N((I − L)x₀, (I − L)(I − L)ᵀ + L Lᵀ)`.
pub fn pushforward_law(instance: &SocpInstance, gain: &DMatrix<f64>) -> Result<GaussianSpec> {
    let d = instance.dim();
    let keep = DMatrix::identity(d, d) - gain;
    let mean = &keep * instance.x0();
    let cov = &keep * keep.transpose() + gain * gain.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianSpec::new(mean, SpdMatrix::new(cov)?)
}

fn sample_prior(instance: &SocpInstance, n: usize, rng: &mut RngStream) -> Ensemble {
    let mut y0 = Ensemble::zeros(instance.dim(), n);
    rng.fill_standard_normal(y0.as_mut_slice());
    for mut col in y0.column_iter_mut() {
        col += instance.x0();
    }
    y0
}

fn gain_for(mode: GainMode, y0: &Ensemble) -> Result<(DMatrix<f64>, bool)> {
    let d = y0.nrows();
    match mode {
        GainMode::Empirical => {
            let (_, sigma) = empirical_moments(y0)?;
            let g = gain_from_covariances(&sigma, &SpdMatrix::identity(d))?;
            let fallback = g.used_fallback();
            Ok((g.matrix, fallback))
        }
        GainMode::MeanField => Ok((mean_field_gain(d)?, false)),
    }
}

/// Runs the particle update and keeps both ensembles.
pub fn run_ips(
    instance: &SocpInstance,
    config: &IpsConfig,
    rng: &mut RngStream,
) -> Result<IpsResult> {
    config.validate()?;
    let n = config.n_particles;
    let y0 = sample_prior(instance, n, rng);
    let (gain, gain_fallback) = gain_for(config.gain_mode, &y0)?;
    let mut noise = Ensemble::zeros(instance.dim(), n);
    rng.fill_standard_normal(noise.as_mut_slice());

    let innovation = &y0 + &noise;
    let y1 = &y0 - &gain * innovation;
    let control_estimate = column_mean(&y1) - instance.x0();
    Ok(IpsResult {
        control_estimate,
        ensemble_before: y0,
        noise,
        ensemble_after: y1,
        gain,
        gain_fallback,
    })
}

/// Same estimate as [`run_ips`] (identical draws) via
/// `mean(Y₁) = mean(Y₀) − L(mean(Y₀) + mean(W₀))`, without materialising `Y₁`.
pub fn estimate_ips(
    instance: &SocpInstance,
    config: &IpsConfig,
    rng: &mut RngStream,
) -> Result<IpsEstimate> {
    config.validate()?;
    let n = config.n_particles;
    let d = instance.dim();
    let y0 = sample_prior(instance, n, rng);
    let (gain, gain_fallback) = gain_for(config.gain_mode, &y0)?;
    let y_mean = column_mean(&y0);
    drop(y0);

    let mut w_sum = StateVector::zeros(d);
    let mut buf = vec![0.0; d];
    for _ in 0..n {
        rng.fill_standard_normal(&mut buf);
        for (s, b) in w_sum.iter_mut().zip(&buf) {
            *s += b;
        }
    }
    let w_mean = w_sum / n as f64;
    let y1_mean = &y_mean - &gain * (&y_mean + w_mean);
    Ok(IpsEstimate {
        control_estimate: y1_mean - instance.x0(),
        gain_fallback,
    })
}

/// Pushes `n` samples through the mean-field update and returns their empirical
/// moments; the target law is `N(x₀/2, ½I)`.
pub fn mean_field_push(
    instance: &SocpInstance,
    n: usize,
    rng: &mut RngStream,
) -> Result<GaussianSpec> {
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let res = run_ips(instance, &IpsConfig::new(n, GainMode::MeanField), rng)?;
    let (mean, cov) = empirical_moments(&res.ensemble_after)?;
    GaussianSpec::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::exact_gibbs_measure;
    use crate::linalg::symmetric_eigen_range;

    #[test]
    fn mean_field_update_halves() {
        let inst = SocpInstance::from_slice(&[1.0, -2.0]).unwrap();
        let res = run_ips(
            &inst,
            &IpsConfig::new(50, GainMode::MeanField),
            &mut RngStream::new(3, 0),
        )
        .unwrap();
        let expected = (&res.ensemble_before - &res.noise) * 0.5;
        assert!((res.ensemble_after - expected).amax() < 1e-14);
    }

    #[test]
    fn update_invariant_holds() {
        let inst = SocpInstance::from_slice(&[0.5, 0.5, -1.0]).unwrap();
        let res = run_ips(
            &inst,
            &IpsConfig::new(40, GainMode::Empirical),
            &mut RngStream::new(1, 2),
        )
        .unwrap();
        for i in 0..40 {
            let y0 = res.ensemble_before.column(i);
            let w = res.noise.column(i);
            let expected = y0 - &res.gain * (y0 + w);
            assert!((res.ensemble_after.column(i) - expected).amax() < 1e-13);
        }
        let mean = column_mean(&res.ensemble_after) - inst.x0();
        assert!((mean - &res.control_estimate).amax() < 1e-14);
    }

    #[test]
    fn empirical_gain_spectrum_in_unit_interval() {
        for (k, &(d, n)) in [(1usize, 2usize), (3, 5), (10, 8), (20, 200)]
            .iter()
            .enumerate()
        {
            let inst = SocpInstance::zero(d);
            let res = run_ips(
                &inst,
                &IpsConfig::new(n, GainMode::Empirical),
                &mut RngStream::new(6, k as u64),
            )
            .unwrap();
            let (lo, hi) = symmetric_eigen_range(&res.gain);
            assert!(
                lo >= -1e-12 && hi <= 1.0 + 1e-12,
                "d={d} n={n}: [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn two_particle_scalar_gain() {
        let inst = SocpInstance::from_slice(&[0.3]).unwrap();
        let res = run_ips(
            &inst,
            &IpsConfig::new(2, GainMode::Empirical),
            &mut RngStream::new(8, 1),
        )
        .unwrap();
        let (a, b) = (res.ensemble_before[(0, 0)], res.ensemble_before[(0, 1)]);
        let var = (a - b).powi(2) / 2.0;
        assert!((res.gain[(0, 0)] - var / (var + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_ensemble_still_yields_gain() {
        // N ≤ d gives a singular sample covariance; Σ + I stays positive definite
        let inst = SocpInstance::zero(30);
        let res = run_ips(
            &inst,
            &IpsConfig::new(4, GainMode::Empirical),
            &mut RngStream::new(2, 9),
        )
        .unwrap();
        assert!(!res.gain_fallback);
        assert!(res.control_estimate.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empirical_mode_needs_two_particles() {
        let err = run_ips(
            &SocpInstance::zero(1),
            &IpsConfig::new(1, GainMode::Empirical),
            &mut RngStream::new(0, 0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::TooFewSamples { needed: 2, got: 1 }));
        assert!(run_ips(
            &SocpInstance::zero(1),
            &IpsConfig::new(1, GainMode::MeanField),
            &mut RngStream::new(0, 0)
        )
        .is_ok());
    }

    #[test]
    fn streaming_estimate_matches_full_run() {
        let inst = SocpInstance::from_slice(&[1.0, 2.0, -0.5, 0.0]).unwrap();
        for mode in [GainMode::Empirical, GainMode::MeanField] {
            let cfg = IpsConfig::new(300, mode);
            let full = run_ips(&inst, &cfg, &mut RngStream::new(17, 3)).unwrap();
            let lean = estimate_ips(&inst, &cfg, &mut RngStream::new(17, 3)).unwrap();
            assert!((full.control_estimate - lean.control_estimate).amax() < 1e-12);
        }
    }

    #[test]
    fn mean_field_push_matches_gibbs_law() {
        let inst = SocpInstance::from_slice(&[1.0]).unwrap();
        let law = mean_field_push(&inst, 100_000, &mut RngStream::new(10, 0)).unwrap();
        assert!((law.mean[0] - 0.5).abs() < 0.01);
        assert!((law.cov.as_matrix()[(0, 0)] - 0.5).abs() < 0.01);
    }

    #[test]
    fn mean_field_push_axes_independent() {
        let law =
            mean_field_push(&SocpInstance::zero(3), 100_000, &mut RngStream::new(10, 1)).unwrap();
        let c = law.cov.as_matrix();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(c[(i, j)].abs() < 0.01);
                }
            }
        }
    }

    #[test]
    fn exact_pushforward_of_half_gain() {
        let inst = SocpInstance::from_slice(&[2.0, -1.0, 0.25]).unwrap();
        let law = pushforward_law(&inst, &mean_field_gain(3).unwrap()).unwrap();
        assert!(law.max_abs_diff(&exact_gibbs_measure(&inst)) < 1e-12);
    }

    #[test]
    fn mean_field_estimator_is_unbiased() {
        let inst = SocpInstance::from_slice(&[1.0, -1.0]).unwrap();
        let cfg = IpsConfig::new(200, GainMode::MeanField);
        let runs = 1000;
        let est: Vec<StateVector> = (0..runs)
            .map(|s| {
                estimate_ips(&inst, &cfg, &mut RngStream::new(s, 44))
                    .unwrap()
                    .control_estimate
            })
            .collect();
        for axis in 0..2 {
            let v: Vec<f64> = est.iter().map(|e| e[axis]).collect();
            let m = v.iter().sum::<f64>() / runs as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (runs as f64 - 1.0)).sqrt();
            let target = -0.5 * inst.x0()[axis];
            assert!(
                (m - target).abs() < 3.0 * sd / (runs as f64).sqrt(),
                "axis {axis}: {m}"
            );
        }
    }
}
