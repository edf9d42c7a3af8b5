//! Model predictive path integral control for the single-stage problem.
//!
//! Particles are drawn under a nominal control `ū`, `X₁ⁱ = x₀ + ū + V₀ⁱ`, and
//! reweighted by `η̃ⁱ = exp(−½|X₁ⁱ + ū|²)`, which is proportional to
//! `dρ*/dρ^ū`. The control estimate is `(1/N) Σ ηⁱ X₁ⁱ − x₀`.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::gibbs::{SocpInstance, WeightNormalization, WeightedEnsemble};
use crate::linalg::{Ensemble, StateVector};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalization {
    /// Divide by the empirical mean of `η̃` (the shipped algorithm).
    SelfNormalized,
    /// Divide by the exact `E[η̃]`.
    OracleNormalized,
}

#[derive(Debug, Clone)]
pub struct MppiConfig {
    pub n_particles: usize,
    pub ubar: StateVector,
    pub normalization: Normalization,
}

impl MppiConfig {
    pub fn new(n_particles: usize, ubar: StateVector, normalization: Normalization) -> Self {
        Self {
            n_particles,
            ubar,
            normalization,
        }
    }

    /// Uncontrolled sampling, `ū = 0`.
    pub fn uncontrolled(d: usize, n_particles: usize, normalization: Normalization) -> Self {
        Self::new(n_particles, StateVector::zeros(d), normalization)
    }

    fn validate(&self, instance: &SocpInstance) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        instance.check_dim(&self.ubar)?;
        if self.ubar.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "nominal control must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MppiResult {
    pub control_estimate: StateVector,
    pub ensemble: WeightedEnsemble,
    pub ess: f64,
    pub max_weight_share: f64,
}

#[inline]
fn log_weight_slice(x: &[f64], ubar: &[f64]) -> f64 {
    -0.5 * x
        .iter()
        .zip(ubar)
        .map(|(a, b)| (a + b) * (a + b))
        .sum::<f64>()
}

/// `log η̃(x; ū) = −½|x + ū|²`.
pub fn mppi_log_weight(x: &StateVector, ubar: &StateVector) -> f64 {
    log_weight_slice(x.as_slice(), ubar.as_slice())
}

/// Unnormalized weight `η̃(x; ū) = exp(−½|x + ū|²)`.
pub fn mppi_weight(x: &StateVector, ubar: &StateVector) -> f64 {
    mppi_log_weight(x, ubar).exp()
}

/// `log E[η̃]` with `X ~ N(x₀ + ū, I)`: `−(d/2) ln 2 − |x₀ + 2ū|²/4`.
pub fn log_exact_weight_normalizer(instance: &SocpInstance, ubar: &StateVector) -> f64 {
    let d = instance.dim() as f64;
    let shift = instance.x0() + ubar * 2.0;
    -0.5 * d * LN_2 - 0.25 * shift.norm_squared()
}

/// `r₁ = E[η̃] = 2^{−d/2} exp(−|x₀ + 2ū|²/4)`.
pub fn exact_weight_normalizer(instance: &SocpInstance, ubar: &StateVector) -> f64 {
    log_exact_weight_normalizer(instance, ubar).exp()
}

/// The alternative closed form `exp(−(d ln 2 + |ū|² + |ū + x₀|²)/2 − |x₀|²/4)`.
///
/// Agrees with [`exact_weight_normalizer`] only at `x₀ = ū = 0`; kept for reporting.
pub fn alternative_weight_normalizer(instance: &SocpInstance, ubar: &StateVector) -> f64 {
    let d = instance.dim() as f64;
    let x0 = instance.x0();
    (-(d * LN_2 + ubar.norm_squared() + (ubar + x0).norm_squared()) / 2.0 - x0.norm_squared() / 4.0)
        .exp()
}

fn weight_normalization(instance: &SocpInstance, config: &MppiConfig) -> WeightNormalization {
    match config.normalization {
        Normalization::SelfNormalized => WeightNormalization::SelfNormalized,
        Normalization::OracleNormalized => WeightNormalization::Exact {
            log_normalizer: log_exact_weight_normalizer(instance, &config.ubar),
        },
    }
}

/// Runs the MPPI estimator and keeps the full weighted ensemble.
pub fn run_mppi(
    instance: &SocpInstance,
    config: &MppiConfig,
    rng: &mut RngStream,
) -> Result<MppiResult> {
    config.validate(instance)?;
    let d = instance.dim();
    let n = config.n_particles;
    let offset = instance.x0() + &config.ubar;

    let mut particles = Ensemble::zeros(d, n);
    rng.fill_standard_normal(particles.as_mut_slice());
    for mut col in particles.column_iter_mut() {
        col += &offset;
    }
    let log_w: Vec<f64> = particles
        .as_slice()
        .chunks_exact(d)
        .map(|x| log_weight_slice(x, config.ubar.as_slice()))
        .collect();

    let ensemble = WeightedEnsemble::from_log_weights(
        particles,
        &log_w,
        weight_normalization(instance, config),
    )?;
    let control_estimate = ensemble.weighted_mean() - instance.x0();
    Ok(MppiResult {
        control_estimate,
        ess: ensemble.ess(),
        max_weight_share: ensemble.max_weight_share(),
        ensemble,
    })
}

/// Same estimate as [`run_mppi`] (identical draws), without storing particles.
pub fn estimate_mppi(
    instance: &SocpInstance,
    config: &MppiConfig,
    rng: &mut RngStream,
) -> Result<StateVector> {
    config.validate(instance)?;
    let d = instance.dim();
    let n = config.n_particles;
    let x0 = instance.x0().as_slice();
    let ubar = config.ubar.as_slice();
    let mut x = vec![0.0; d];
    let mut acc = vec![0.0; d];

    match config.normalization {
        Normalization::OracleNormalized => {
            let log_r1 = log_exact_weight_normalizer(instance, &config.ubar);
            let mut max_lw = f64::NEG_INFINITY;
            let mut any_positive = false;
            for _ in 0..n {
                draw_particle(rng, x0, ubar, &mut x);
                let lw = log_weight_slice(&x, ubar);
                max_lw = max_lw.max(lw);
                let w = (lw - log_r1).exp();
                any_positive |= w > 0.0;
                for (a, xi) in acc.iter_mut().zip(&x) {
                    *a += w * xi;
                }
            }
            if !any_positive {
                return Err(Error::DegenerateWeights {
                    max_log_weight: max_lw - log_r1,
                    min_cost: -max_lw,
                });
            }
            let inv_n = 1.0 / n as f64;
            Ok(StateVector::from_iterator(
                d,
                acc.iter().zip(x0).map(|(a, x0i)| a * inv_n - x0i),
            ))
        }
        Normalization::SelfNormalized => {
            // running log-sum-exp: acc and total are scaled by exp(-max_lw)
            let mut max_lw = f64::NEG_INFINITY;
            let mut total = 0.0;
            for _ in 0..n {
                draw_particle(rng, x0, ubar, &mut x);
                let lw = log_weight_slice(&x, ubar);
                if lw > max_lw {
                    let rescale = (max_lw - lw).exp();
                    total *= rescale;
                    acc.iter_mut().for_each(|a| *a *= rescale);
                    max_lw = lw;
                }
                let w = (lw - max_lw).exp();
                total += w;
                for (a, xi) in acc.iter_mut().zip(&x) {
                    *a += w * xi;
                }
            }
            if !max_lw.is_finite() {
                return Err(Error::DegenerateWeights {
                    max_log_weight: max_lw,
                    min_cost: -max_lw,
                });
            }
            Ok(StateVector::from_iterator(
                d,
                acc.iter().zip(x0).map(|(a, x0i)| a / total - x0i),
            ))
        }
    }
}

#[inline]
fn draw_particle(rng: &mut RngStream, x0: &[f64], ubar: &[f64], out: &mut [f64]) {
    rng.fill_standard_normal(out);
    for ((o, a), b) in out.iter_mut().zip(x0).zip(ubar) {
        *o += a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::column_mean;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::from_column_slice(v)
    }

    #[test]
    fn weight_examples() {
        assert_eq!(mppi_weight(&sv(&[0.0]), &sv(&[0.0])), 1.0);
        assert!((mppi_weight(&sv(&[1.0]), &sv(&[1.0])) - 0.135335283).abs() < 1e-9);
        let u = sv(&[0.3, -0.2]);
        let (a, b) = (sv(&[1.0, 2.0]), sv(&[-0.5, 0.1]));
        let ratio = mppi_weight(&a, &u) / mppi_weight(&b, &u);
        let expected = (-0.5 * ((&a + &u).norm_squared() - (&b + &u).norm_squared())).exp();
        assert!((ratio / expected - 1.0).abs() < 1e-12);
    }

    /// Composite Simpson on [-12, 12], independent of the closed form.
    fn simpson(f: impl Fn(f64) -> f64) -> f64 {
        let (a, b, m) = (-12.0_f64, 12.0_f64, 20_000usize);
        let h = (b - a) / m as f64;
        let mut s = f(a) + f(b);
        for k in 1..m {
            let x = a + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    fn phi(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn normalizer_matches_quadrature() {
        let quad = simpson(|x| phi(x) * (-0.5 * x * x).exp());
        let cf = exact_weight_normalizer(&SocpInstance::zero(1), &sv(&[0.0]));
        assert!((cf - quad).abs() < 1e-12);
        assert!((cf - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        // off-centre: X ~ N(x0 + u, 1), weight exp(-½(x+u)²)
        for &(x0, u) in &[(1.0, 0.0), (0.5, -0.7), (-2.0, 0.3)] {
            let quad = simpson(|v| phi(v) * (-0.5 * (x0 + u + v + u).powi(2)).exp());
            let inst = SocpInstance::from_slice(&[x0]).unwrap();
            assert!((exact_weight_normalizer(&inst, &sv(&[u])) - quad).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_in_ten_dimensions() {
        let r = exact_weight_normalizer(&SocpInstance::zero(10), &StateVector::zeros(10));
        assert!((r - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn alternative_normalizer_differs_off_origin() {
        let origin = SocpInstance::zero(3);
        let z = StateVector::zeros(3);
        assert!(
            (alternative_weight_normalizer(&origin, &z) - exact_weight_normalizer(&origin, &z))
                .abs()
                < 1e-15
        );
        let inst = SocpInstance::from_slice(&[1.0, 0.0, 0.0]).unwrap();
        let gap = alternative_weight_normalizer(&inst, &z) - exact_weight_normalizer(&inst, &z);
        assert!(gap.abs() > 1e-2);
    }

    #[test]
    fn normalizer_monte_carlo() {
        let inst = SocpInstance::from_slice(&[0.4, -0.2]).unwrap();
        let ubar = sv(&[0.1, 0.3]);
        let mut rng = RngStream::new(77, 0);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        let mut x = vec![0.0; 2];
        for _ in 0..n {
            draw_particle(&mut rng, inst.x0().as_slice(), ubar.as_slice(), &mut x);
            let w = log_weight_slice(&x, ubar.as_slice()).exp();
            s += w;
            s2 += w * w;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact_weight_normalizer(&inst, &ubar)).abs() < 3.0 * se);
    }

    #[test]
    fn self_normalized_weights_average_one() {
        let inst = SocpInstance::from_slice(&[0.5, 1.0, -1.0]).unwrap();
        let cfg = MppiConfig::uncontrolled(3, 2_000, Normalization::SelfNormalized);
        let res = run_mppi(&inst, &cfg, &mut RngStream::new(1, 1)).unwrap();
        assert!((res.ensemble.weights.sum() / 2000.0 - 1.0).abs() < 1e-12);
        assert!(res.ensemble.normalized);
        assert!(res.ess > 0.0 && res.ess <= 2000.0 + 1e-9);
        assert!(res.max_weight_share > 0.0 && res.max_weight_share <= 1.0);
    }

    #[test]
    fn estimate_is_weighted_particle_mean_minus_x0() {
        let inst = SocpInstance::from_slice(&[2.0, -1.0]).unwrap();
        let cfg = MppiConfig::new(500, sv(&[0.2, 0.1]), Normalization::OracleNormalized);
        let res = run_mppi(&inst, &cfg, &mut RngStream::new(4, 4)).unwrap();
        let direct = res.ensemble.weighted_mean() - inst.x0();
        assert_eq!(direct, res.control_estimate);
    }

    #[test]
    fn single_particle_self_normalized() {
        let inst = SocpInstance::from_slice(&[1.0, 3.0]).unwrap();
        let cfg = MppiConfig::uncontrolled(2, 1, Normalization::SelfNormalized);
        let res = run_mppi(&inst, &cfg, &mut RngStream::new(9, 0)).unwrap();
        let x1 = res.ensemble.particles.column(0).into_owned();
        assert_eq!(res.ensemble.weights[0], 1.0);
        assert!((res.control_estimate - (x1 - inst.x0())).amax() < 1e-15);
    }

    #[test]
    fn particles_are_drawn_around_nominal_control() {
        let inst = SocpInstance::from_slice(&[1.0, -1.0]).unwrap();
        let cfg = MppiConfig::new(200_000, sv(&[0.5, 0.5]), Normalization::SelfNormalized);
        let res = run_mppi(&inst, &cfg, &mut RngStream::new(2, 0)).unwrap();
        let m = column_mean(&res.ensemble.particles);
        assert!((m - sv(&[1.5, -0.5])).amax() < 0.02);
    }

    #[test]
    fn streaming_estimate_matches_full_run() {
        let inst = SocpInstance::from_slice(&[0.3, -0.8, 1.5]).unwrap();
        for norm in [
            Normalization::SelfNormalized,
            Normalization::OracleNormalized,
        ] {
            let cfg = MppiConfig::new(3_000, sv(&[0.1, 0.0, -0.4]), norm);
            let full = run_mppi(&inst, &cfg, &mut RngStream::new(5, 12)).unwrap();
            let lean = estimate_mppi(&inst, &cfg, &mut RngStream::new(5, 12)).unwrap();
            assert!((full.control_estimate - lean).amax() < 1e-12, "{norm:?}");
        }
    }

    #[test]
    fn small_mse_at_origin() {
        // estimate within 4·sqrt(mse) of 0 with mse = (1/3N)·sqrt(4/3)
        let n = 10_000;
        let cfg = MppiConfig::uncontrolled(1, n, Normalization::SelfNormalized);
        let est = run_mppi(&SocpInstance::zero(1), &cfg, &mut RngStream::new(31, 0)).unwrap();
        let mse = (4.0f64 / 3.0).sqrt() / (3.0 * n as f64);
        assert!(est.control_estimate[0].abs() < 4.0 * mse.sqrt());
    }

    #[test]
    fn oracle_estimator_is_unbiased() {
        let inst = SocpInstance::from_slice(&[1.0]).unwrap();
        let cfg = MppiConfig::uncontrolled(1, 1_000, Normalization::OracleNormalized);
        let est: Vec<f64> = (0..1000)
            .map(|s| estimate_mppi(&inst, &cfg, &mut RngStream::new(s, 0)).unwrap()[0])
            .collect();
        let m = est.iter().sum::<f64>() / 1000.0;
        let sd = (est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((m + 0.5).abs() < 3.0 * sd / 1000f64.sqrt(), "mean {m}");
    }

    #[test]
    fn weighted_mean_approaches_gibbs_mean() {
        let inst = SocpInstance::from_slice(&[1.0]).unwrap();
        let mut medians = Vec::new();
        for (k, &n) in [1_000usize, 10_000, 100_000].iter().enumerate() {
            let cfg = MppiConfig::uncontrolled(1, n, Normalization::SelfNormalized);
            let mut errs: Vec<f64> = (0..20)
                .map(|r| {
                    let e =
                        estimate_mppi(&inst, &cfg, &mut RngStream::new(90 + k as u64, r)).unwrap();
                    (e[0] + inst.x0()[0] - 0.5).abs()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push(0.5 * (errs[9] + errs[10]));
        }
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "{medians:?}"
        );
    }

    #[test]
    fn nominal_control_does_not_change_the_limit() {
        let inst = SocpInstance::zero(1);
        let n = 100_000;
        let reps = 30;
        let summary = |u: f64, stream: u64| {
            let cfg = MppiConfig::new(n, sv(&[u]), Normalization::SelfNormalized);
            let e: Vec<f64> = (0..reps)
                .map(|r| estimate_mppi(&inst, &cfg, &mut RngStream::new(stream, r)).unwrap()[0])
                .collect();
            let m = e.iter().sum::<f64>() / reps as f64;
            let var = e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
            (m, var / reps as f64)
        };
        let (m0, v0) = summary(0.0, 500);
        let (m1, v1) = summary(0.5, 501);
        assert!((m0 - m1).abs() < 4.0 * (v0 + v1).sqrt(), "{m0} vs {m1}");
    }

    #[test]
    fn oracle_and_self_normalized_converge() {
        let inst = SocpInstance::from_slice(&[0.5, -0.5]).unwrap();
        let mut gaps = Vec::new();
        for &n in &[1_000usize, 30_000] {
            let gap: f64 = (0..20)
                .map(|s| {
                    let o = MppiConfig::uncontrolled(2, n, Normalization::OracleNormalized);
                    let sn = MppiConfig::uncontrolled(2, n, Normalization::SelfNormalized);
                    let a = estimate_mppi(&inst, &o, &mut RngStream::new(s, 7)).unwrap();
                    let b = estimate_mppi(&inst, &sn, &mut RngStream::new(s, 7)).unwrap();
                    (a - b).norm()
                })
                .sum::<f64>()
                / 20.0;
            gaps.push(gap);
        }
        assert!(gaps[1] < gaps[0], "{gaps:?}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let inst = SocpInstance::zero(2);
        let cfg = MppiConfig::uncontrolled(2, 0, Normalization::SelfNormalized);
        assert!(run_mppi(&inst, &cfg, &mut RngStream::new(0, 0)).is_err());
        let cfg = MppiConfig::uncontrolled(3, 10, Normalization::SelfNormalized);
        assert!(matches!(
            run_mppi(&inst, &cfg, &mut RngStream::new(0, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn oracle_underflow_is_reported() {
        // log η̃ ≈ -5000 against log r₁ ≈ -2500: every ratio underflows to zero
        let inst = SocpInstance::from_slice(&[100.0]).unwrap();
        let cfg = MppiConfig::uncontrolled(1, 10, Normalization::OracleNormalized);
        let err = estimate_mppi(&inst, &cfg, &mut RngStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeights { .. }));
        let err = run_mppi(&inst, &cfg, &mut RngStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeights { .. }));
    }
}
