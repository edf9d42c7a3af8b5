//! Mean-square error of the control estimators: closed forms, Monte Carlo
//! estimates on reproducible streams, and scaling-law regression in `d`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{exact_optimal_control, SocpInstance};
use crate::ips::{estimate_ips, GainMode, IpsConfig};
use crate::linalg::StateVector;
use crate::mppi::{estimate_mppi, MppiConfig, Normalization};
use crate::rng::{mix_stream_id, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "mppi-self")]
    MppiSelf,
    #[serde(rename = "mppi-oracle")]
    MppiOracle,
    #[serde(rename = "ips")]
    Ips,
    #[serde(rename = "ips-meanfield")]
    IpsMeanField,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::MppiSelf,
        Algorithm::MppiOracle,
        Algorithm::Ips,
        Algorithm::IpsMeanField,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::MppiSelf => "mppi-self",
            Algorithm::MppiOracle => "mppi-oracle",
            Algorithm::Ips => "ips",
            Algorithm::IpsMeanField => "ips-meanfield",
        }
    }

    pub fn is_mppi(self) -> bool {
        matches!(self, Algorithm::MppiSelf | Algorithm::MppiOracle)
    }

    // Stream-id tags; changing them changes every recorded result.
    fn tag(self) -> u64 {
        match self {
            Algorithm::MppiSelf => 1,
            Algorithm::MppiOracle => 2,
            Algorithm::Ips => 3,
            Algorithm::IpsMeanField => 4,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algorithm `{s}`")))
    }
}

/// One controller configuration evaluated by the Monte Carlo oracle.
#[derive(Debug, Clone)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub n_particles: usize,
    /// Nominal control; only MPPI uses it.
    pub ubar: StateVector,
}

impl AlgoConfig {
    pub fn new(algorithm: Algorithm, n_particles: usize, ubar: StateVector) -> Self {
        Self {
            algorithm,
            n_particles,
            ubar,
        }
    }

    pub fn uncontrolled(algorithm: Algorithm, d: usize, n_particles: usize) -> Self {
        Self::new(algorithm, n_particles, StateVector::zeros(d))
    }

    /// One control estimate.
    pub fn estimate(&self, instance: &SocpInstance, rng: &mut RngStream) -> Result<StateVector> {
        let n = self.n_particles;
        match self.algorithm {
            Algorithm::MppiSelf | Algorithm::MppiOracle => {
                let normalization = if self.algorithm == Algorithm::MppiSelf {
                    Normalization::SelfNormalized
                } else {
                    Normalization::OracleNormalized
                };
                estimate_mppi(
                    instance,
                    &MppiConfig::new(n, self.ubar.clone(), normalization),
                    rng,
                )
            }
            Algorithm::Ips | Algorithm::IpsMeanField => {
                let mode = if self.algorithm == Algorithm::Ips {
                    GainMode::Empirical
                } else {
                    GainMode::MeanField
                };
                Ok(estimate_ips(instance, &IpsConfig::new(n, mode), rng)?.control_estimate)
            }
        }
    }
}

/// Stream id of one Monte Carlo run within a grid cell.
pub fn cell_stream_id(algorithm: Algorithm, d: usize, n_particles: usize, run: usize) -> u64 {
    mix_stream_id(&[algorithm.tag(), d as u64, n_particles as u64, run as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub algorithm: Algorithm,
    pub d: usize,
    pub n_particles: usize,
    pub runs: usize,
    pub failures: usize,
    pub mse_mc: f64,
    pub mse_stderr: f64,
    pub mse_closed_form: Option<f64>,
    pub bound: Option<f64>,
}

impl MseReport {
    /// Fewer than two successful runs.
    pub fn is_failed(&self) -> bool {
        self.runs - self.failures < 2
    }

    /// `|mse_mc − target| / mse_stderr`.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mse_mc - target).abs() / self.mse_stderr
    }
}

fn ln_mppi_leading_term(
    instance: &SocpInstance,
    ubar: &StateVector,
    n: usize,
    exponent: f64,
) -> f64 {
    let d = instance.dim() as f64;
    let spread = (ubar - instance.x0()).norm_squared() / 9.0 + d / 3.0;
    -(n as f64).ln() + 0.5 * d * (4.0f64 / 3.0).ln() + spread.ln() + exponent
}

/// MPPI m.s.e. in the closed form
/// `(1/N)(√(4/3))^d (|(ū − x₀)/3|² + d/3) exp((4|ū|² + 7|x₀|² + |x₀ + ū|²)/6) − |x₀|²/(4N)`.
///
/// At `x₀ = ū = 0` this is `(d/3N)(4/3)^{d/2}`, the exact m.s.e. of the oracle-normalized
/// estimator. Elsewhere it differs from [`mse_mppi_oracle_derived`]. Evaluated in log space;
/// overflow yields `+∞`.
pub fn mse_mppi_closed_form(instance: &SocpInstance, ubar: &StateVector, n: usize) -> f64 {
    let x0 = instance.x0();
    let exponent =
        (4.0 * ubar.norm_squared() + 7.0 * x0.norm_squared() + (x0 + ubar).norm_squared()) / 6.0;
    let lead = ln_mppi_leading_term(instance, ubar, n, exponent).exp();
    lead - x0.norm_squared() / (4.0 * n as f64)
}

/// Exact m.s.e. of the oracle-normalized MPPI estimator for general `x₀, ū`:
/// `(1/N)[(4/3)^{d/2} e^{|x₀+2ū|²/2 + |x₀−ū|²/6 − |ū|² − |x₀+ū|²/2} (|x₀−ū|²/9 + d/3) − |x₀|²/4]`.
pub fn mse_mppi_oracle_derived(instance: &SocpInstance, ubar: &StateVector, n: usize) -> f64 {
    let x0 = instance.x0();
    let exponent = 0.5 * (x0 + ubar * 2.0).norm_squared() + (x0 - ubar).norm_squared() / 6.0
        - ubar.norm_squared()
        - 0.5 * (x0 + ubar).norm_squared();
    let lead = ln_mppi_leading_term(instance, ubar, n, exponent).exp();
    lead - x0.norm_squared() / (4.0 * n as f64)
}

/// `2d/N + (5/4)|x₀|²`.
pub fn mse_ips_bound(instance: &SocpInstance, n: usize) -> f64 {
    2.0 * instance.dim() as f64 / n as f64 + 1.25 * instance.x0().norm_squared()
}

/// Exact m.s.e. with the mean-field gain `½I`: `d/(2N)` for every `x₀`.
pub fn mse_ips_mean_field(instance: &SocpInstance, n: usize) -> f64 {
    instance.dim() as f64 / (2.0 * n as f64)
}

/// Closed-form value reported next to the Monte Carlo estimate, if one exists.
pub fn closed_form_for(config: &AlgoConfig, instance: &SocpInstance) -> Option<f64> {
    match config.algorithm {
        Algorithm::MppiSelf | Algorithm::MppiOracle => Some(mse_mppi_closed_form(
            instance,
            &config.ubar,
            config.n_particles,
        )),
        Algorithm::IpsMeanField => Some(mse_ips_mean_field(instance, config.n_particles)),
        Algorithm::Ips => None,
    }
}

pub fn bound_for(config: &AlgoConfig, instance: &SocpInstance) -> Option<f64> {
    match config.algorithm {
        Algorithm::Ips | Algorithm::IpsMeanField => {
            Some(mse_ips_bound(instance, config.n_particles))
        }
        _ => None,
    }
}

/// Monte Carlo m.s.e. `E|û − u*|²` over `runs` independent runs.
///
/// Run `r` uses the stream `(master_seed, cell_stream_id(alg, d, N, r))`, so the
/// report depends only on the seed and the cell. Runs execute on the current rayon
/// pool; squared errors are reduced in run order.
pub fn mse_monte_carlo(
    config: &AlgoConfig,
    instance: &SocpInstance,
    runs: usize,
    master_seed: u64,
) -> Result<MseReport> {
    if runs < 2 {
        return Err(Error::InvalidConfig(format!(
            "runs must be at least 2, got {runs}"
        )));
    }
    instance.check_dim(&config.ubar)?;
    let d = instance.dim();
    let target = exact_optimal_control(instance);
    let outcomes: Vec<Option<f64>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let stream = cell_stream_id(config.algorithm, d, config.n_particles, r);
            let mut rng = RngStream::new(master_seed, stream);
            match config.estimate(instance, &mut rng) {
                Ok(u) => Ok(Some((u - &target).norm_squared())),
                Err(Error::DegenerateWeights { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let squared: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failures = runs - squared.len();
    let (mse_mc, mse_stderr) = mean_and_stderr(&squared);
    Ok(MseReport {
        algorithm: config.algorithm,
        d,
        n_particles: config.n_particles,
        runs,
        failures,
        mse_mc,
        mse_stderr,
        mse_closed_form: closed_form_for(config, instance),
        bound: bound_for(config, instance),
    })
}

/// Sample mean and `sd/√k`; NaN for fewer than two values.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0);
    (mean, (var / k as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingModel {
    /// `ln(mse · N / d) = a + b·d`.
    LogLinear,
    /// `mse = a + b·d`.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub model: ScalingModel,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares fit of m.s.e. against `d` for reports sharing algorithm and `N`.
pub fn fit_scaling(reports: &[MseReport], model: ScalingModel) -> Result<ScalingFit> {
    if reports.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "a scaling fit needs at least 3 grid points, got {}",
            reports.len()
        )));
    }
    let first = &reports[0];
    if reports
        .iter()
        .any(|r| r.algorithm != first.algorithm || r.n_particles != first.n_particles)
    {
        return Err(Error::InvalidConfig(
            "scaling fit mixes algorithms or particle counts".into(),
        ));
    }
    let mut xs = Vec::with_capacity(reports.len());
    let mut ys = Vec::with_capacity(reports.len());
    for r in reports {
        if !r.mse_mc.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "cell d = {} has no m.s.e.",
                r.d
            )));
        }
        let y = match model {
            ScalingModel::LogLinear => {
                if r.mse_mc <= 0.0 {
                    return Err(Error::NonPositiveMse {
                        d: r.d,
                        mse: r.mse_mc,
                    });
                }
                (r.mse_mc * r.n_particles as f64 / r.d as f64).ln()
            }
            ScalingModel::Affine => r.mse_mc,
        };
        xs.push(r.d as f64);
        ys.push(y);
    }
    let (slope, intercept, r_squared) = least_squares(&xs, &ys)?;
    Ok(ScalingFit {
        model,
        slope,
        intercept,
        r_squared,
        points: xs.len(),
    })
}

fn least_squares(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidConfig(
            "scaling fit needs at least two distinct d".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok((slope, intercept, r_squared))
}
