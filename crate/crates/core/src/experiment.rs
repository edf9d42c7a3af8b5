//! Sweep configuration, execution over the (algorithm, N, d) grid, and output.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_analysis::{
    fit_scaling, mse_monte_carlo, AlgoConfig, Algorithm, MseReport, ScalingFit, ScalingModel,
};
use crate::gibbs::{
    dual_filter_posterior, exact_gibbs_measure, exact_optimal_control, SocpInstance,
};
use crate::ips::{run_ips, GainMode, IpsConfig};
use crate::linalg::{empirical_moments, GaussianSpec, StateVector};
use crate::mppi::{run_mppi, MppiConfig, Normalization};
use crate::rng::{mix_stream_id, RngStream};

pub const DEFAULT_SEED: u64 = 20_240_917;
pub const DEFAULT_PARTICLES: [usize; 5] = [4_000, 6_000, 10_000, 15_000, 20_000];
pub const DEFAULT_RUNS: usize = 1000;
pub const DEFAULT_MAX_DIM: usize = 30;

const D_GRID_NOTE: &str =
    "d grid defaults to 1..30 so that MPPI m.s.e. spans two decades before the weights collapse";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum X0Mode {
    Zero,
    Ones,
    Custom(Vec<f64>),
}

impl X0Mode {
    pub fn instance(&self, d: usize) -> Result<SocpInstance> {
        match self {
            X0Mode::Zero => Ok(SocpInstance::zero(d)),
            X0Mode::Ones => SocpInstance::new(StateVector::from_element(d, 1.0)),
            X0Mode::Custom(v) => {
                if v.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: v.len(),
                    });
                }
                SocpInstance::from_slice(v)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dims: Vec<usize>,
    pub particles: Vec<usize>,
    pub runs: usize,
    pub x0: X0Mode,
    /// Nominal MPPI control; `None` means zero.
    pub ubar: Option<Vec<f64>>,
    pub algorithms: Vec<Algorithm>,
    pub seed: u64,
    /// `None` writes to stdout.
    pub output_path: Option<PathBuf>,
    pub format: OutputFormat,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dims: (1..=DEFAULT_MAX_DIM).collect(),
            particles: DEFAULT_PARTICLES.to_vec(),
            runs: DEFAULT_RUNS,
            x0: X0Mode::Zero,
            ubar: None,
            algorithms: Algorithm::ALL.to_vec(),
            seed: DEFAULT_SEED,
            output_path: None,
            format: OutputFormat::Csv,
            workers: default_workers(),
        }
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dims.is_empty() {
            return bad("dims must not be empty".into());
        }
        if self.dims[0] == 0 {
            return bad("dimensions must be at least 1".into());
        }
        if self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return bad("dims must be strictly ascending".into());
        }
        if self.particles.is_empty() {
            return bad("particles must not be empty".into());
        }
        let min_n = if self.algorithms.contains(&Algorithm::Ips) {
            2
        } else {
            1
        };
        if let Some(&n) = self.particles.iter().find(|&&n| n < min_n) {
            return bad(format!("particle count {n} is below the minimum {min_n}"));
        }
        if self.runs < 2 {
            return bad(format!("runs must be at least 2, got {}", self.runs));
        }
        if self.algorithms.is_empty() {
            return bad("at least one algorithm is required".into());
        }
        let mut algs = self.algorithms.clone();
        algs.sort();
        algs.dedup();
        if algs.len() != self.algorithms.len() {
            return bad("algorithms must not repeat".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        for &d in &self.dims {
            self.x0
                .instance(d)
                .map_err(|e| Error::InvalidConfig(format!("x0 does not fit d = {d}: {e}")))?;
            self.ubar_for(d)
                .map_err(|e| Error::InvalidConfig(format!("ubar does not fit d = {d}: {e}")))?;
        }
        Ok(())
    }

    pub fn ubar_for(&self, d: usize) -> Result<StateVector> {
        match &self.ubar {
            None => Ok(StateVector::zeros(d)),
            Some(v) if v.len() != d => Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            }),
            Some(v) if v.iter().any(|x| !x.is_finite()) => {
                Err(Error::InvalidConfig("ubar must be finite".into()))
            }
            Some(v) => Ok(StateVector::from_column_slice(v)),
        }
    }

    /// Grid cells in output order: algorithm, then N, then d.
    pub fn cells(&self) -> Vec<(Algorithm, usize, usize)> {
        let mut out = Vec::new();
        for &alg in &self.algorithms {
            for &n in &self.particles {
                for &d in &self.dims {
                    out.push((alg, n, d));
                }
            }
        }
        out
    }
}

/// One output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub algorithm: Algorithm,
    pub d: usize,
    pub n_particles: usize,
    pub runs: usize,
    pub failures: usize,
    pub mse_mc: f64,
    pub mse_stderr: f64,
    pub mse_closed_form: Option<f64>,
    pub mse_bound: Option<f64>,
    pub seed: u64,
}

impl SweepRecord {
    pub fn from_report(report: MseReport, seed: u64) -> Self {
        Self {
            algorithm: report.algorithm,
            d: report.d,
            n_particles: report.n_particles,
            runs: report.runs,
            failures: report.failures,
            mse_mc: report.mse_mc,
            mse_stderr: report.mse_stderr,
            mse_closed_form: report.mse_closed_form,
            mse_bound: report.bound,
            seed,
        }
    }

    pub fn to_report(&self) -> MseReport {
        MseReport {
            algorithm: self.algorithm,
            d: self.d,
            n_particles: self.n_particles,
            runs: self.runs,
            failures: self.failures,
            mse_mc: self.mse_mc,
            mse_stderr: self.mse_stderr,
            mse_closed_form: self.mse_closed_form,
            bound: self.mse_bound,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.to_report().is_failed()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub algorithm: Algorithm,
    pub n_particles: usize,
    pub fit: ScalingFit,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub fits: Vec<FitRecord>,
}

impl SweepOutcome {
    pub fn all_failed(&self) -> bool {
        self.records.iter().all(SweepRecord::is_failed)
    }

    pub fn record(&self, alg: Algorithm, d: usize, n: usize) -> Option<&SweepRecord> {
        self.records
            .iter()
            .find(|r| r.algorithm == alg && r.d == d && r.n_particles == n)
    }

    pub fn fit(&self, alg: Algorithm, n: usize) -> Option<&ScalingFit> {
        self.fits
            .iter()
            .find(|f| f.algorithm == alg && f.n_particles == n)
            .map(|f| &f.fit)
    }
}

pub fn model_for(alg: Algorithm) -> ScalingModel {
    if alg.is_mppi() {
        ScalingModel::LogLinear
    } else {
        ScalingModel::Affine
    }
}

/// Evaluates a single grid cell. Its record depends only on the config seed,
/// the cell coordinates, `x₀`, `ū` and `runs`.
pub fn run_cell(config: &SweepConfig, alg: Algorithm, n: usize, d: usize) -> Result<SweepRecord> {
    let instance = config.x0.instance(d)?;
    let algo = AlgoConfig::new(alg, n, config.ubar_for(d)?);
    let report = mse_monte_carlo(&algo, &instance, config.runs, config.seed)?;
    Ok(SweepRecord::from_report(report, config.seed))
}

/// Runs the whole grid on a pool of `config.workers` threads. `progress` sees
/// each record as its cell completes, in grid order.
pub fn run_sweep(
    config: &SweepConfig,
    progress: Option<&(dyn Fn(&SweepRecord) + Sync)>,
) -> Result<SweepOutcome> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let records = pool.install(|| -> Result<Vec<SweepRecord>> {
        let mut out = Vec::new();
        for (alg, n, d) in config.cells() {
            let rec = run_cell(config, alg, n, d)?;
            if let Some(cb) = progress {
                cb(&rec);
            }
            out.push(rec);
        }
        Ok(out)
    })?;
    let fits = scaling_fits(&records);
    Ok(SweepOutcome { records, fits })
}

/// One fit per (algorithm, N) with at least three usable cells.
pub fn scaling_fits(records: &[SweepRecord]) -> Vec<FitRecord> {
    let mut keys: Vec<(Algorithm, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.algorithm, r.n_particles)) {
            keys.push((r.algorithm, r.n_particles));
        }
    }
    keys.into_iter()
        .filter_map(|(alg, n)| {
            let reports: Vec<MseReport> = records
                .iter()
                .filter(|r| r.algorithm == alg && r.n_particles == n && !r.is_failed())
                .map(SweepRecord::to_report)
                .collect();
            fit_scaling(&reports, model_for(alg))
                .ok()
                .map(|fit| FitRecord {
                    algorithm: alg,
                    n_particles: n,
                    fit,
                })
        })
        .collect()
}

pub fn write_csv<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Serialize)]
struct JsonMetadata<'a> {
    version: &'static str,
    config: &'a SweepConfig,
    d_grid_note: &'static str,
}

#[derive(Serialize)]
struct JsonOutput<'a> {
    metadata: JsonMetadata<'a>,
    records: &'a [SweepRecord],
    fits: &'a [FitRecord],
}

pub fn write_json<W: Write>(config: &SweepConfig, outcome: &SweepOutcome, out: W) -> Result<()> {
    // worker count and output path do not affect results; leave them out so
    // reruns produce identical files
    let mut echo = config.clone();
    echo.workers = 0;
    echo.output_path = None;
    let doc = JsonOutput {
        metadata: JsonMetadata {
            version: env!("CARGO_PKG_VERSION"),
            config: &echo,
            d_grid_note: D_GRID_NOTE,
        },
        records: &outcome.records,
        fits: &outcome.fits,
    };
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, &doc)?;
    writeln!(out)?;
    Ok(())
}

/// Writes results to `config.output_path`, or to stdout when unset.
pub fn write_outcome(config: &SweepConfig, outcome: &SweepOutcome) -> Result<()> {
    let sink: Box<dyn Write> = match &config.output_path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    match config.format {
        OutputFormat::Csv => write_csv(&outcome.records, sink),
        OutputFormat::Json => write_json(config, outcome, sink),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4e}"))
}

/// Human-readable table of all cells followed by the scaling fits.
pub fn format_summary(outcome: &SweepOutcome) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<14} {:>4} {:>7} {:>8} {:>11} {:>11} {:>11} {:>11}\n",
        "algorithm", "d", "N", "failures", "mse_mc", "stderr", "closed", "bound"
    ));
    for r in &outcome.records {
        s.push_str(&format!(
            "{:<14} {:>4} {:>7} {:>8} {:>11.4e} {:>11.4e} {:>11} {:>11}\n",
            r.algorithm.label(),
            r.d,
            r.n_particles,
            r.failures,
            r.mse_mc,
            r.mse_stderr,
            fmt_opt(r.mse_closed_form),
            fmt_opt(r.mse_bound),
        ));
    }
    if !outcome.fits.is_empty() {
        s.push_str("\nscaling fits in d\n");
        for f in &outcome.fits {
            let form = match f.fit.model {
                ScalingModel::LogLinear => "ln(mse*N/d) = a + b*d",
                ScalingModel::Affine => "mse = a + b*d",
            };
            s.push_str(&format!(
                "{:<14} N={:<7} {:<22} b={:.6} a={:.6} R^2={:.5} ({} pts)\n",
                f.algorithm.label(),
                f.n_particles,
                form,
                f.fit.slope,
                f.fit.intercept,
                f.fit.r_squared,
                f.fit.points
            ));
        }
        s.push_str(&format!(
            "reference MPPI log-linear slope at x0 = 0: {:.6}\n",
            0.5 * (4.0f64 / 3.0).ln()
        ));
    }
    s
}

fn fmt_vec(v: &StateVector) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", parts.join(", "))
}

fn fmt_gaussian(f: &mut fmt::Formatter<'_>, label: &str, g: &GaussianSpec) -> fmt::Result {
    writeln!(f, "{label}")?;
    writeln!(f, "  mean       {}", fmt_vec(&g.mean))?;
    write!(f, "  covariance")?;
    for row in g.cov.as_matrix().row_iter() {
        let parts: Vec<String> = row.iter().map(|x| format!("{x:>10.6}")).collect();
        write!(f, "\n    [{}]", parts.join(" "))?;
    }
    writeln!(f)
}

/// Gibbs measure, dual posterior and IPS ensemble side by side, plus the three
/// resulting control estimates.
#[derive(Debug, Clone)]
pub struct DualityReport {
    pub x0: StateVector,
    pub n_particles: usize,
    pub gibbs: GaussianSpec,
    pub posterior: GaussianSpec,
    pub ips_posterior: GaussianSpec,
    pub control_exact: StateVector,
    pub control_from_posterior: StateVector,
    pub control_from_ips: StateVector,
}

pub fn duality_report(
    instance: &SocpInstance,
    n_particles: usize,
    seed: u64,
) -> Result<DualityReport> {
    let d = instance.dim();
    let posterior = dual_filter_posterior(instance, &StateVector::zeros(d))?;
    let mut rng = RngStream::new(seed, mix_stream_id(&[0x0d, d as u64, n_particles as u64]));
    let ips = run_ips(
        instance,
        &IpsConfig::new(n_particles, GainMode::Empirical),
        &mut rng,
    )?;
    let (mean, cov) = empirical_moments(&ips.ensemble_after)?;
    let control_from_posterior = &posterior.mean - instance.x0();
    Ok(DualityReport {
        x0: instance.x0().clone(),
        n_particles,
        gibbs: exact_gibbs_measure(instance),
        control_from_posterior,
        posterior,
        ips_posterior: GaussianSpec::new(mean, cov)?,
        control_exact: exact_optimal_control(instance),
        control_from_ips: ips.control_estimate,
    })
}

impl fmt::Display for DualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "x0 = {}", fmt_vec(&self.x0))?;
        fmt_gaussian(f, "Gibbs measure rho*", &self.gibbs)?;
        fmt_gaussian(f, "dual filter posterior at z = 0", &self.posterior)?;
        fmt_gaussian(
            f,
            &format!("IPS ensemble after update (N = {})", self.n_particles),
            &self.ips_posterior,
        )?;
        writeln!(f, "control estimates")?;
        writeln!(f, "  exact -x0/2          {}", fmt_vec(&self.control_exact))?;
        writeln!(
            f,
            "  posterior mean - x0  {}",
            fmt_vec(&self.control_from_posterior)
        )?;
        write!(
            f,
            "  IPS                  {}",
            fmt_vec(&self.control_from_ips)
        )
    }
}

/// Diagnostics of one controller invocation.
#[derive(Debug, Clone)]
pub struct SingleReport {
    pub algorithm: Algorithm,
    pub n_particles: usize,
    pub x0: StateVector,
    pub control_estimate: StateVector,
    pub control_exact: StateVector,
    pub squared_error: f64,
    pub details: SingleDetails,
}

#[derive(Debug, Clone)]
pub enum SingleDetails {
    Mppi {
        ess: f64,
        max_weight_share: f64,
        degenerate: bool,
        free_energy_estimate: Option<f64>,
    },
    Ips {
        gain: nalgebra::DMatrix<f64>,
        gain_fallback: bool,
        posterior: GaussianSpec,
    },
}

pub fn single_run(
    instance: &SocpInstance,
    algorithm: Algorithm,
    n_particles: usize,
    ubar: &StateVector,
    seed: u64,
) -> Result<SingleReport> {
    let d = instance.dim();
    let mut rng = RngStream::new(seed, mix_stream_id(&[0x51, d as u64, n_particles as u64]));
    let (control_estimate, details) = match algorithm {
        Algorithm::MppiSelf | Algorithm::MppiOracle => {
            let norm = if algorithm == Algorithm::MppiSelf {
                Normalization::SelfNormalized
            } else {
                Normalization::OracleNormalized
            };
            let res = run_mppi(
                instance,
                &MppiConfig::new(n_particles, ubar.clone(), norm),
                &mut rng,
            )?;
            // the estimate of -log E[η̃] only means F when sampling the prior
            let free_energy_estimate = (norm == Normalization::SelfNormalized
                && ubar.iter().all(|&u| u == 0.0))
            .then(|| res.ensemble.free_energy_estimate());
            (
                res.control_estimate.clone(),
                SingleDetails::Mppi {
                    ess: res.ess,
                    max_weight_share: res.max_weight_share,
                    degenerate: res.ensemble.is_degenerate(),
                    free_energy_estimate,
                },
            )
        }
        Algorithm::Ips | Algorithm::IpsMeanField => {
            let mode = if algorithm == Algorithm::Ips {
                GainMode::Empirical
            } else {
                GainMode::MeanField
            };
            let res = run_ips(instance, &IpsConfig::new(n_particles, mode), &mut rng)?;
            let posterior = if n_particles >= 2 {
                let (m, c) = empirical_moments(&res.ensemble_after)?;
                GaussianSpec::new(m, c)?
            } else {
                GaussianSpec::isotropic(res.ensemble_after.column(0).into_owned(), 0.0)
            };
            (
                res.control_estimate.clone(),
                SingleDetails::Ips {
                    gain: res.gain,
                    gain_fallback: res.gain_fallback,
                    posterior,
                },
            )
        }
    };
    let control_exact = exact_optimal_control(instance);
    Ok(SingleReport {
        algorithm,
        n_particles,
        x0: instance.x0().clone(),
        squared_error: (&control_estimate - &control_exact).norm_squared(),
        control_estimate,
        control_exact,
        details,
    })
}

impl fmt::Display for SingleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "algorithm        {}", self.algorithm)?;
        writeln!(f, "particles        {}", self.n_particles)?;
        writeln!(f, "x0               {}", fmt_vec(&self.x0))?;
        writeln!(f, "control estimate {}", fmt_vec(&self.control_estimate))?;
        writeln!(f, "exact control    {}", fmt_vec(&self.control_exact))?;
        writeln!(f, "squared error    {:.6e}", self.squared_error)?;
        match &self.details {
            SingleDetails::Mppi {
                ess,
                max_weight_share,
                degenerate,
                free_energy_estimate,
            } => {
                write!(
                    f,
                    "ESS              {ess:.1} ({:.2}% of N)\nmax weight share {max_weight_share:.4e}",
                    100.0 * ess / self.n_particles as f64
                )?;
                if *degenerate {
                    write!(f, "\nwarning: ESS below 1% of N, weights are degenerate")?;
                }
                if let Some(fe) = free_energy_estimate {
                    write!(f, "\nfree energy est. {fe:.6}")?;
                }
                Ok(())
            }
            SingleDetails::Ips {
                gain,
                gain_fallback,
                posterior,
            } => {
                write!(f, "gain")?;
                for row in gain.row_iter() {
                    let parts: Vec<String> = row.iter().map(|x| format!("{x:>10.6}")).collect();
                    write!(f, "\n  [{}]", parts.join(" "))?;
                }
                if *gain_fallback {
                    write!(f, "\nwarning: gain used the eigendecomposition fallback")?;
                }
                writeln!(f)?;
                fmt_gaussian(f, "ensemble after update", posterior)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke() -> SweepConfig {
        SweepConfig {
            dims: vec![1],
            particles: vec![100],
            runs: 10,
            workers: 1,
            ..SweepConfig::default()
        }
    }

    #[test]
    fn defaults_validate() {
        let c = SweepConfig::default();
        c.validate().unwrap();
        assert_eq!(c.dims.len(), 30);
        assert_eq!(c.particles, vec![4_000, 6_000, 10_000, 15_000, 20_000]);
        assert_eq!(c.runs, 1000);
        assert_eq!(c.x0, X0Mode::Zero);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        type Mutate = Box<dyn Fn(&mut SweepConfig)>;
        let cases: Vec<Mutate> = vec![
            Box::new(|c| c.dims.clear()),
            Box::new(|c| c.dims = vec![3, 2]),
            Box::new(|c| c.dims = vec![0, 1]),
            Box::new(|c| c.particles.clear()),
            Box::new(|c| c.runs = 1),
            Box::new(|c| c.algorithms.clear()),
            Box::new(|c| c.algorithms = vec![Algorithm::Ips, Algorithm::Ips]),
            Box::new(|c| c.workers = 0),
            Box::new(|c| c.x0 = X0Mode::Custom(vec![1.0, 2.0])),
            Box::new(|c| c.ubar = Some(vec![f64::NAN])),
            Box::new(|c| c.particles = vec![1]),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut c = smoke();
            mutate(&mut c);
            assert!(
                matches!(c.validate(), Err(Error::InvalidConfig(_))),
                "case {i} accepted"
            );
        }
    }

    #[test]
    fn grid_order_is_algorithm_then_particles_then_dimension() {
        let c = SweepConfig {
            dims: vec![1, 2],
            particles: vec![10, 20],
            algorithms: vec![Algorithm::Ips, Algorithm::MppiSelf],
            ..smoke()
        };
        assert_eq!(
            c.cells(),
            vec![
                (Algorithm::Ips, 10, 1),
                (Algorithm::Ips, 10, 2),
                (Algorithm::Ips, 20, 1),
                (Algorithm::Ips, 20, 2),
                (Algorithm::MppiSelf, 10, 1),
                (Algorithm::MppiSelf, 10, 2),
                (Algorithm::MppiSelf, 20, 1),
                (Algorithm::MppiSelf, 20, 2),
            ]
        );
    }

    #[test]
    fn smoke_sweep_has_one_row_per_algorithm() {
        let out = run_sweep(&smoke(), None).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.fits.is_empty());
        for r in &out.records {
            assert_eq!((r.d, r.n_particles, r.runs), (1, 100, 10));
            assert!(r.mse_mc > 0.0);
        }
    }

    #[test]
    fn csv_round_trips() {
        let out = run_sweep(&smoke(), None).unwrap();
        let mut buf = Vec::new();
        write_csv(&out.records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "algorithm,d,n_particles,runs,failures,mse_mc,mse_stderr,mse_closed_form,mse_bound,seed"
        );
        assert_eq!(read_csv(&buf[..]).unwrap(), out.records);
    }

    #[test]
    fn json_has_metadata_and_records() {
        let c = smoke();
        let out = run_sweep(&c, None).unwrap();
        let mut buf = Vec::new();
        write_json(&c, &out, &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["records"].as_array().unwrap().len(), 4);
        assert_eq!(v["metadata"]["config"]["runs"], 10);
        assert!(v["metadata"]["d_grid_note"]
            .as_str()
            .unwrap()
            .contains("1..30"));
        assert_eq!(v["records"][0]["algorithm"], "mppi-self");
    }

    #[test]
    fn sweep_is_worker_count_invariant() {
        let base = SweepConfig {
            dims: vec![1, 3],
            particles: vec![50],
            runs: 16,
            ..smoke()
        };
        let a = run_sweep(&base, None).unwrap();
        let b = run_sweep(&SweepConfig { workers: 3, ..base }, None).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn fits_need_three_dimensions() {
        let c = SweepConfig {
            dims: vec![1, 2, 3],
            particles: vec![200],
            runs: 20,
            algorithms: vec![Algorithm::MppiOracle, Algorithm::IpsMeanField],
            ..smoke()
        };
        let out = run_sweep(&c, None).unwrap();
        assert_eq!(out.fits.len(), 2);
        assert_eq!(
            out.fit(Algorithm::MppiOracle, 200).unwrap().model,
            ScalingModel::LogLinear
        );
        assert_eq!(
            out.fit(Algorithm::IpsMeanField, 200).unwrap().model,
            ScalingModel::Affine
        );
    }

    #[test]
    fn duality_report_at_ones() {
        let inst = SocpInstance::from_slice(&[1.0, 1.0]).unwrap();
        let rep = duality_report(&inst, 10_000, 7).unwrap();
        assert!((rep.control_exact.clone() - StateVector::from_element(2, -0.5)).amax() < 1e-12);
        assert!((rep.posterior.mean.clone() - StateVector::from_element(2, 0.5)).amax() < 1e-12);
        assert!(rep.posterior.max_abs_diff(&rep.gibbs) < 1e-12);
        assert!((rep.control_from_ips.clone() + StateVector::from_element(2, 0.5)).amax() < 0.05);
        let text = rep.to_string();
        assert!(text.contains("dual filter posterior"));
    }

    #[test]
    fn duality_report_at_origin() {
        let rep = duality_report(&SocpInstance::zero(3), 10_000, 1).unwrap();
        assert_eq!(rep.control_exact.amax(), 0.0);
        assert_eq!(rep.control_from_posterior.amax(), 0.0);
        assert!(rep.control_from_ips.amax() < 0.05);
    }

    #[test]
    fn single_run_reports_diagnostics() {
        let inst = SocpInstance::from_slice(&[0.5, -0.5]).unwrap();
        let zero = StateVector::zeros(2);
        for alg in Algorithm::ALL {
            let rep = single_run(&inst, alg, 2_000, &zero, 3).unwrap();
            assert!(rep.squared_error < 0.05, "{alg}: {}", rep.squared_error);
            match (&rep.details, alg.is_mppi()) {
                (SingleDetails::Mppi { ess, .. }, true) => assert!(*ess > 100.0),
                (SingleDetails::Ips { gain, .. }, false) => assert_eq!(gain.nrows(), 2),
                _ => panic!("wrong details for {alg}"),
            }
            assert!(rep.to_string().contains("squared error"));
        }
    }
}
