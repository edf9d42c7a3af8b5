use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};

use gibbs_control::error_analysis::Algorithm;
use gibbs_control::experiment::{
    default_workers, duality_report, format_summary, run_sweep, single_run, write_outcome,
    OutputFormat, SweepConfig, SweepRecord, X0Mode, DEFAULT_MAX_DIM, DEFAULT_RUNS, DEFAULT_SEED,
};
use gibbs_control::verify::{run_verify, Mutation};
use gibbs_control::{Error, StateVector};

#[derive(Parser)]
#[command(
    name = "gibbs-control",
    version,
    about = "Gibbs-measure control estimators: sweeps, checks and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo m.s.e. over a grid of dimensions and particle counts.
    Sweep(SweepArgs),
    /// Closed-form and identity checks (no large Monte Carlo).
    Verify(VerifyArgs),
    /// Gibbs measure, dual posterior and IPS ensemble for one x0.
    Duality(DualityArgs),
    /// One controller invocation with diagnostics.
    Single(SingleArgs),
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, env = "GIBBS_CONTROL_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// `a..b` (inclusive) or a comma list; items may be mixed.
    #[arg(long, default_value_t = format!("1..{DEFAULT_MAX_DIM}"))]
    dims: String,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "4000,6000,10000,15000,20000"
    )]
    particles: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// `zero`, `ones`, or a comma list of coordinates.
    #[arg(long, default_value = "zero")]
    x0: String,
    /// Nominal MPPI control as a comma list; zero when omitted.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    ubar: Option<Vec<f64>>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "mppi-self,mppi-oracle,ips,ips-meanfield"
    )]
    algo: Vec<String>,
    /// Keep only the MPPI variant with this normalization.
    #[arg(long)]
    normalization: Option<NormalizationArg>,
    /// Output file; stdout when omitted (the summary then goes to stderr).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, hide = true)]
    mutate: Option<MutationArg>,
}

#[derive(Args)]
struct DualityArgs {
    /// `zero`, `ones`, or a comma list of coordinates.
    #[arg(long, default_value = "ones")]
    x0: String,
    /// Dimension for `zero` and `ones`.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 100_000)]
    particles: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct SingleArgs {
    #[arg(long, default_value = "mppi-self")]
    algo: String,
    /// Overrides the normalization of an MPPI `--algo`.
    #[arg(long)]
    normalization: Option<NormalizationArg>,
    #[arg(long, default_value = "ones")]
    x0: String,
    /// Dimension for `zero` and `ones`.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    ubar: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10_000)]
    particles: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    #[value(name = "self")]
    SelfNormalized,
    Oracle,
}

impl NormalizationArg {
    fn mppi_algorithm(self) -> Algorithm {
        match self {
            NormalizationArg::SelfNormalized => Algorithm::MppiSelf,
            NormalizationArg::Oracle => Algorithm::MppiOracle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    Gain,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::DimensionMismatch { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn parse_dims(spec: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::Usage(format!("cannot parse --dims `{spec}`"));
    let mut dims = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = item.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            dims.extend(a..=b);
        } else {
            dims.push(item.parse().map_err(|_| bad())?);
        }
    }
    Ok(dims)
}

fn parse_x0(spec: &str) -> Result<X0Mode, Failure> {
    match spec.trim() {
        "zero" => Ok(X0Mode::Zero),
        "ones" => Ok(X0Mode::Ones),
        list => list
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map(X0Mode::Custom)
            .map_err(|_| Failure::Usage(format!("cannot parse --x0 `{spec}`"))),
    }
}

fn parse_algorithms(names: &[String]) -> Result<Vec<Algorithm>, Failure> {
    names
        .iter()
        .map(|s| s.trim().parse::<Algorithm>().map_err(Failure::from))
        .collect()
}

fn dim_of(x0: &X0Mode, dim: usize) -> usize {
    match x0 {
        X0Mode::Custom(v) => v.len(),
        _ => dim,
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let mut algorithms = parse_algorithms(&args.algo)?;
    if let Some(norm) = args.normalization {
        let keep = norm.mppi_algorithm();
        algorithms.retain(|a| !a.is_mppi() || *a == keep);
    }
    let config = SweepConfig {
        dims: parse_dims(&args.dims)?,
        particles: args.particles,
        runs: args.runs,
        x0: parse_x0(&args.x0)?,
        ubar: args.ubar,
        algorithms,
        seed: args.seed.seed,
        output_path: args.out,
        format: match args.format {
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Json => OutputFormat::Json,
        },
        workers: args.workers.unwrap_or_else(default_workers),
    };
    config.validate()?;

    let total = config.cells().len();
    let done = AtomicUsize::new(0);
    let progress = |r: &SweepRecord| {
        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
        eprintln!(
            "[{k}/{total}] {} d={} N={} mse={:.4e}",
            r.algorithm, r.d, r.n_particles, r.mse_mc
        );
    };
    let outcome = run_sweep(&config, Some(&progress))?;
    write_outcome(&config, &outcome)?;

    let summary = format_summary(&outcome);
    if config.output_path.is_some() {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    if outcome.all_failed() {
        return Err(Failure::Runtime("every grid cell failed".into()));
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let mutation = match args.mutate {
        Some(MutationArg::Gain) => Mutation::GainWithoutInverse,
        None => Mutation::None,
    };
    let outcomes = run_verify(mutation);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name)
        .collect();
    if failed.is_empty() {
        println!("all {} properties passed", outcomes.len());
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} properties failed: {}",
            failed.len(),
            failed.join("; ")
        )))
    }
}

fn cmd_duality(args: DualityArgs) -> Result<(), Failure> {
    let x0 = parse_x0(&args.x0)?;
    let instance = x0.instance(dim_of(&x0, args.dim))?;
    let report = duality_report(&instance, args.particles, args.seed.seed)?;
    println!("{report}");
    Ok(())
}

fn cmd_single(args: SingleArgs) -> Result<(), Failure> {
    let mut algorithm: Algorithm = args.algo.trim().parse()?;
    if let Some(norm) = args.normalization {
        if !algorithm.is_mppi() {
            return Err(Failure::Usage(
                "--normalization applies only to MPPI".into(),
            ));
        }
        algorithm = norm.mppi_algorithm();
    }
    let x0 = parse_x0(&args.x0)?;
    let d = dim_of(&x0, args.dim);
    if d == 0 {
        return Err(Failure::Usage("dimension must be at least 1".into()));
    }
    let instance = x0.instance(d)?;
    let ubar = match args.ubar {
        None => StateVector::zeros(d),
        Some(v) if v.len() == d => StateVector::from_vec(v),
        Some(v) => {
            return Err(Failure::Usage(format!(
                "--ubar has {} entries, expected {d}",
                v.len()
            )))
        }
    };
    let report = single_run(&instance, algorithm, args.particles, &ubar, args.seed.seed)?;
    println!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Duality(a) => cmd_duality(a),
        Command::Single(a) => cmd_single(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
