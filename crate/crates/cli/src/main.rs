use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mixeq::Tolerances;
use serde::Serialize;
use serde_json::Value;

mod commands;
mod report;

use report::{exit_for, write_json, Exit};

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  internal numerical failure
  2  invalid input (flags, problem, policy or gain files)
  3  the requested equilibrium does not exist, or a policy fails verification
  4  resource bound exceeded (noise tree depth)
  5  example reproduction deviates from the reference values";

/// Equilibrium solutions for time-inconsistent mean-field stochastic LQ control.
#[derive(Parser, Debug)]
#[command(name = "mixeq", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(flatten)]
    tol: TolArgs,

    #[command(flatten)]
    out: OutputArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct TolArgs {
    /// Relative singular-value cutoff of the pseudoinverse.
    #[arg(long, global = true, env = "MIXEQ_PINV_RTOL", default_value_t = 1e-12)]
    pinv_rtol: f64,
    /// Eigenvalue slack of PSD tests, scaled by the matrix norm.
    #[arg(long, global = true, env = "MIXEQ_PSD_TOL", default_value_t = 1e-8)]
    psd_tol: f64,
    /// Residual slack of range tests, scaled by the vector norm.
    #[arg(long, global = true, env = "MIXEQ_RANGE_TOL", default_value_t = 1e-8)]
    range_tol: f64,
    /// Smallest singular-value ratio counted as invertible.
    #[arg(long, global = true, env = "MIXEQ_INVERT_RTOL", default_value_t = 1e-10)]
    invert_rtol: f64,
}

impl TolArgs {
    fn tolerances(&self) -> Result<Tolerances> {
        let tol = Tolerances {
            pinv_rtol: self.pinv_rtol,
            psd_tol: self.psd_tol,
            range_tol: self.range_tol,
            invert_rtol: self.invert_rtol,
        };
        tol.validate()?;
        Ok(tol)
    }
}

#[derive(Args, Debug, Clone)]
struct OutputArgs {
    /// Write the JSON run report to this file.
    #[arg(long, global = true, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Print the JSON report on stdout instead of the text summary.
    #[arg(long, global = true)]
    json: bool,
    /// Record wall-clock time in the report (makes reports differ between runs).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the backward recursions from stage t and build the equilibrium policy.
    Solve(SolveArgs),
    /// Report existence and uniqueness verdicts.
    Classify(ClassifyArgs),
    /// Monte-Carlo simulation of a policy's closed loop.
    Simulate(SimulateArgs),
    /// Check a policy against the exact two-point noise tree.
    Verify(VerifyArgs),
    /// Recompute the built-in example and compare with the reference tables.
    Reproduce(ReproduceArgs),
    /// Write the built-in example problem and its reference gain files.
    Example(ExampleArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum KindArg {
    Open,
    Feedback,
    Mixed,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum ScopeArg {
    Fixed,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum NoiseArg {
    Gaussian,
    TwoPoint,
}

impl From<NoiseArg> for mixeq::simulate::NoiseKind {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Gaussian => Self::Gaussian,
            NoiseArg::TwoPoint => Self::TwoPoint,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct PhiArgs {
    /// Gain file for the pure-feedback part: {"Phi": [...]} or an array of m x n stage gains.
    #[arg(long, value_name = "FILE", conflicts_with = "phi_random")]
    phi: Option<PathBuf>,
    /// Draw the pure-feedback gains with standard normal entries.
    #[arg(long, requires = "seed")]
    phi_random: bool,
    /// Seed for random gains.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SolveArgs {
    #[arg(long, value_name = "FILE")]
    problem: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Initial stage.
    #[arg(long, default_value_t = 0)]
    t: usize,
    /// Initial state, comma separated. Classifies the fixed pair (t, x) instead of all pairs.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    #[command(flatten)]
    phi: PhiArgs,
    /// Write the policy document here.
    #[arg(long, value_name = "FILE")]
    policy_out: Option<PathBuf>,
    /// Monte-Carlo samples used by fixed-pair classification.
    #[arg(long, default_value_t = 256)]
    samples: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ClassifyArgs {
    #[arg(long, value_name = "FILE")]
    problem: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    scope: ScopeArg,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    #[command(flatten)]
    phi: PhiArgs,
    /// Monte-Carlo samples for fixed-pair verdicts.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Seed of the fixed-pair sampling.
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SimulateArgs {
    #[arg(long, value_name = "FILE")]
    problem: PathBuf,
    #[arg(long, value_name = "FILE")]
    policy: PathBuf,
    /// Initial stage; must match the policy.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    /// Output directory for trajectory CSVs and the summary.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// One CSV with a replicate column instead of one file per replicate.
    #[arg(long)]
    long: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
struct VerifyArgs {
    #[arg(long, value_name = "FILE")]
    problem: PathBuf,
    #[arg(long, value_name = "FILE")]
    policy: PathBuf,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    /// Largest number of tree stages built.
    #[arg(long, default_value_t = mixeq::simulate::DEFAULT_DEPTH_LIMIT)]
    depth_limit: usize,
    /// Random perturbation directions per stage.
    #[arg(long, default_value_t = 5)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ReproduceArgs {
    /// Also run randomly drawn gains, seeded by this value.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of random gain draws when --seed is given.
    #[arg(long, default_value_t = 10)]
    draws: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ExampleArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// What a command hands back to `main`.
pub struct Outcome {
    result: Value,
    summary: String,
    exit: Exit,
}

fn run(cli: &Cli) -> Result<Exit> {
    let tol = cli.tol.tolerances()?;
    let (report, outcome) = match &cli.command {
        Command::Solve(a) => commands::solve(a, &tol)?,
        Command::Classify(a) => commands::classify(a, &tol)?,
        Command::Simulate(a) => commands::simulate(a, &tol)?,
        Command::Verify(a) => commands::verify(a, &tol)?,
        Command::Reproduce(a) => commands::reproduce(a, &tol)?,
        Command::Example(a) => commands::example(a, &tol)?,
    };
    let doc = report.finish(outcome.result, outcome.exit, cli.out.timing);
    if let Some(path) = &cli.out.report {
        write_json(path, &doc)?;
    }
    if cli.out.json {
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print!("{}", outcome.summary);
    }
    Ok(outcome.exit)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(exit) => ExitCode::from(exit as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_for(&err) as u8)
        }
    }
}
