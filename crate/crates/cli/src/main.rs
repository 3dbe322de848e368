//! `measure-mdp`: validate, solve, certify, learn and simulate measure-space MDPs.

mod artifacts;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "measure-mdp", version, about = "Dissipativity certificates for MDPs lifted to state distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a problem file and report every violated invariant.
    Validate {
        problem: PathBuf,
    },
    /// Optimal values, optimal policy and optimal steady state.
    Solve {
        problem: PathBuf,
        #[command(flatten)]
        functional: FunctionalArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Synthesize a storage functional and audit it.
    Certify {
        problem: PathBuf,
        #[command(flatten)]
        functional: FunctionalArgs,
        #[command(flatten)]
        dissimilarity: DissimilarityArgs,
        /// Interior sample measures for the storage program.
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add a quadratic term to the storage functional.
        #[arg(long)]
        quadratic: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fitted Q-iteration followed by the lift to finite-horizon parameters.
    Learn {
        problem: PathBuf,
        /// Learning configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the configuration file.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        dissimilarity: DissimilarityArgs,
        /// Horizon of the lifted finite-horizon problem.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        horizon: u64,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Propagate distributions under a policy and tabulate D and the rotated value.
    Simulate {
        problem: PathBuf,
        /// Certificate produced by `certify`; supplies the steady state, storage and alpha.
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Steady-state distribution as comma-separated weights.
        #[arg(long, value_parser = parse_vector)]
        rho_star: Option<Weights>,
        /// Actions per state as comma-separated indices; defaults to the optimal policy.
        #[arg(long, value_parser = parse_actions)]
        policy: Option<Actions>,
        /// Initial distribution (repeatable); defaults to every point mass and the uniform distribution.
        #[arg(long = "rho0", value_parser = parse_vector)]
        rho0: Vec<Weights>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[command(flatten)]
        functional: FunctionalArgs,
        #[command(flatten)]
        dissimilarity: DissimilarityArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Maximum number of deterministic policies to enumerate.
    #[arg(long, default_value_t = measure_mdp::DEFAULT_POLICY_CAP)]
    cap: usize,
}

#[derive(Args, Clone)]
struct FunctionalArgs {
    /// Stage-cost functional; overrides the one in the problem file.
    #[arg(long, value_enum)]
    functional: Option<FunctionalKind>,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Reference distribution for `linear-plus-kl`, comma-separated.
    #[arg(long, value_parser = parse_vector)]
    reference: Option<Weights>,
}

#[derive(Args, Clone)]
struct DissimilarityArgs {
    #[arg(long, value_enum, default_value_t = DissimilarityKind::Tv)]
    dissimilarity: DissimilarityKind,
    /// Ground metric for `w1` as a JSON matrix; defaults to |i - j|.
    #[arg(long)]
    metric: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy)]
#[value(rename_all = "snake_case")]
enum FunctionalKind {
    Linear,
    LinearPlusVariance,
    LinearPlusKl,
}

#[derive(ValueEnum, Clone, Copy)]
enum DissimilarityKind {
    Tv,
    Kl,
    W1,
}

/// Comma-separated weights.
#[derive(Clone)]
struct Weights(Vec<f64>);

/// Comma-separated action indices.
#[derive(Clone)]
struct Actions(Vec<usize>);

fn parse_vector(s: &str) -> Result<Weights, String> {
    s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}"))).collect::<Result<_, _>>().map(Weights)
}

fn parse_actions(s: &str) -> Result<Actions, String> {
    s.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| format!("'{x}': {e}"))).collect::<Result<_, _>>().map(Actions)
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("MEASURE_MDP_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("MEASURE_MDP_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Domain(format!("cannot configure the thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Validate { problem } => commands::validate(&problem),
        Command::Solve { problem, functional, common } => commands::solve(&problem, &functional.into(), &common.into()),
        Command::Certify { problem, functional, dissimilarity, samples, seed, quadratic, common } => commands::certify(
            &problem,
            &functional.into(),
            &dissimilarity.into(),
            commands::CertifyOptions { samples: samples as usize, seed, quadratic },
            &common.into(),
        ),
        Command::Learn { problem, config, seed, dissimilarity, horizon, common } => {
            commands::learn(&problem, &config, seed, &dissimilarity.into(), horizon as usize, &common.into())
        }
        Command::Simulate { problem, certificate, rho_star, policy, rho0, steps, functional, dissimilarity, common } => {
            commands::simulate(
                &problem,
                commands::SimulateOptions {
                    certificate,
                    rho_star: rho_star.map(|w| w.0),
                    policy: policy.map(|a| a.0),
                    rho0: rho0.into_iter().map(|w| w.0).collect(),
                    steps,
                },
                &functional.into(),
                &dissimilarity.into(),
                &common.into(),
            )
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("measure-mdp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl From<CommonArgs> for commands::Common {
    fn from(a: CommonArgs) -> Self {
        commands::Common { out: a.out, cap: a.cap }
    }
}

impl From<FunctionalArgs> for commands::FunctionalChoice {
    fn from(a: FunctionalArgs) -> Self {
        use measure_mdp::functionals::FunctionalKindName as K;
        let kind = a.functional.map(|k| match k {
            FunctionalKind::Linear => K::Linear,
            FunctionalKind::LinearPlusVariance => K::LinearPlusVariance,
            FunctionalKind::LinearPlusKl => K::LinearPlusKl,
        });
        commands::FunctionalChoice { kind, beta: a.beta, reference: a.reference.map(|w| w.0) }
    }
}

impl From<DissimilarityArgs> for commands::DissimilarityChoice {
    fn from(a: DissimilarityArgs) -> Self {
        let name = match a.dissimilarity {
            DissimilarityKind::Tv => "tv",
            DissimilarityKind::Kl => "kl",
            DissimilarityKind::W1 => "w1",
        };
        commands::DissimilarityChoice { name, metric: a.metric }
    }
}
