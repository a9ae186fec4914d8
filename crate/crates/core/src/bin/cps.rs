use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cps::experiment::{run_report, Command, ExperimentConfig, SchemeKind};
use cps::Result;

/// Content production and sharing game: solution concepts, incentive
/// schemes and simulations.
#[derive(Debug, Parser)]
#[command(name = "cps", version)]
struct Cli {
    /// Experiment configuration file (key = value lines with [section] headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV files; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BrScheme {
    None,
    Pricing,
    Intervention,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write the six data series over the configured range of N.
    Sweep,
    /// Non-cooperative, efficient and full-sharing outcomes for N peers.
    Solve {
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Vertices and centroid of the core of the sharing game.
    Core {
        #[arg(long, default_value_t = 3)]
        n: usize,
    },
    /// Shapley value of the sharing game.
    Shapley {
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Price adjustment towards the optimal price.
    PriceDynamics {
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Starting price [default: half the optimal price].
        #[arg(long)]
        p0: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        /// Euler step [default: moves the price by about 1% of p*].
        #[arg(long)]
        step: Option<f64>,
        #[arg(long, default_value_t = 100_000)]
        max_iters: usize,
    },
    /// Quantity adjustment at the optimal price from a seeded random start.
    QuantityDynamics {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 1e-2)]
        step: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_iters: usize,
    },
    /// Equilibrium under the optimal intervention function.
    Intervention {
        #[arg(long, default_value_t = 2)]
        n: usize,
    },
    /// Repeated play with grim-trigger strategies.
    Repeated {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        rounds: usize,
        /// Peer (0-based) that deviates once.
        #[arg(long)]
        deviant: Option<usize>,
        #[arg(long, default_value_t = 10)]
        deviation_round: usize,
    },
    /// Optimal group size under enforced full sharing.
    GroupSize {
        /// Also report the core of the group-formation game for this population.
        #[arg(long)]
        total_n: Option<usize>,
    },
    /// Best-response dynamics of the simulator.
    BestResponse {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, value_enum, default_value_t = BrScheme::Pricing)]
        scheme: BrScheme,
        #[arg(long, default_value_t = 60)]
        rounds: usize,
    },
}

impl From<Cmd> for Command {
    fn from(cmd: Cmd) -> Self {
        match cmd {
            Cmd::Sweep => Command::Sweep,
            Cmd::Solve { n } => Command::Solve { n },
            Cmd::Core { n } => Command::Core { n },
            Cmd::Shapley { n } => Command::Shapley { n },
            Cmd::PriceDynamics { n, p0, eta, step, max_iters } => Command::PriceDynamics { n, p0, eta, step, max_iters },
            Cmd::QuantityDynamics { n, step, max_iters } => Command::QuantityDynamics { n, step, max_iters },
            Cmd::Intervention { n } => Command::Intervention { n },
            Cmd::Repeated { n, rounds, deviant, deviation_round } => {
                Command::Repeated { n, rounds, deviant, deviation_round }
            }
            Cmd::GroupSize { total_n } => Command::GroupSize { total_n },
            Cmd::BestResponse { n, scheme, rounds } => {
                let scheme = match scheme {
                    BrScheme::None => SchemeKind::None,
                    BrScheme::Pricing => SchemeKind::Pricing,
                    BrScheme::Intervention => SchemeKind::Intervention,
                };
                Command::BestResponse { n, scheme, rounds }
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let report = run_report(&config, &cli.command.into())?;
    match write!(io::stdout().lock(), "{report}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
