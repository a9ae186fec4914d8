use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which feasibility constraint of an allocation failed.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Profile vectors or the transfer matrix do not have N entries.
    Shape { expected: usize, found: usize },
    /// A quantity is negative or not finite.
    Negative { what: &'static str, peer: usize, value: f64 },
    /// y_i > x_i.
    ShareExceedsProduction { peer: usize, share: f64, production: f64 },
    /// z_ii != 0.
    SelfDownload { peer: usize, value: f64 },
    /// z_ij > y_j.
    DownloadExceedsShare { downloader: usize, source: usize, amount: f64, shared: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape { expected, found } => {
                write!(f, "expected {expected} entries, found {found}")
            }
            Violation::Negative { what, peer, value } => {
                write!(f, "{what} of peer {peer} is {value}, must be a finite nonnegative number")
            }
            Violation::ShareExceedsProduction { peer, share, production } => {
                write!(f, "peer {peer} shares {share} but only produced {production}")
            }
            Violation::SelfDownload { peer, value } => {
                write!(f, "peer {peer} downloads {value} from itself")
            }
            Violation::DownloadExceedsShare { downloader, source, amount, shared } => write!(
                f,
                "peer {downloader} downloads {amount} from peer {source}, which shares only {shared}"
            ),
        }
    }
}

/// Stage of the three-stage game, used to locate infeasible strategy output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Production,
    Sharing,
    Transfer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Production => "production",
            Stage::Sharing => "sharing",
            Stage::Transfer => "transfer",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rate must be positive, got {0}")]
    NonPositiveRate(f64),

    #[error("could not bracket the root of f'(x) = {0}")]
    NoBracket(f64),

    #[error("infeasible allocation: {0}")]
    Infeasible(Violation),

    #[error("invalid production split: {0}")]
    BadWeights(String),

    #[error("enforced sharing total {total} is {which} bound {bound}")]
    EnforcedBound {
        which: &'static str,
        total: f64,
        bound: f64,
    },

    #[error("{n} peers is too many for vertex enumeration (max {max}); use is_in_core")]
    TooManyPeers { n: usize, max: usize },

    #[error("total production {total} differs from the Pareto level {expected}")]
    NotParetoTotal { total: f64, expected: f64 },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("unbounded best response: effective marginal cost {0} is not positive")]
    Unbounded(f64),

    #[error("price adjustment diverged at iteration {iteration} (price {price})")]
    Divergence { iteration: usize, price: f64 },

    #[error("peer {peer} starts at consumption {total}, expected the optimum {expected}")]
    NonOptimalStart {
        peer: usize,
        total: f64,
        expected: f64,
    },

    #[error("peer {peer} produced an infeasible {stage} decision: {detail}")]
    StrategyInfeasible {
        peer: usize,
        stage: Stage,
        detail: String,
    },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit status for this error: 2 for I/O failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}
