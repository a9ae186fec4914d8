//! Analysis toolkit for the content production and sharing (CPS) game in
//! peer-to-peer networks.
//!
//! Peers produce content at a linear cost, choose how much of it to share, and
//! download shared content from each other, paying linear download and upload
//! costs. The crate computes the non-cooperative, Pareto efficient and
//! enforced-sharing outcomes ([`game`]), the associated coalitional games
//! ([`coalitional`]), incentive schemes that restore efficiency
//! ([`incentives`]), a round-based simulator that checks those predictions
//! dynamically ([`sim`]), and the experiment runner behind the `cps` binary
//! ([`experiment`]).

pub mod benefit;
pub mod error;
pub mod experiment;
pub mod coalitional;
pub mod game;
pub mod incentives;
pub mod sim;

pub use benefit::{conjugate, distinct_files_benefit, log_benefit, maximizer, BenefitSpec, DistinctFilesParams};
pub use error::{Error, Result};
pub use game::{Allocation, Concept, CpsParams, InefficiencyMetrics, SolutionReport};
