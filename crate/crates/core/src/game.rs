//! The content production and sharing (CPS) game: parameters, allocations,
//! peer utilities and the closed-form outcomes of the one-shot game.

use std::fmt;

use crate::benefit::BenefitSpec;
use crate::error::{Error, Result, Violation};

/// Absolute tolerance used by allocation feasibility checks.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// One CPS game instance: N homogeneous peers sharing a benefit function and
/// linear production, download and upload costs.
#[derive(Debug, Clone)]
pub struct CpsParams {
    n_peers: usize,
    benefit: BenefitSpec,
    kappa: f64,
    delta: f64,
    sigma: f64,
}

impl CpsParams {
    pub fn new(n_peers: usize, benefit: BenefitSpec, kappa: f64, delta: f64, sigma: f64) -> Result<Self> {
        if n_peers == 0 {
            return Err(Error::InvalidParameter("need at least one peer".into()));
        }
        for (name, v) in [("kappa", kappa), ("delta", delta), ("sigma", sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if kappa <= delta + sigma {
            return Err(Error::InvalidParameter(format!(
                "the network has no social value unless kappa > delta + sigma ({kappa} <= {})",
                delta + sigma
            )));
        }
        if benefit.deriv_at_zero() <= kappa {
            return Err(Error::InvalidParameter(format!(
                "f'(0) = {} must exceed kappa = {kappa}",
                benefit.deriv_at_zero()
            )));
        }
        Ok(CpsParams { n_peers, benefit, kappa, delta, sigma })
    }

    /// The same costs and benefit with a different number of peers.
    pub fn with_peers(&self, n_peers: usize) -> Result<Self> {
        if n_peers == 0 {
            return Err(Error::InvalidParameter("need at least one peer".into()));
        }
        Ok(CpsParams { n_peers, ..self.clone() })
    }

    pub fn n_peers(&self) -> usize {
        self.n_peers
    }
    pub fn benefit(&self) -> &BenefitSpec {
        &self.benefit
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Per-capita marginal cost of one content unit when `n` peers share
    /// everything: `kappa/n + (n-1)(delta+sigma)/n`.
    pub fn beta_tilde(&self, n: usize) -> f64 {
        let n = n as f64;
        self.kappa / n + (n - 1.0) * (self.delta + self.sigma) / n
    }

    /// Effective marginal cost of production under full sharing in a group of
    /// `n`: `kappa + (n-1) sigma`.
    pub fn gamma_tilde(&self, n: usize) -> f64 {
        self.kappa + (n as f64 - 1.0) * self.sigma
    }

    pub fn beta(&self) -> f64 {
        self.beta_tilde(self.n_peers)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_tilde(self.n_peers)
    }

    /// Coefficient of own production in a Pareto peer's utility:
    /// `kappa + (N-1) sigma - delta`.
    pub fn production_penalty(&self) -> f64 {
        self.kappa + (self.n_peers as f64 - 1.0) * self.sigma - self.delta
    }

    /// Maximizer of `f(x) - alpha x`; 0 when `alpha >= f'(0)`.
    pub fn x_hat(&self, alpha: f64) -> f64 {
        self.benefit.maximizer(alpha).expect("cost rates of valid params are positive")
    }

    /// `f*(alpha)`.
    pub fn conj(&self, alpha: f64) -> f64 {
        self.benefit.conjugate(alpha).expect("cost rates of valid params are positive")
    }

    /// `f(x) - rate x`.
    pub fn surplus(&self, x: f64, rate: f64) -> f64 {
        self.benefit.eval(x) - rate * x
    }
}

/// Production, sharing and transfer profile. `z[i][j]` is what peer `i`
/// downloads from peer `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

impl Allocation {
    pub fn zeros(n: usize) -> Self {
        Allocation { x: vec![0.0; n], y: vec![0.0; n], z: vec![vec![0.0; n]; n] }
    }

    /// Full sharing and full download of the given production levels.
    pub fn full_sharing(x: Vec<f64>) -> Self {
        let n = x.len();
        let z = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { x[j] }).collect())
            .collect();
        Allocation { y: x.clone(), x, z }
    }

    pub fn n_peers(&self) -> usize {
        self.x.len()
    }

    /// `d_i`, row sum of `z`.
    pub fn download(&self, peer: usize) -> f64 {
        self.z[peer].iter().sum()
    }

    /// `u_i`, column sum of `z`.
    pub fn upload(&self, peer: usize) -> f64 {
        self.z.iter().map(|row| row[peer]).sum()
    }

    /// `w(Z)`, the total transfer volume.
    pub fn transfer_volume(&self) -> f64 {
        self.z.iter().flatten().sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(Error::Infeasible)
    }

    fn check(&self) -> Result<(), Violation> {
        let n = self.x.len();
        let shape = |found| Violation::Shape { expected: n, found };
        if self.y.len() != n {
            return Err(shape(self.y.len()));
        }
        if self.z.len() != n {
            return Err(shape(self.z.len()));
        }
        if let Some(row) = self.z.iter().find(|row| row.len() != n) {
            return Err(shape(row.len()));
        }
        let nonneg = |what, peer, value: f64| {
            if value.is_finite() && value >= -FEASIBILITY_TOL {
                Ok(())
            } else {
                Err(Violation::Negative { what, peer, value })
            }
        };
        for i in 0..n {
            nonneg("production", i, self.x[i])?;
            nonneg("share", i, self.y[i])?;
            if self.y[i] > self.x[i] + FEASIBILITY_TOL {
                return Err(Violation::ShareExceedsProduction {
                    peer: i,
                    share: self.y[i],
                    production: self.x[i],
                });
            }
        }
        for (i, row) in self.z.iter().enumerate() {
            for (j, &amount) in row.iter().enumerate() {
                nonneg("download", i, amount)?;
                if i == j {
                    if amount.abs() > FEASIBILITY_TOL {
                        return Err(Violation::SelfDownload { peer: i, value: amount });
                    }
                } else if amount > self.y[j] + FEASIBILITY_TOL {
                    return Err(Violation::DownloadExceedsShare {
                        downloader: i,
                        source: j,
                        amount,
                        shared: self.y[j],
                    });
                }
            }
        }
        Ok(())
    }
}

/// `v_i = f(x_i + d_i) - kappa x_i - delta d_i - sigma u_i`.
pub fn utility(params: &CpsParams, alloc: &Allocation, peer: usize) -> Result<f64> {
    check_size(params, alloc)?;
    alloc.validate()?;
    if peer >= alloc.n_peers() {
        return Err(Error::InvalidParameter(format!("no peer {peer}")));
    }
    Ok(utility_unchecked(params, alloc, peer))
}

/// Utilities of every peer.
pub fn utilities(params: &CpsParams, alloc: &Allocation) -> Result<Vec<f64>> {
    check_size(params, alloc)?;
    alloc.validate()?;
    Ok((0..alloc.n_peers()).map(|i| utility_unchecked(params, alloc, i)).collect())
}

pub(crate) fn utility_unchecked(params: &CpsParams, alloc: &Allocation, peer: usize) -> f64 {
    let d = alloc.download(peer);
    let u = alloc.upload(peer);
    let x = alloc.x[peer];
    params.benefit().eval(x + d) - params.kappa() * x - params.delta() * d - params.sigma() * u
}

fn check_size(params: &CpsParams, alloc: &Allocation) -> Result<()> {
    if alloc.n_peers() != params.n_peers() {
        return Err(Error::Infeasible(Violation::Shape {
            expected: params.n_peers(),
            found: alloc.n_peers(),
        }));
    }
    Ok(())
}

/// Which outcome a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concept {
    /// Non-cooperative sequential equilibrium.
    Se,
    /// Pareto efficiency.
    Pe,
    /// Equilibrium with enforced sharing levels.
    EnforcedLevels,
    /// Equilibrium with enforced full sharing.
    FullSharing,
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Concept::Se => "SE",
            Concept::Pe => "PE",
            Concept::EnforcedLevels => "EnforcedLevels",
            Concept::FullSharing => "FullSharing",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SolutionReport {
    pub allocation: Allocation,
    pub utilities: Vec<f64>,
    pub total_utility: f64,
    pub transfer_volume: f64,
    pub concept: Concept,
}

impl SolutionReport {
    pub fn from_allocation(params: &CpsParams, allocation: Allocation, concept: Concept) -> Result<Self> {
        let utilities = utilities(params, &allocation)?;
        Ok(SolutionReport {
            total_utility: utilities.iter().sum(),
            transfer_volume: allocation.transfer_volume(),
            utilities,
            allocation,
            concept,
        })
    }
}

/// Equal production weights.
pub fn equal_split(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_split(params: &CpsParams, split: &[f64]) -> Result<()> {
    if split.len() != params.n_peers() {
        return Err(Error::BadWeights(format!(
            "expected {} weights, got {}",
            params.n_peers(),
            split.len()
        )));
    }
    if let Some(w) = split.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::BadWeights(format!("weight {w} is not a nonnegative number")));
    }
    let sum: f64 = split.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::BadWeights(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Unique SE outcome: autarkic production, no sharing, no transfers.
pub fn solve_noncooperative(params: &CpsParams) -> SolutionReport {
    let n = params.n_peers();
    let x = params.x_hat(params.kappa());
    let alloc = Allocation { x: vec![x; n], ..Allocation::zeros(n) };
    SolutionReport::from_allocation(params, alloc, Concept::Se).expect("SE allocation is feasible")
}

/// Pareto efficient outcome with total production `x_hat(beta)` split by
/// `split`, full sharing and full download.
pub fn solve_pareto(params: &CpsParams, split: &[f64]) -> Result<SolutionReport> {
    check_split(params, split)?;
    let total = params.x_hat(params.beta());
    let x = split.iter().map(|w| w * total).collect();
    SolutionReport::from_allocation(params, Allocation::full_sharing(x), Concept::Pe)
}

/// SE outcome when the sharing levels are enforced at `y_e`: peers produce
/// exactly `y_e` and download everything shared. Requires
/// `x_hat(kappa) <= sum(y_e) <= x_hat(delta)`.
pub fn solve_enforced_levels(params: &CpsParams, y_e: &[f64]) -> Result<SolutionReport> {
    if y_e.len() != params.n_peers() {
        return Err(Error::InvalidParameter(format!(
            "expected {} sharing levels, got {}",
            params.n_peers(),
            y_e.len()
        )));
    }
    if let Some(y) = y_e.iter().find(|y| !(y.is_finite() && **y >= 0.0)) {
        return Err(Error::InvalidParameter(format!("sharing level {y} is negative")));
    }
    let total: f64 = y_e.iter().sum();
    let lower = params.x_hat(params.kappa());
    let upper = params.x_hat(params.delta());
    if total < lower - FEASIBILITY_TOL {
        return Err(Error::EnforcedBound { which: "below the lower", total, bound: lower });
    }
    if total > upper + FEASIBILITY_TOL {
        return Err(Error::EnforcedBound { which: "above the upper", total, bound: upper });
    }
    SolutionReport::from_allocation(params, Allocation::full_sharing(y_e.to_vec()), Concept::EnforcedLevels)
}

/// Production under enforced full sharing: `x_tilde(gamma)`, zero once
/// `gamma >= f'(0)`.
pub fn full_sharing_production(params: &CpsParams, n: usize) -> f64 {
    params.x_hat(params.gamma_tilde(n))
}

/// Average utility under enforced full sharing in a group of `n`:
/// `f(x~) - beta~(n) x~`.
pub fn full_sharing_value(params: &CpsParams, n: usize) -> f64 {
    let x = full_sharing_production(params, n);
    params.surplus(x, params.beta_tilde(n))
}

/// SE outcome of the game with enforced full sharing.
pub fn solve_full_sharing(params: &CpsParams, split: &[f64]) -> Result<SolutionReport> {
    check_split(params, split)?;
    let total = full_sharing_production(params, params.n_peers());
    let x = split.iter().map(|w| w * total).collect();
    SolutionReport::from_allocation(params, Allocation::full_sharing(x), Concept::FullSharing)
}

/// Price of anarchy, price of no sharing and price of underproduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InefficiencyMetrics {
    pub poa: f64,
    /// `+inf` when nothing is produced under enforced full sharing.
    pub pons: f64,
    pub pou: f64,
}

pub fn inefficiency(params: &CpsParams) -> InefficiencyMetrics {
    let nc = params.conj(params.kappa());
    let pe = params.conj(params.beta());
    let x_fs = full_sharing_production(params, params.n_peers());
    let fs = params.surplus(x_fs, params.beta());
    InefficiencyMetrics {
        poa: nc / pe,
        pons: if x_fs == 0.0 { f64::INFINITY } else { nc / fs },
        pou: fs / pe,
    }
}
