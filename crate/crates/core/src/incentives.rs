//! Incentive schemes for non-cooperative peers: optimal linear pricing and
//! its adjustment processes, intervention-based differential service, and
//! the participation-efficiency test behind repeated-game cooperation.

use crate::error::{Error, Result};
use crate::game::{utilities, Allocation, Concept, CpsParams, SolutionReport};

/// Stop the price process once `|p - p*|` falls below this.
pub const PRICE_TOL: f64 = 1e-6;
/// Stop the quantity process once `|sum x - x_hat(beta)|` falls below this.
pub const QUANTITY_TOL: f64 = 1e-6;
/// Width of the knife-edge branch of the priced best response.
pub const KNIFE_EDGE_TOL: f64 = 1e-10;

/// Uniform linear price: peer `i` receives `p (u_i - d_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearPrice {
    pub p: f64,
}

impl LinearPrice {
    pub fn new(p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::InvalidParameter(format!("price must be positive, got {p}")));
        }
        Ok(LinearPrice { p })
    }

    pub fn optimal(params: &CpsParams) -> Self {
        LinearPrice { p: optimal_price(params) }
    }

    pub fn payment(&self, alloc: &Allocation, peer: usize) -> f64 {
        self.p * (alloc.upload(peer) - alloc.download(peer))
    }

    /// Payments to every peer; they always sum to zero.
    pub fn payments(&self, alloc: &Allocation) -> Vec<f64> {
        (0..alloc.n_peers()).map(|i| self.payment(alloc, i)).collect()
    }
}

/// `p* = [kappa + (N-1) sigma - delta] / N`.
pub fn optimal_price(params: &CpsParams) -> f64 {
    params.production_penalty() / params.n_peers() as f64
}

/// Intervention raising the marginal download cost by `q(r) = p* [1 - r]+`
/// for a peer with upload/download rating `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterventionFn {
    pub p_star: f64,
}

impl InterventionFn {
    pub fn optimal(params: &CpsParams) -> Self {
        InterventionFn { p_star: optimal_price(params) }
    }

    pub fn level(&self, rating: f64) -> f64 {
        self.p_star * (1.0 - rating).max(0.0)
    }

    /// `u / d`, or `+inf` for a peer that downloads nothing.
    pub fn rating(upload: f64, download: f64) -> f64 {
        if download > 0.0 {
            upload / download
        } else {
            f64::INFINITY
        }
    }

    /// Extra download cost charged to `peer`, `q(r_i) d_i`.
    pub fn surcharge(&self, alloc: &Allocation, peer: usize) -> f64 {
        let d = alloc.download(peer);
        self.level(Self::rating(alloc.upload(peer), d)) * d
    }
}

/// Payoffs under intervention: utility minus the surcharge.
pub fn intervention_payoffs(params: &CpsParams, alloc: &Allocation, q: &InterventionFn) -> Result<Vec<f64>> {
    let v = utilities(params, alloc)?;
    Ok(v.into_iter().enumerate().map(|(i, v)| v - q.surcharge(alloc, i)).collect())
}

/// Production and download chosen by a price-taking peer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PricedChoice {
    pub production: f64,
    pub download: f64,
}

/// Solution of a peer's separable problem under per-peer prices `prices`.
///
/// On the knife edge `sum p = kappa + (N-1) sigma - delta` any split of the
/// optimal consumption is optimal; the symmetric split is returned.
pub fn priced_best_response(params: &CpsParams, prices: &[f64], peer: usize) -> Result<PricedChoice> {
    let n = params.n_peers();
    if prices.len() != n || peer >= n {
        return Err(Error::InvalidParameter(format!("need {n} prices and a peer below {n}")));
    }
    if let Some(p) = prices.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::InvalidParameter(format!("price {p} is negative")));
    }
    let sum: f64 = prices.iter().sum();
    let threshold = params.production_penalty();
    let download_cost = prices[peer] + params.delta();
    let production_cost = params.kappa() + (n as f64 - 1.0) * params.sigma() - (sum - prices[peer]);
    if (sum - threshold).abs() <= KNIFE_EDGE_TOL {
        let c = params.x_hat(download_cost);
        return Ok(PricedChoice { production: c / n as f64, download: c * (n as f64 - 1.0) / n as f64 });
    }
    if sum < threshold {
        Ok(PricedChoice { production: 0.0, download: params.x_hat(download_cost) })
    } else {
        if production_cost <= 0.0 {
            return Err(Error::Unbounded(production_cost));
        }
        Ok(PricedChoice { production: params.x_hat(production_cost), download: 0.0 })
    }
}

/// Aggregate demand and supply of content at a uniform price, assuming
/// peers coordinate quantities whenever possible.
#[derive(Debug, Clone)]
pub struct Market {
    params: CpsParams,
    p_star: f64,
}

impl Market {
    pub fn new(params: &CpsParams) -> Self {
        Market { params: params.clone(), p_star: optimal_price(params) }
    }

    pub fn p_star(&self) -> f64 {
        self.p_star
    }

    fn at_optimum(&self, p: f64) -> bool {
        (p - self.p_star).abs() <= 1e-12 * self.p_star.max(1.0)
    }

    fn n(&self) -> f64 {
        self.params.n_peers() as f64
    }

    pub fn demand(&self, p: f64) -> f64 {
        let n = self.n();
        if self.at_optimum(p) {
            (n - 1.0) * self.params.x_hat(self.params.beta())
        } else if p < self.p_star {
            n * self.params.x_hat(p + self.params.delta())
        } else {
            0.0
        }
    }

    /// `+inf` once the effective production cost `kappa - (N-1)(p - sigma)`
    /// is no longer positive.
    pub fn supply(&self, p: f64) -> f64 {
        let n = self.n();
        if self.at_optimum(p) {
            (n - 1.0) * self.params.x_hat(self.params.beta())
        } else if p < self.p_star {
            0.0
        } else {
            let cost = self.params.kappa() - (n - 1.0) * (p - self.params.sigma());
            if cost <= 0.0 {
                f64::INFINITY
            } else {
                n * (n - 1.0) * self.params.x_hat(cost)
            }
        }
    }

    pub fn excess(&self, p: f64) -> f64 {
        self.demand(p) - self.supply(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketPoint {
    pub price: f64,
    pub demand: f64,
    pub supply: f64,
    pub excess: f64,
}

#[derive(Debug, Clone)]
pub struct MarketCurves {
    pub p_star: f64,
    pub points: Vec<MarketPoint>,
}

pub fn market_curves(params: &CpsParams, price_grid: &[f64]) -> Result<MarketCurves> {
    if let Some(p) = price_grid.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::InvalidParameter(format!("grid price {p} is not positive")));
    }
    let market = Market::new(params);
    let points = price_grid
        .iter()
        .map(|&price| {
            let demand = market.demand(price);
            let supply = market.supply(price);
            MarketPoint { price, demand, supply, excess: demand - supply }
        })
        .collect();
    Ok(MarketCurves { p_star: market.p_star(), points })
}

/// Settings of the tatonnement process `dp/dt = eta ED(p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceAdjustment {
    pub p0: f64,
    pub eta: f64,
    pub step: f64,
    pub max_iters: usize,
}

impl PriceAdjustment {
    /// Unit rate and a step that moves the price by about 1% of `p*` when
    /// the excess demand is of the order of the total efficient download.
    pub fn with_defaults(params: &CpsParams, p0: f64) -> Self {
        let scale = params.n_peers() as f64 * params.x_hat(params.beta());
        PriceAdjustment { p0, eta: 1.0, step: 1e-2 * optimal_price(params) / scale, max_iters: 100_000 }
    }
}

#[derive(Debug, Clone)]
pub struct PriceTrajectory {
    /// Accepted prices, starting with `p0`.
    pub prices: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl PriceTrajectory {
    pub fn final_price(&self) -> f64 {
        *self.prices.last().expect("trajectory starts at p0")
    }
}

/// Forward-Euler integration of the price process.
///
/// Excess demand jumps at `p*`, so a fixed step would chatter around it. A
/// step that would land on the other side of `p*` is rejected and retried
/// with half the step; the trajectory therefore approaches `p*` from the
/// side it started on.
///
/// Above `sigma + kappa / (N-1)` supply is unbounded and the excess demand
/// is `-inf`. As a guard, one step never moves the price by more than half
/// its current value (a bound that shrinks together with the step), so
/// unbounded supply halves the price instead of throwing it to `-inf`.
pub fn run_price_adjustment(params: &CpsParams, cfg: &PriceAdjustment) -> Result<PriceTrajectory> {
    for (name, v) in [("p0", cfg.p0), ("eta", cfg.eta), ("step", cfg.step)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    let ceiling = 10.0 * params.benefit().deriv_at_zero();
    if cfg.p0 > ceiling {
        return Err(Error::Divergence { iteration: 0, price: cfg.p0 });
    }
    let market = Market::new(params);
    let p_star = market.p_star();
    let mut p = cfg.p0;
    let mut h = cfg.step;
    let mut max_move = 0.5;
    let mut prices = vec![p];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        if (p - p_star).abs() < PRICE_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let ed = market.excess(p);
        if ed.is_nan() {
            return Err(Error::Divergence { iteration: iterations, price: p });
        }
        let next = p + (h * cfg.eta * ed).clamp(-max_move * p, max_move * p);
        if !(next.is_finite() && next > 0.0 && next <= ceiling) {
            return Err(Error::Divergence { iteration: iterations, price: next });
        }
        let crossed = (next - p_star).signum() != (p - p_star).signum() && !market.at_optimum(next);
        if crossed {
            h *= 0.5;
            max_move *= 0.5;
            continue;
        }
        p = next;
        prices.push(p);
    }
    if !converged && (p - p_star).abs() < PRICE_TOL {
        converged = true;
    }
    Ok(PriceTrajectory { prices, converged, iterations })
}

/// Settings of the quantity process `dx_i/dt = -dd_i/dt = eta_i (d_i - sum_{j != i} x_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantityAdjustment {
    pub eta: Vec<f64>,
    pub step: f64,
    pub max_iters: usize,
}

impl QuantityAdjustment {
    /// Unit rates for `n` peers and a step of `1e-2`.
    pub fn uniform(n: usize) -> Self {
        QuantityAdjustment { eta: vec![1.0; n], step: 1e-2, max_iters: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantityState {
    pub production: Vec<f64>,
    pub download: Vec<f64>,
}

impl QuantityState {
    pub fn total_production(&self) -> f64 {
        self.production.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct QuantityTrajectory {
    pub states: Vec<QuantityState>,
    pub converged: bool,
}

impl QuantityTrajectory {
    pub fn last(&self) -> &QuantityState {
        self.states.last().expect("trajectory holds the start state")
    }
}

/// Downloads that complete each peer's consumption to `x_hat(beta)`.
pub fn optimal_downloads(params: &CpsParams, x0: &[f64]) -> Vec<f64> {
    let target = params.x_hat(params.beta());
    x0.iter().map(|x| target - x).collect()
}

/// Forward-Euler integration of the quantity process at the optimal price.
/// A peer with no production that would have to cut further stays put.
pub fn run_quantity_adjustment(
    params: &CpsParams,
    x0: &[f64],
    d0: &[f64],
    cfg: &QuantityAdjustment,
) -> Result<QuantityTrajectory> {
    let n = params.n_peers();
    if x0.len() != n || d0.len() != n || cfg.eta.len() != n {
        return Err(Error::InvalidParameter(format!("expected {n} entries in x0, d0 and eta")));
    }
    if !(cfg.step.is_finite() && cfg.step > 0.0) || cfg.eta.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::InvalidParameter("step and rates must be positive".into()));
    }
    let target = params.x_hat(params.beta());
    for i in 0..n {
        if !(x0[i] >= 0.0 && d0[i] >= 0.0) {
            return Err(Error::InvalidParameter(format!("peer {i} starts with negative quantities")));
        }
        let total = x0[i] + d0[i];
        if (total - target).abs() > 1e-9 * target.max(1.0) {
            return Err(Error::NonOptimalStart { peer: i, total, expected: target });
        }
    }
    let mut x = x0.to_vec();
    let mut d = d0.to_vec();
    let mut states = vec![QuantityState { production: x.clone(), download: d.clone() }];
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let total: f64 = x.iter().sum();
        if (total - target).abs() < QUANTITY_TOL {
            converged = true;
            break;
        }
        let gaps: Vec<f64> = (0..n).map(|i| d[i] - (total - x[i])).collect();
        for i in 0..n {
            if x[i] <= 0.0 && gaps[i] < 0.0 {
                continue;
            }
            let next = (x[i] + cfg.step * cfg.eta[i] * gaps[i]).clamp(0.0, x[i] + d[i]);
            let moved = next - x[i];
            x[i] = next;
            d[i] -= moved;
        }
        states.push(QuantityState { production: x.clone(), download: d.clone() });
    }
    if !converged {
        converged = (x.iter().sum::<f64>() - target).abs() < QUANTITY_TOL;
    }
    Ok(QuantityTrajectory { states, converged })
}

/// Which side of `p*` a manipulating peer stalls the price process on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MisreportSide {
    /// Over-reporting supply to stop at `p' < p*`.
    Low,
    /// Over-reporting demand to stop at `p'' > p*`; only possible with two peers.
    High,
}

/// Payoff of a single peer that stalls the price process at
/// `stalled_price` by misreporting while the others report truthfully.
pub fn misreport_payoff(params: &CpsParams, stalled_price: f64, side: MisreportSide) -> Result<f64> {
    let p_star = optimal_price(params);
    let n = params.n_peers() as f64;
    let upload_adjusted = |p: f64| params.kappa() - (n - 1.0) * (p - params.sigma());
    match side {
        MisreportSide::Low => {
            if !(stalled_price > 0.0 && stalled_price < p_star) {
                return Err(Error::InvalidParameter(format!(
                    "a low stall needs 0 < p' < p* = {p_star}, got {stalled_price}"
                )));
            }
            let x = params.x_hat(stalled_price + params.delta());
            Ok(params.surplus(x, upload_adjusted(stalled_price)))
        }
        MisreportSide::High => {
            if params.n_peers() != 2 {
                return Err(Error::InvalidParameter(
                    "with more than two peers a single peer cannot clear the market above p*".into(),
                ));
            }
            if !(stalled_price > p_star) {
                return Err(Error::InvalidParameter(format!(
                    "a high stall needs p'' > p* = {p_star}, got {stalled_price}"
                )));
            }
            let cost = upload_adjusted(stalled_price);
            if cost <= 0.0 {
                return Err(Error::Unbounded(cost));
            }
            let x = params.x_hat(cost);
            Ok(params.surplus(x, stalled_price + params.delta()))
        }
    }
}

/// Equilibrium under the optimal intervention function.
#[derive(Debug, Clone)]
pub struct InterventionOutcome {
    pub report: SolutionReport,
    pub intervention: InterventionFn,
    pub ratings: Vec<f64>,
    pub levels: Vec<f64>,
    pub payoffs: Vec<f64>,
}

pub fn intervention_outcome(params: &CpsParams) -> Result<InterventionOutcome> {
    let n = params.n_peers();
    if n < 2 {
        return Err(Error::InvalidParameter("intervention needs at least two peers".into()));
    }
    let share = params.x_hat(params.beta()) / n as f64;
    let alloc = Allocation::full_sharing(vec![share; n]);
    let q = InterventionFn::optimal(params);
    let ratings: Vec<f64> = (0..n)
        .map(|i| InterventionFn::rating(alloc.upload(i), alloc.download(i)))
        .collect();
    let levels = ratings.iter().map(|&r| q.level(r)).collect();
    let payoffs = intervention_payoffs(params, &alloc, &q)?;
    let report = SolutionReport::from_allocation(params, alloc, Concept::Pe)?;
    Ok(InterventionOutcome { report, intervention: q, ratings, levels, payoffs })
}

/// Whether `alloc` is Pareto efficient and gives every peer at least its
/// autarky utility `f*(kappa)`.
pub fn check_participation_efficient(params: &CpsParams, alloc: &Allocation) -> bool {
    const TOL: f64 = 1e-6;
    let n = params.n_peers();
    let Ok(v) = utilities(params, alloc) else {
        return false;
    };
    let total: f64 = alloc.x.iter().sum();
    if (total - params.x_hat(params.beta())).abs() > TOL {
        return false;
    }
    for i in 0..n {
        if (alloc.y[i] - alloc.x[i]).abs() > TOL {
            return false;
        }
        if (0..n).any(|j| j != i && (alloc.z[j][i] - alloc.x[i]).abs() > TOL) {
            return false;
        }
    }
    let reservation = params.conj(params.kappa());
    v.iter().all(|&u| u >= reservation - 1e-12)
}
