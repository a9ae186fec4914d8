//! Coalitional games built from the CPS game.
//!
//! The game `v` assigns each coalition the maximum total utility its members
//! can create by sharing among themselves, `v(S) = |S| f*(beta~(|S|))`. The
//! game `v_fs` does the same when full sharing is enforced and peers split
//! into groups of the optimal size.

use std::fmt;

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::game::{full_sharing_production, full_sharing_value, CpsParams};

/// Largest N for which [`core_vertices`] enumerates permutations.
pub const MAX_VERTEX_PEERS: usize = 8;

/// g, G, MP and related tables for group sizes `1..=n_max`.
#[derive(Debug, Clone)]
pub struct ScaleTables {
    beta_tilde: Vec<f64>,
    gamma_tilde: Vec<f64>,
    g: Vec<f64>,
    total: Vec<f64>,
    mp: Vec<f64>,
    g_fs: Vec<f64>,
}

impl ScaleTables {
    pub fn n_max(&self) -> usize {
        self.g.len()
    }
    pub fn beta_tilde(&self, n: usize) -> f64 {
        self.beta_tilde[n - 1]
    }
    pub fn gamma_tilde(&self, n: usize) -> f64 {
        self.gamma_tilde[n - 1]
    }
    /// Maximum average utility of a sharing group of `n`.
    pub fn g(&self, n: usize) -> f64 {
        self.g[n - 1]
    }
    /// `G(n) = n g(n)`; `G(0) = 0`.
    pub fn big_g(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.total[n - 1]
        }
    }
    /// Marginal product of the n-th peer.
    pub fn mp(&self, n: usize) -> f64 {
        self.mp[n - 1]
    }
    /// Average utility under enforced full sharing in a group of `n`;
    /// `g_fs(0) = 0`.
    pub fn g_fs(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.g_fs[n - 1]
        }
    }
}

pub fn scale_tables(params: &CpsParams, n_max: usize) -> Result<ScaleTables> {
    if n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    let sizes = 1..=n_max;
    let beta_tilde: Vec<f64> = sizes.clone().map(|n| params.beta_tilde(n)).collect();
    let gamma_tilde = sizes.clone().map(|n| params.gamma_tilde(n)).collect();
    let g: Vec<f64> = beta_tilde.iter().map(|&b| params.conj(b)).collect();
    let total: Vec<f64> = g.iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).collect();
    let mp = (0..n_max)
        .map(|k| if k == 0 { total[0] } else { total[k] - total[k - 1] })
        .collect();
    let g_fs = sizes.map(|n| full_sharing_value(params, n)).collect();
    Ok(ScaleTables { beta_tilde, gamma_tilde, g, total, mp, g_fs })
}

/// A set of peers, as a bitmask over peer indices `0..64`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Coalition(pub u64);

impl Coalition {
    pub fn from_members(members: &[usize]) -> Self {
        Coalition(members.iter().fold(0, |m, &i| m | (1 << i)))
    }
    pub fn grand(n: usize) -> Self {
        Coalition(if n >= 64 { u64::MAX } else { (1 << n) - 1 })
    }
    pub fn size(self) -> usize {
        self.0.count_ones() as usize
    }
    pub fn contains(self, peer: usize) -> bool {
        self.0 & (1 << peer) != 0
    }
    pub fn with(self, peer: usize) -> Self {
        Coalition(self.0 | (1 << peer))
    }
    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&i| self.0 & (1 << i) != 0)
    }
    pub fn is_subset_of(self, other: Coalition) -> bool {
        self.0 & !other.0 == 0
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.members()).finish()
    }
}

/// A transferable-utility coalitional game on peers `0..n_players`.
pub trait CoalitionalGame {
    fn n_players(&self) -> usize;
    fn value(&self, coalition: Coalition) -> f64;
}

/// The game `v(S) = |S| f*(beta~(|S|))`.
#[derive(Debug, Clone)]
pub struct SharingGame {
    tables: ScaleTables,
}

impl SharingGame {
    pub fn new(params: &CpsParams) -> Self {
        SharingGame { tables: scale_tables(params, params.n_peers()).expect("n_peers >= 1") }
    }
    pub fn tables(&self) -> &ScaleTables {
        &self.tables
    }
}

impl CoalitionalGame for SharingGame {
    fn n_players(&self) -> usize {
        self.tables.n_max()
    }
    fn value(&self, coalition: Coalition) -> f64 {
        self.tables.big_g(coalition.size())
    }
}

/// The game with enforced full sharing where a coalition splits into groups
/// of the optimal size plus one residual group.
#[derive(Debug, Clone)]
pub struct FullSharingGame {
    total_n: usize,
    optimal_size: usize,
    tables: ScaleTables,
}

impl FullSharingGame {
    pub fn new(params: &CpsParams, total_n: usize) -> Result<Self> {
        let optimal_size = optimal_group_size(params)?.n_star;
        let tables = scale_tables(params, total_n.max(optimal_size))?;
        Ok(FullSharingGame { total_n, optimal_size, tables })
    }

    pub fn optimal_size(&self) -> usize {
        self.optimal_size
    }

    /// `v_fs` for a coalition of `size` peers.
    pub fn value_of_size(&self, size: usize) -> f64 {
        let groups = size / self.optimal_size;
        let residual = size % self.optimal_size;
        (groups * self.optimal_size) as f64 * self.tables.g_fs(self.optimal_size)
            + residual as f64 * self.tables.g_fs(residual)
    }
}

impl CoalitionalGame for FullSharingGame {
    fn n_players(&self) -> usize {
        self.total_n
    }
    fn value(&self, coalition: Coalition) -> f64 {
        self.value_of_size(coalition.size())
    }
}

/// Shapley value of `v`: every peer gets `f*(beta)`, attained by the
/// equal-split Pareto allocation.
pub fn shapley(params: &CpsParams) -> Vec<f64> {
    vec![params.conj(params.beta()); params.n_peers()]
}

/// Vertices of the core of `v`: all permutations of `(MP(1), ..., MP(N))`.
pub fn core_vertices(params: &CpsParams) -> Result<Vec<Vec<f64>>> {
    let n = params.n_peers();
    if n > MAX_VERTEX_PEERS {
        return Err(Error::TooManyPeers { n, max: MAX_VERTEX_PEERS });
    }
    let tables = scale_tables(params, n)?;
    let base: Vec<f64> = (1..=n).map(|k| tables.mp(k)).collect();
    // MP is strictly increasing, so distinct orders give distinct profiles
    Ok((0..n)
        .permutations(n)
        .map(|order| order.iter().map(|&k| base[k]).collect())
        .collect())
}

/// Right-hand side of the core inequality for coalitions of size `s`: the
/// most production a coalition of that size can carry.
pub fn core_production_cap(params: &CpsParams, s: usize) -> f64 {
    let xb = params.x_hat(params.beta());
    let head = params.benefit().eval(xb) - params.delta() * xb;
    s as f64 * (head - params.conj(params.beta_tilde(s))) / params.production_penalty()
}

/// Outcome of a core membership test.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreMembership {
    InCore,
    /// A coalition whose members would do better on their own.
    Blocked { coalition: Vec<usize> },
}

impl CoreMembership {
    pub fn is_in_core(&self) -> bool {
        matches!(self, CoreMembership::InCore)
    }
}

/// Whether a Pareto production profile `x` has the core property.
///
/// The cap depends on the coalition only through its size and the load is
/// largest for the top producers, so checking the `s` largest producers for
/// each `s` is enough.
pub fn is_in_core(params: &CpsParams, x: &[f64]) -> Result<CoreMembership> {
    let n = params.n_peers();
    if x.len() != n {
        return Err(Error::InvalidParameter(format!("expected {n} production levels, got {}", x.len())));
    }
    let total: f64 = x.iter().sum();
    let expected = params.x_hat(params.beta());
    if (total - expected).abs() > 1e-6 {
        return Err(Error::NotParetoTotal { total, expected });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
    let mut load = 0.0;
    for s in 1..=n {
        load += x[order[s - 1]];
        let cap = core_production_cap(params, s);
        if load > cap + 1e-9 * (1.0 + cap.abs()) {
            let mut coalition = order[..s].to_vec();
            coalition.sort_unstable();
            return Ok(CoreMembership::Blocked { coalition });
        }
    }
    Ok(CoreMembership::InCore)
}

/// Upper bound on a single peer's production in a participation-efficient
/// allocation.
pub fn participation_bound(params: &CpsParams) -> Result<f64> {
    if params.n_peers() < 2 {
        return Err(Error::InvalidParameter("participation bound needs at least two peers".into()));
    }
    Ok(core_production_cap(params, 1))
}

/// Maps a core utility profile back to the production levels that realize
/// it in a Pareto allocation.
pub fn production_for_utilities(params: &CpsParams, profile: &[f64]) -> Vec<f64> {
    let xb = params.x_hat(params.beta());
    let head = params.benefit().eval(xb) - params.delta() * xb;
    profile.iter().map(|v| (head - v) / params.production_penalty()).collect()
}

/// Optimal group size under enforced full sharing.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSize {
    pub n_star: usize,
    /// Largest size searched; `g_fs` is zero beyond it.
    pub search_limit: usize,
    pub value: f64,
    /// Other sizes attaining the maximum, if any.
    pub ties: Vec<usize>,
}

/// Sizes above this are not searched.
pub const MAX_GROUP_SEARCH: usize = 1_000_000;

pub fn optimal_group_size(params: &CpsParams) -> Result<GroupSize> {
    let span = (params.benefit().deriv_at_zero() - params.kappa()) / params.sigma() + 1.0;
    // absorb round-off when the ratio is an exact integer
    let limit = (span + 1e-9).floor() as usize;
    if limit > MAX_GROUP_SEARCH {
        return Err(Error::InvalidParameter(format!(
            "group size search range {limit} exceeds {MAX_GROUP_SEARCH}"
        )));
    }
    let limit = limit.max(1);
    let values: Vec<f64> = (1..=limit).map(|n| full_sharing_value(params, n)).collect();
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * best.abs().max(1e-300);
    let mut winners = (1..=limit).filter(|&n| (values[n - 1] - best).abs() <= tol);
    let n_star = winners.next().expect("search range is nonempty");
    Ok(GroupSize { n_star, search_limit: limit, value: best, ties: winners.collect() })
}

/// Core of the full-sharing group-formation game.
#[derive(Debug, Clone, PartialEq)]
pub enum VfsCore {
    /// The unique core element.
    Unique(Vec<f64>),
    /// Empty core, with the payoff that forming optimal groups plus one
    /// residual group yields and a coalition that blocks it.
    Empty {
        profile: Vec<f64>,
        blocking: Vec<usize>,
        blocking_value: f64,
        blocking_payoff: f64,
    },
}

pub fn vfs_core(params: &CpsParams, total_n: usize) -> Result<VfsCore> {
    let game = FullSharingGame::new(params, total_n)?;
    let size = game.optimal_size();
    if size >= total_n {
        return Err(Error::Hypothesis(format!(
            "optimal group size {size} must be smaller than the population {total_n}"
        )));
    }
    let top = game.tables.g_fs(size);
    if total_n.is_multiple_of(size) {
        return Ok(VfsCore::Unique(vec![top; total_n]));
    }
    // groups of the optimal size first, residual peers last
    let residual = total_n % size;
    let full = total_n - residual;
    let mut profile = vec![top; full];
    profile.extend(std::iter::repeat_n(game.tables.g_fs(residual), residual));
    // a residual peer replaces the best-paid member of one full group
    let outsider = full;
    let mut blocking: Vec<usize> = (1..size).collect();
    blocking.push(outsider);
    let blocking_payoff = blocking.iter().map(|&i| profile[i]).sum();
    Ok(VfsCore::Empty {
        blocking_value: game.value_of_size(size),
        profile,
        blocking,
        blocking_payoff,
    })
}

/// Total production in one optimal full-sharing group.
pub fn optimal_group_production(params: &CpsParams) -> Result<f64> {
    let size = optimal_group_size(params)?.n_star;
    Ok(full_sharing_production(params, size))
}

/// Brute-force tools over all coalitions or orders; exponential in N.
pub mod exhaustive {
    use super::*;

    /// Shapley value by averaging marginal contributions over all `N!`
    /// arrival orders.
    pub fn shapley_by_permutations<G: CoalitionalGame>(game: &G) -> Vec<f64> {
        let n = game.n_players();
        let mut totals = vec![0.0; n];
        let mut count = 0usize;
        for order in (0..n).permutations(n) {
            let mut coalition = Coalition::default();
            let mut before = game.value(coalition);
            for &i in &order {
                coalition = coalition.with(i);
                let after = game.value(coalition);
                totals[i] += after - before;
                before = after;
            }
            count += 1;
        }
        totals.into_iter().map(|t| t / count as f64).collect()
    }

    /// Convexity `v(S + i) - v(S) <= v(T + i) - v(T)` for every `S <= T`
    /// and `i` outside `T`. Returns the first violation found.
    pub fn convexity_violation<G: CoalitionalGame>(game: &G, tol: f64) -> Option<(Coalition, Coalition, usize)> {
        let n = game.n_players();
        let all = 1u64 << n;
        for t in 0..all {
            let t = Coalition(t);
            // iterate over submasks of t
            let mut s = t.0;
            loop {
                let sc = Coalition(s);
                for i in (0..n).filter(|&i| !t.contains(i)) {
                    let gain_s = game.value(sc.with(i)) - game.value(sc);
                    let gain_t = game.value(t.with(i)) - game.value(t);
                    if gain_s > gain_t + tol {
                        return Some((sc, t, i));
                    }
                }
                if s == 0 {
                    break;
                }
                s = (s - 1) & t.0;
            }
        }
        None
    }

    /// A coalition `S` with `sum_{i in S} profile_i < v(S) - tol`, if any.
    pub fn blocking_coalition<G: CoalitionalGame>(game: &G, profile: &[f64], tol: f64) -> Option<Coalition> {
        let n = game.n_players();
        (1..(1u64 << n)).map(Coalition).find(|&s| {
            let payoff: f64 = s.members().map(|i| profile[i]).sum();
            payoff < game.value(s) - tol
        })
    }

    /// Checks the core production cap for every nonempty coalition. Returns
    /// a violating coalition, if any.
    pub fn core_cap_violation(params: &CpsParams, x: &[f64], tol: f64) -> Option<Coalition> {
        let n = x.len();
        let caps: Vec<f64> = (0..=n).map(|s| if s == 0 { 0.0 } else { core_production_cap(params, s) }).collect();
        (1..(1u64 << n)).map(Coalition).find(|&s| {
            let load: f64 = s.members().map(|i| x[i]).sum();
            load > caps[s.size()] + tol
        })
    }
}
