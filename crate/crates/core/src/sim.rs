//! Round-based engine playing the three-stage CPS game repeatedly.
//!
//! Each round runs production (private), sharing (published to everyone)
//! and transfer (downloads served up to the published shares), then settles
//! the active scheme. Strategies see the game through a [`PeerView`], which
//! exposes the public share profiles and the peer's own records only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, Stage};
use crate::game::{utility, Allocation, CpsParams};
use crate::incentives::{check_participation_efficient, InterventionFn, LinearPrice};

/// Incentive scheme applied when a round is settled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    None,
    LinearPrice(LinearPrice),
    Intervention(InterventionFn),
}

impl Scheme {
    pub fn optimal_price(params: &CpsParams) -> Self {
        Scheme::LinearPrice(LinearPrice::optimal(params))
    }

    pub fn optimal_intervention(params: &CpsParams) -> Self {
        Scheme::Intervention(InterventionFn::optimal(params))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::LinearPrice(_) => "pricing",
            Scheme::Intervention(_) => "intervention",
        }
    }

    /// Transfer received by a peer with the given upload and download
    /// (negative for a charge), and the intervention level applied to it.
    pub fn settle(&self, upload: f64, download: f64) -> (f64, f64) {
        match self {
            Scheme::None => (0.0, 0.0),
            Scheme::LinearPrice(lp) => (lp.p * (upload - download), 0.0),
            Scheme::Intervention(q) => {
                let level = q.level(InterventionFn::rating(upload, download));
                (-level * download, level)
            }
        }
    }

    pub fn planner(&self, params: &CpsParams) -> DownloadPlanner {
        DownloadPlanner::new(params, self)
    }
}

/// Optimal stage-three download rule for a given scheme.
///
/// Under intervention the peer anticipates that everyone else downloads its
/// whole share, so downloads up to `(N-1) y_i` cost `delta` per unit and
/// further downloads `delta + p*`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownloadPlanner {
    cheap_target: f64,
    dear_target: Option<f64>,
    n_peers: usize,
}

impl DownloadPlanner {
    pub fn new(params: &CpsParams, scheme: &Scheme) -> Self {
        let delta = params.delta();
        let (cheap_target, dear_target) = match scheme {
            Scheme::None => (params.x_hat(delta), None),
            Scheme::LinearPrice(lp) => (params.x_hat(delta + lp.p), None),
            Scheme::Intervention(q) => (params.x_hat(delta), Some(params.x_hat(delta + q.p_star))),
        };
        DownloadPlanner { cheap_target, dear_target, n_peers: params.n_peers() }
    }

    /// Total download of a peer holding `production`, sharing `own_share`,
    /// when `available` units are shared by the others.
    pub fn total(&self, production: f64, own_share: f64, available: f64) -> f64 {
        let cheap = (self.cheap_target - production).max(0.0);
        let d = match self.dear_target {
            None => cheap,
            Some(dear) => {
                let cap = (self.n_peers - 1) as f64 * own_share;
                let dear = (dear - production).max(0.0);
                if cheap <= cap {
                    cheap
                } else if dear >= cap {
                    dear
                } else {
                    cap
                }
            }
        };
        d.min(available).max(0.0)
    }

    /// Download row, drawing from each source in proportion to its share.
    pub fn row(&self, peer: usize, production: f64, shares: &[f64]) -> Vec<f64> {
        let available = others_sum(shares, peer);
        let mut row = vec![0.0; shares.len()];
        if available <= 0.0 {
            return row;
        }
        let d = self.total(production, shares[peer], available);
        for (j, z) in row.iter_mut().enumerate() {
            if j != peer {
                *z = (d * shares[j] / available).min(shares[j]);
            }
        }
        row
    }
}

fn others_sum(v: &[f64], peer: usize) -> f64 {
    v.iter().enumerate().filter(|(j, _)| *j != peer).map(|(_, y)| y).sum()
}

/// What a peer privately knows about one of its past rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateRecord {
    pub production: f64,
    pub downloads: Vec<f64>,
    pub upload: f64,
    pub utility: f64,
    pub transfer: f64,
    pub intervention_level: f64,
    pub payoff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    /// Published share profile.
    pub shares: Vec<f64>,
    pub peers: Vec<PrivateRecord>,
    pub transfer_volume: f64,
    pub punishment_triggered: bool,
}

impl RoundRecord {
    pub fn payoffs(&self) -> Vec<f64> {
        self.peers.iter().map(|p| p.payoff).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct History {
    rounds: Vec<RoundRecord>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn view(&self, peer: usize, n_peers: usize) -> PeerView<'_> {
        PeerView { peer, n_peers, history: self }
    }

    fn flag_last(&mut self) {
        if let Some(r) = self.rounds.last_mut() {
            r.punishment_triggered = true;
        }
    }
}

/// The part of the history a single peer may observe.
#[derive(Debug, Clone, Copy)]
pub struct PeerView<'a> {
    peer: usize,
    n_peers: usize,
    history: &'a History,
}

impl<'a> PeerView<'a> {
    pub fn peer(&self) -> usize {
        self.peer
    }

    pub fn n_peers(&self) -> usize {
        self.n_peers
    }

    pub fn completed_rounds(&self) -> usize {
        self.history.len()
    }

    /// Published shares of round `idx` (0-based).
    pub fn shares(&self, idx: usize) -> &'a [f64] {
        &self.history.rounds[idx].shares
    }

    pub fn own(&self, idx: usize) -> &'a PrivateRecord {
        &self.history.rounds[idx].peers[self.peer]
    }

    pub fn punishment_flagged(&self, idx: usize) -> bool {
        self.history.rounds[idx].punishment_triggered
    }
}

/// A peer's behaviour in the three stages of a round.
pub trait PeerStrategy {
    fn produce(&mut self, view: &PeerView<'_>) -> f64;
    /// Must return a value in `[0, production]`.
    fn share(&mut self, view: &PeerView<'_>, production: f64) -> f64;
    /// Must return a row with a zero diagonal and `z_ij <= shares[j]`.
    fn download(&mut self, view: &PeerView<'_>, production: f64, shares: &[f64]) -> Vec<f64>;
}

fn infeasible(peer: usize, stage: Stage, detail: String) -> Error {
    Error::StrategyInfeasible { peer, stage, detail }
}

/// Plays one round and appends it to `history`.
pub fn play_round(
    params: &CpsParams,
    strategies: &mut [Box<dyn PeerStrategy>],
    scheme: &Scheme,
    history: &mut History,
) -> Result<RoundRecord> {
    let n = params.n_peers();
    if strategies.len() != n {
        return Err(Error::InvalidParameter(format!("expected {n} strategies, got {}", strategies.len())));
    }
    let mut x = Vec::with_capacity(n);
    for (i, s) in strategies.iter_mut().enumerate() {
        let xi = s.produce(&history.view(i, n));
        if !(xi.is_finite() && xi >= 0.0) {
            return Err(infeasible(i, Stage::Production, format!("production {xi}")));
        }
        x.push(xi);
    }
    let mut y = Vec::with_capacity(n);
    for (i, s) in strategies.iter_mut().enumerate() {
        let yi = s.share(&history.view(i, n), x[i]);
        if !(yi.is_finite() && yi >= 0.0 && yi <= x[i]) {
            return Err(infeasible(i, Stage::Sharing, format!("share {yi} with production {}", x[i])));
        }
        y.push(yi);
    }
    let mut z = Vec::with_capacity(n);
    for (i, s) in strategies.iter_mut().enumerate() {
        let row = s.download(&history.view(i, n), x[i], &y);
        if row.len() != n {
            return Err(infeasible(i, Stage::Transfer, format!("row of length {}", row.len())));
        }
        for (j, &zij) in row.iter().enumerate() {
            let ok = if i == j { zij == 0.0 } else { zij.is_finite() && zij >= 0.0 && zij <= y[j] };
            if !ok {
                return Err(infeasible(i, Stage::Transfer, format!("download {zij} from peer {j} sharing {}", y[j])));
            }
        }
        z.push(row);
    }
    let alloc = Allocation { x, y, z };
    let mut peers = Vec::with_capacity(n);
    for i in 0..n {
        let u = utility(params, &alloc, i)?;
        let upload = alloc.upload(i);
        let (transfer, level) = scheme.settle(upload, alloc.download(i));
        peers.push(PrivateRecord {
            production: alloc.x[i],
            downloads: alloc.z[i].clone(),
            upload,
            utility: u,
            transfer,
            intervention_level: level,
            payoff: u + transfer,
        });
    }
    let record = RoundRecord {
        round: history.len() + 1,
        transfer_volume: alloc.transfer_volume(),
        shares: alloc.y,
        peers,
        punishment_triggered: false,
    };
    history.rounds.push(record.clone());
    Ok(record)
}

/// Incremental average used for the limit-of-means criterion.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMean {
    count: usize,
    mean: f64,
}

impl RunningMean {
    pub fn push(&mut self, value: f64) {
        self.count += 1;
        self.mean += (value - self.mean) / self.count as f64;
    }

    pub fn value(&self) -> f64 {
        self.mean
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

#[derive(Debug, Clone)]
pub struct RunStats {
    pub rounds: usize,
    /// `payoffs[t][i]`: payoff of peer `i` in round `t + 1`.
    pub payoffs: Vec<Vec<f64>>,
    pub running_means: Vec<f64>,
    pub transfer_volumes: Vec<f64>,
    /// Production and share of every peer in the last round.
    pub final_plans: Vec<Plan>,
    /// Whether play ended at the predicted outcome (best-response runs) or
    /// stayed on the cooperative path (grim-trigger runs without deviant).
    pub converged: bool,
    /// First round from which play stayed at the predicted outcome.
    pub settled_round: Option<usize>,
    /// Round in which a share deviation became public.
    pub detection_round: Option<usize>,
    /// Payoff gain of the deviant's one-shot deviation.
    pub deviation_gain: Option<f64>,
}

#[derive(Default)]
struct Recorder {
    payoffs: Vec<Vec<f64>>,
    means: Vec<RunningMean>,
    volumes: Vec<f64>,
    last: Vec<Plan>,
}

impl Recorder {
    fn push(&mut self, record: &RoundRecord) {
        let pay = record.payoffs();
        if self.means.is_empty() {
            self.means = vec![RunningMean::default(); pay.len()];
        }
        for (m, v) in self.means.iter_mut().zip(&pay) {
            m.push(*v);
        }
        self.last = record
            .peers
            .iter()
            .zip(&record.shares)
            .map(|(p, &share)| Plan { production: p.production, share })
            .collect();
        self.payoffs.push(pay);
        self.volumes.push(record.transfer_volume);
    }

    fn finish(self) -> RunStats {
        RunStats {
            rounds: self.payoffs.len(),
            running_means: self.means.iter().map(RunningMean::value).collect(),
            payoffs: self.payoffs,
            transfer_volumes: self.volumes,
            final_plans: self.last,
            converged: false,
            settled_round: None,
            detection_round: None,
            deviation_gain: None,
        }
    }
}

/// Stage-one and stage-two decisions of a stationary peer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    pub production: f64,
    pub share: f64,
}

/// Produces and shares the same amounts every round and downloads optimally.
#[derive(Debug, Clone)]
pub struct Stationary {
    pub plan: Plan,
    planner: DownloadPlanner,
}

impl Stationary {
    pub fn new(plan: Plan, planner: DownloadPlanner) -> Self {
        Stationary { plan, planner }
    }
}

impl PeerStrategy for Stationary {
    fn produce(&mut self, _: &PeerView<'_>) -> f64 {
        self.plan.production
    }

    fn share(&mut self, _: &PeerView<'_>, production: f64) -> f64 {
        self.plan.share.min(production)
    }

    fn download(&mut self, view: &PeerView<'_>, production: f64, shares: &[f64]) -> Vec<f64> {
        self.planner.row(view.peer(), production, shares)
    }
}

/// The non-cooperative strategy: produce `x_hat(kappa)`, share nothing,
/// download whatever is worth downloading.
pub fn se_strategy(params: &CpsParams) -> Stationary {
    let plan = Plan { production: params.x_hat(params.kappa()), share: 0.0 };
    Stationary::new(plan, Scheme::None.planner(params))
}

fn shares_match(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()))
}

/// Plays the target allocation until some round publishes a share profile
/// different from the target's, then plays the non-cooperative strategy
/// forever.
#[derive(Debug, Clone)]
pub struct GrimTrigger {
    production: f64,
    share: f64,
    downloads: Vec<f64>,
    target_shares: Vec<f64>,
    punishment: Stationary,
    scanned: usize,
    triggered: bool,
}

impl GrimTrigger {
    pub fn new(params: &CpsParams, target: &Allocation, peer: usize) -> Self {
        GrimTrigger {
            production: target.x[peer],
            share: target.y[peer],
            downloads: target.z[peer].clone(),
            target_shares: target.y.clone(),
            punishment: se_strategy(params),
            scanned: 0,
            triggered: false,
        }
    }

    pub fn triggered(&self) -> bool {
        self.triggered
    }

    fn observe(&mut self, view: &PeerView<'_>) {
        for idx in self.scanned..view.completed_rounds() {
            if !shares_match(view.shares(idx), &self.target_shares) {
                self.triggered = true;
            }
        }
        self.scanned = view.completed_rounds();
    }
}

impl PeerStrategy for GrimTrigger {
    fn produce(&mut self, view: &PeerView<'_>) -> f64 {
        self.observe(view);
        if self.triggered {
            self.punishment.produce(view)
        } else {
            self.production
        }
    }

    fn share(&mut self, view: &PeerView<'_>, production: f64) -> f64 {
        if self.triggered {
            self.punishment.share(view, production)
        } else {
            self.share.min(production)
        }
    }

    fn download(&mut self, view: &PeerView<'_>, production: f64, shares: &[f64]) -> Vec<f64> {
        if self.triggered {
            return self.punishment.download(view, production, shares);
        }
        self.downloads.iter().zip(shares).map(|(z, y)| z.min(*y)).collect()
    }
}

/// Follows `base` except in one round, where it plays `plan` and downloads
/// optimally.
#[derive(Debug, Clone)]
pub struct OneShotDeviation {
    base: GrimTrigger,
    round: usize,
    plan: Plan,
    planner: DownloadPlanner,
}

impl OneShotDeviation {
    /// `round` is 1-based.
    pub fn new(base: GrimTrigger, round: usize, plan: Plan, planner: DownloadPlanner) -> Self {
        OneShotDeviation { base, round, plan, planner }
    }

    fn active(&self, view: &PeerView<'_>) -> bool {
        view.completed_rounds() + 1 == self.round
    }
}

impl PeerStrategy for OneShotDeviation {
    fn produce(&mut self, view: &PeerView<'_>) -> f64 {
        let base = self.base.produce(view);
        if self.active(view) {
            self.plan.production
        } else {
            base
        }
    }

    fn share(&mut self, view: &PeerView<'_>, production: f64) -> f64 {
        if self.active(view) {
            self.plan.share.min(production)
        } else {
            self.base.share(view, production)
        }
    }

    fn download(&mut self, view: &PeerView<'_>, production: f64, shares: &[f64]) -> Vec<f64> {
        if self.active(view) {
            self.planner.row(view.peer(), production, shares)
        } else {
            self.base.download(view, production, shares)
        }
    }
}

const REFINE_ROUNDS: usize = 40;
const REFINE_HALF: i32 = 5;
const TIE_TOL: f64 = 1e-9;

/// Maximizes `eval(x, y)` over `0 <= y <= x <= x_max`: a uniform grid with
/// `points` values per dimension, then repeated zooming around the best
/// point. With an `anchor`, the result is then moved from the maximizer
/// towards the anchor as far as the value stays within a relative `TIE_TOL`
/// of the maximum, so a peer only moves as far as it has to.
fn grid_maximize(
    x_max: f64,
    points: usize,
    anchor: Option<Plan>,
    mut eval: impl FnMut(f64, f64) -> f64,
) -> (Plan, f64) {
    let step = x_max / (points.max(2) - 1) as f64;
    let mut best = Plan { production: 0.0, share: 0.0 };
    let mut best_val = eval(0.0, 0.0);
    let mut consider = |x: f64, y: f64, best: &mut Plan, best_val: &mut f64| {
        let v = eval(x, y);
        if v > *best_val {
            *best_val = v;
            *best = Plan { production: x, share: y };
        }
    };
    for a in 0..points {
        let x = a as f64 * step;
        for b in 0..=a {
            consider(x, b as f64 * step, &mut best, &mut best_val);
        }
    }
    let mut half = step;
    for _ in 0..REFINE_ROUNDS {
        let centre = best;
        let h = half / REFINE_HALF as f64;
        for a in -REFINE_HALF..=REFINE_HALF {
            let x = (centre.production + a as f64 * h).clamp(0.0, x_max);
            for b in -REFINE_HALF..=REFINE_HALF {
                let y = (centre.share + b as f64 * h).clamp(0.0, x);
                consider(x, y, &mut best, &mut best_val);
            }
        }
        half *= 0.4;
    }
    let Some(anchor) = anchor else {
        return (best, best_val);
    };
    let floor = best_val - TIE_TOL * (1.0 + best_val.abs());
    let at = |t: f64| Plan {
        production: best.production + t * (anchor.production - best.production),
        share: best.share + t * (anchor.share - best.share),
    };
    let mut probe = |t: f64| {
        let p = at(t);
        let v = eval(p.production, p.share);
        (v >= floor).then_some(v)
    };
    if let Some(v) = probe(1.0) {
        return (anchor, v);
    }
    let (mut lo, mut hi, mut lo_val) = (0.0, 1.0, best_val);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match probe(mid) {
            Some(v) => {
                lo = mid;
                lo_val = v;
            }
            None => hi = mid,
        }
    }
    (at(lo), lo_val)
}

/// Payoff of `peer` when everybody plays its plan and downloads with
/// `planner`. Matches what [`play_round`] reports for [`Stationary`] peers.
pub fn stationary_payoff(params: &CpsParams, scheme: &Scheme, planner: &DownloadPlanner, plans: &[Plan], peer: usize) -> f64 {
    let shares: Vec<f64> = plans.iter().map(|p| p.share.min(p.production)).collect();
    let mut upload = 0.0;
    let mut download = 0.0;
    for (j, plan) in plans.iter().enumerate() {
        let available = others_sum(&shares, j);
        if available <= 0.0 {
            continue;
        }
        let d = planner.total(plan.production, shares[j], available);
        if j == peer {
            download = d;
        } else {
            upload += (d * shares[peer] / available).min(shares[peer]);
        }
    }
    let x = plans[peer].production;
    let u = params.benefit().eval(x + download) - params.kappa() * x - params.delta() * download - params.sigma() * upload;
    u + scheme.settle(upload, download).0
}

/// Settings of [`best_response_dynamics`].
#[derive(Debug, Clone, PartialEq)]
pub struct BrdConfig {
    pub rounds: usize,
    /// Grid values per dimension, spanning `[0, 2 x_hat(delta)]`.
    pub grid_points: usize,
    /// Convergence tolerance as a fraction of `x_hat(beta)`.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for BrdConfig {
    fn default() -> Self {
        BrdConfig { rounds: 60, grid_points: 200, tolerance: 1e-2, seed: 0 }
    }
}

/// Whether `plans` sits at the outcome the scheme is designed to produce:
/// autarky without a scheme, the efficient total with full sharing under
/// pricing, and the symmetric efficient split under intervention.
pub fn at_predicted_outcome(params: &CpsParams, scheme: &Scheme, plans: &[Plan], tolerance: f64) -> bool {
    let xb = params.x_hat(params.beta());
    let tol = tolerance * xb;
    let full_sharing = plans.iter().all(|p| p.share >= p.production - tol);
    match scheme {
        Scheme::None => {
            let xk = params.x_hat(params.kappa());
            plans.iter().all(|p| p.share <= tol && (p.production - xk).abs() <= tol)
        }
        Scheme::LinearPrice(_) => {
            let total: f64 = plans.iter().map(|p| p.production).sum();
            full_sharing && (total - xb).abs() <= tol
        }
        Scheme::Intervention(_) => {
            let each = xb / plans.len() as f64;
            full_sharing && plans.iter().all(|p| (p.production - each).abs() <= tol)
        }
    }
}

/// Each round one uniformly drawn peer switches to a best response against
/// the others' current plans (computed by grid search over production and
/// share, with optimal downloads), then the round is played.
///
/// A peer keeps its plan unless the best response improves its payoff by
/// more than a relative `1e-9`; among equally good responses it picks the
/// one closest to its current plan.
pub fn best_response_dynamics(params: &CpsParams, scheme: Scheme, init: &[Plan], cfg: &BrdConfig) -> Result<RunStats> {
    let n = params.n_peers();
    if cfg.rounds == 0 {
        return Err(Error::InvalidParameter("best-response dynamics needs at least one round".into()));
    }
    if init.len() != n {
        return Err(Error::InvalidParameter(format!("expected {n} initial plans, got {}", init.len())));
    }
    if init.iter().any(|p| !(p.production >= 0.0 && p.share >= 0.0 && p.share <= p.production)) {
        return Err(Error::InvalidParameter("initial plans must satisfy 0 <= share <= production".into()));
    }
    let planner = scheme.planner(params);
    let x_max = 2.0 * params.x_hat(params.delta());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut plans = init.to_vec();
    let mut history = History::new();
    let mut rec = Recorder::default();
    let mut settled = None;
    for round in 1..=cfg.rounds {
        let k = rng.gen_range(0..n);
        let current = stationary_payoff(params, &scheme, &planner, &plans, k);
        let mut trial = plans.clone();
        let (best, value) = grid_maximize(x_max, cfg.grid_points, Some(plans[k]), |x, y| {
            trial[k] = Plan { production: x, share: y };
            stationary_payoff(params, &scheme, &planner, &trial, k)
        });
        if value > current + TIE_TOL * (1.0 + current.abs()) {
            plans[k] = best;
        }
        let mut strategies: Vec<Box<dyn PeerStrategy>> = plans
            .iter()
            .map(|&p| Box::new(Stationary::new(p, planner.clone())) as Box<dyn PeerStrategy>)
            .collect();
        rec.push(&play_round(params, &mut strategies, &scheme, &mut history)?);
        if at_predicted_outcome(params, &scheme, &plans, cfg.tolerance) {
            settled.get_or_insert(round);
        } else {
            settled = None;
        }
    }
    let mut stats = rec.finish();
    stats.converged = settled.is_some();
    stats.settled_round = settled;
    Ok(stats)
}

/// Best single-round deviation of `peer` from `target` while everybody
/// else still cooperates, found by grid search. Returns the plan and its
/// payoff.
pub fn best_one_shot_deviation(params: &CpsParams, target: &Allocation, peer: usize, grid_points: usize) -> (Plan, f64) {
    let planner = Scheme::None.planner(params);
    let available = others_sum(&target.y, peer);
    let f = params.benefit();
    let x_max = 2.0 * params.x_hat(params.delta());
    grid_maximize(x_max, grid_points, None, |x, y| {
        let upload: f64 = (0..target.n_peers()).filter(|&j| j != peer).map(|j| target.z[j][peer].min(y)).sum();
        let d = planner.total(x, y, available);
        f.eval(x + d) - params.kappa() * x - params.delta() * d - params.sigma() * upload
    })
}

/// Repeated play in which every peer follows [`GrimTrigger`] towards
/// `target`. If `deviant` is set, that peer plays its best one-shot
/// deviation in `deviation_round` (1-based) and the trigger strategy
/// afterwards.
pub fn grim_trigger_run(
    params: &CpsParams,
    target: &Allocation,
    deviant: Option<usize>,
    deviation_round: usize,
    rounds: usize,
) -> Result<RunStats> {
    let n = params.n_peers();
    if target.n_peers() != n {
        return Err(Error::InvalidParameter(format!("target has {} peers, expected {n}", target.n_peers())));
    }
    if !check_participation_efficient(params, target) {
        return Err(Error::Hypothesis(
            "target must be Pareto efficient and give every peer its autarky utility".into(),
        ));
    }
    if rounds == 0 || deviation_round == 0 {
        return Err(Error::InvalidParameter("rounds are numbered from 1".into()));
    }
    if deviant.is_some_and(|d| d >= n) {
        return Err(Error::InvalidParameter(format!("deviant must be below {n}")));
    }
    let mut gain = None;
    let mut strategies: Vec<Box<dyn PeerStrategy>> = Vec::with_capacity(n);
    for i in 0..n {
        let base = GrimTrigger::new(params, target, i);
        if deviant == Some(i) {
            let (plan, value) = best_one_shot_deviation(params, target, i, 200);
            gain = Some(value - utility(params, target, i)?);
            strategies.push(Box::new(OneShotDeviation::new(base, deviation_round, plan, Scheme::None.planner(params))));
        } else {
            strategies.push(Box::new(base));
        }
    }
    let mut history = History::new();
    let mut rec = Recorder::default();
    let mut detection = None;
    for round in 1..=rounds {
        let record = play_round(params, &mut strategies, &Scheme::None, &mut history)?;
        if detection.is_none() && !shares_match(&record.shares, &target.y) {
            detection = Some(round);
            history.flag_last();
        }
        rec.push(&record);
    }
    let mut stats = rec.finish();
    stats.converged = detection.is_none();
    stats.detection_round = detection;
    stats.deviation_gain = gain;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benefit::log_benefit;
    use crate::game::{equal_split, solve_pareto, utilities};
    use crate::incentives::optimal_price;
    use rand::Rng;

    fn baseline(n: usize) -> CpsParams {
        CpsParams::new(n, log_benefit(), 0.3, 0.0025, 0.01).unwrap()
    }

    fn boxed(s: Vec<Stationary>) -> Vec<Box<dyn PeerStrategy>> {
        s.into_iter().map(|s| Box::new(s) as Box<dyn PeerStrategy>).collect()
    }

    fn symmetric_pe(params: &CpsParams, scheme: &Scheme) -> Vec<Box<dyn PeerStrategy>> {
        let each = params.x_hat(params.beta()) / params.n_peers() as f64;
        let plan = Plan { production: each, share: each };
        boxed(vec![Stationary::new(plan, scheme.planner(params)); params.n_peers()])
    }

    #[test]
    fn running_mean_of_constant_is_exact() {
        let mut m = RunningMean::default();
        for _ in 0..10_000 {
            m.push(0.503972804325936);
        }
        assert_eq!(m.value(), 0.503972804325936);
        let mut m = RunningMean::default();
        for v in [1.0, 2.0, 6.0] {
            m.push(v);
        }
        assert!((m.value() - 3.0).abs() < 1e-15);
        assert_eq!(m.count(), 3);
    }

    #[test]
    fn se_strategies_reach_autarky() {
        let p = baseline(4);
        let mut s = boxed(vec![se_strategy(&p); 4]);
        let mut h = History::new();
        let r = play_round(&p, &mut s, &Scheme::None, &mut h).unwrap();
        let fk = p.conj(p.kappa());
        assert!(r.payoffs().iter().all(|v| (v - fk).abs() < 1e-12));
        assert_eq!(r.transfer_volume, 0.0);
        assert_eq!(r.round, 1);
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn pe_under_optimal_price_is_balanced() {
        for n in [2, 3, 7] {
            let p = baseline(n);
            let scheme = Scheme::optimal_price(&p);
            let mut s = symmetric_pe(&p, &scheme);
            let r = play_round(&p, &mut s, &scheme, &mut History::new()).unwrap();
            let fb = p.conj(p.beta());
            for rec in &r.peers {
                assert!(rec.transfer.abs() < 1e-12);
                assert!((rec.payoff - fb).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pe_under_intervention_has_no_surcharge() {
        let p = baseline(3);
        let scheme = Scheme::optimal_intervention(&p);
        let mut s = symmetric_pe(&p, &scheme);
        let r = play_round(&p, &mut s, &scheme, &mut History::new()).unwrap();
        for rec in &r.peers {
            assert!(rec.intervention_level.abs() < 1e-12);
            assert!((rec.payoff - r.peers[0].payoff).abs() < 1e-12);
            assert!((rec.payoff - p.conj(p.beta())).abs() < 1e-9);
        }
    }

    struct Bad(Stage);

    impl PeerStrategy for Bad {
        fn produce(&mut self, _: &PeerView<'_>) -> f64 {
            if self.0 == Stage::Production {
                -1.0
            } else {
                1.0
            }
        }
        fn share(&mut self, _: &PeerView<'_>, x: f64) -> f64 {
            if self.0 == Stage::Sharing {
                x + 0.5
            } else {
                x
            }
        }
        fn download(&mut self, view: &PeerView<'_>, _: f64, shares: &[f64]) -> Vec<f64> {
            let mut row = vec![0.0; shares.len()];
            if self.0 == Stage::Transfer {
                row[(view.peer() + 1) % shares.len()] = 10.0;
            }
            row
        }
    }

    #[test]
    fn infeasible_output_names_peer_and_stage() {
        let p = baseline(3);
        for stage in [Stage::Production, Stage::Sharing, Stage::Transfer] {
            let mut s: Vec<Box<dyn PeerStrategy>> =
                vec![Box::new(se_strategy(&p)), Box::new(se_strategy(&p)), Box::new(Bad(stage))];
            let mut h = History::new();
            match play_round(&p, &mut s, &Scheme::None, &mut h) {
                Err(Error::StrategyInfeasible { peer, stage: st, .. }) => {
                    assert_eq!(peer, 2);
                    assert_eq!(st, stage);
                }
                other => panic!("expected infeasible, got {other:?}"),
            }
            assert!(h.is_empty());
        }
        let mut two = boxed(vec![se_strategy(&p); 2]);
        assert!(play_round(&p, &mut two, &Scheme::None, &mut History::new()).is_err());
    }

    /// Records everything it can observe and turns it into its outputs.
    struct Probe {
        seen: Vec<f64>,
    }

    impl Probe {
        fn digest(&mut self, view: &PeerView<'_>) -> f64 {
            let mut acc = 0.0;
            for r in 0..view.completed_rounds() {
                for (k, y) in view.shares(r).iter().enumerate() {
                    acc += (k + 1) as f64 * y;
                }
                let own = view.own(r);
                acc += own.production + own.upload + own.payoff + own.downloads.iter().sum::<f64>();
                acc += view.punishment_flagged(r) as u8 as f64;
            }
            self.seen.push(acc);
            acc.abs().fract()
        }
    }

    impl PeerStrategy for Probe {
        fn produce(&mut self, view: &PeerView<'_>) -> f64 {
            1.0 + self.digest(view)
        }
        fn share(&mut self, view: &PeerView<'_>, x: f64) -> f64 {
            x * self.digest(view)
        }
        fn download(&mut self, view: &PeerView<'_>, _: f64, shares: &[f64]) -> Vec<f64> {
            let d = self.digest(view);
            let me = view.peer();
            shares.iter().enumerate().map(|(j, y)| if j == me { 0.0 } else { y * d }).collect()
        }
    }

    #[test]
    fn strategies_cannot_see_private_production() {
        let p = baseline(4);
        let planner = Scheme::None.planner(&p);
        let others = [3.0, 5.0, 9.0];
        let share = 1.5;
        let run = |perm: [usize; 3]| {
            let mut s: Vec<Box<dyn PeerStrategy>> = vec![Box::new(Probe { seen: vec![] })];
            for &k in &perm {
                s.push(Box::new(Stationary::new(Plan { production: others[k], share }, planner.clone())));
            }
            let mut h = History::new();
            for _ in 0..5 {
                play_round(&p, &mut s, &Scheme::None, &mut h).unwrap();
            }
            h.rounds().iter().map(|r| (r.shares[0], r.peers[0].production, r.peers[0].downloads.clone())).collect::<Vec<_>>()
        };
        let base = run([0, 1, 2]);
        for perm in [[2, 1, 0], [1, 2, 0], [0, 2, 1]] {
            assert_eq!(run(perm), base);
        }
    }

    fn scheme_download_cost(p: &CpsParams, scheme: &Scheme, share: f64, d: f64) -> f64 {
        match scheme {
            Scheme::None => p.delta() * d,
            Scheme::LinearPrice(lp) => (p.delta() + lp.p) * d,
            Scheme::Intervention(q) => {
                let anticipated = (p.n_peers() - 1) as f64 * share;
                p.delta() * d + q.level(InterventionFn::rating(anticipated, d)) * d
            }
        }
    }

    #[test]
    fn planner_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = baseline(3);
        let f = p.benefit().clone();
        for scheme in [Scheme::None, Scheme::optimal_price(&p), Scheme::optimal_intervention(&p)] {
            let planner = scheme.planner(&p);
            for _ in 0..50 {
                let x = rng.gen_range(0.0..12.0);
                let share = rng.gen_range(0.0..=x);
                let shares = [share, rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0)];
                let available = shares[1] + shares[2];
                let objective = |d: f64| f.eval(x + d) - scheme_download_cost(&p, &scheme, share, d);
                let steps = 20_000;
                let (mut gd, mut gv) = (0.0, objective(0.0));
                for k in 1..=steps {
                    let d = available * k as f64 / steps as f64;
                    let v = objective(d);
                    if v > gv {
                        gd = d;
                        gv = v;
                    }
                }
                let row = planner.row(0, x, &shares);
                let d: f64 = row.iter().sum();
                assert!(objective(d) >= gv - 1e-12, "{scheme:?} x={x} d={d} grid={gd}");
                assert!((d - gd).abs() <= available / steps as f64 + 1e-9);
                if d > 0.0 {
                    assert!((row[1] / d - shares[1] / available).abs() < 1e-12);
                }
            }
        }
    }

    /// Random but feasible play, used to check the accounting.
    struct Scripted {
        x: f64,
        frac: f64,
        pulls: Vec<f64>,
    }

    impl PeerStrategy for Scripted {
        fn produce(&mut self, _: &PeerView<'_>) -> f64 {
            self.x
        }
        fn share(&mut self, _: &PeerView<'_>, x: f64) -> f64 {
            x * self.frac
        }
        fn download(&mut self, view: &PeerView<'_>, _: f64, shares: &[f64]) -> Vec<f64> {
            let me = view.peer();
            shares.iter().zip(&self.pulls).enumerate().map(|(j, (y, f))| if j == me { 0.0 } else { y * f }).collect()
        }
    }

    #[test]
    fn payoffs_are_utility_plus_transfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.gen_range(1..6);
            let p = baseline(n);
            let scheme = match rng.gen_range(0..3) {
                0 => Scheme::None,
                1 => Scheme::LinearPrice(LinearPrice::new(rng.gen_range(0.001..0.5)).unwrap()),
                _ => Scheme::optimal_intervention(&p),
            };
            let mut s: Vec<Box<dyn PeerStrategy>> = (0..n)
                .map(|_| {
                    Box::new(Scripted {
                        x: rng.gen_range(0.0..10.0),
                        frac: rng.gen_range(0.0..=1.0),
                        pulls: (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect(),
                    }) as Box<dyn PeerStrategy>
                })
                .collect();
            let r = play_round(&p, &mut s, &scheme, &mut History::new()).unwrap();
            let alloc = Allocation {
                x: r.peers.iter().map(|q| q.production).collect(),
                y: r.shares.clone(),
                z: r.peers.iter().map(|q| q.downloads.clone()).collect(),
            };
            for i in 0..n {
                let v = utility(&p, &alloc, i).unwrap();
                let t = scheme.settle(alloc.upload(i), alloc.download(i)).0;
                assert_eq!(r.peers[i].payoff.to_bits(), (v + t).to_bits());
            }
            if let Scheme::LinearPrice(_) = scheme {
                let total: f64 = r.peers.iter().map(|q| q.transfer).sum();
                assert!(total.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stationary_payoff_agrees_with_engine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..5);
            let p = baseline(n);
            let scheme = [Scheme::None, Scheme::optimal_price(&p), Scheme::optimal_intervention(&p)][rng.gen_range(0..3)];
            let planner = scheme.planner(&p);
            let plans: Vec<Plan> = (0..n)
                .map(|_| {
                    let x = rng.gen_range(0.0..10.0);
                    Plan { production: x, share: rng.gen_range(0.0..=x) }
                })
                .collect();
            let mut s = boxed(plans.iter().map(|&pl| Stationary::new(pl, planner.clone())).collect());
            let r = play_round(&p, &mut s, &scheme, &mut History::new()).unwrap();
            for i in 0..n {
                let fast = stationary_payoff(&p, &scheme, &planner, &plans, i);
                assert!((fast - r.peers[i].payoff).abs() < 1e-9);
            }
        }
    }

    fn random_plans(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, full: bool) -> Vec<Plan> {
        (0..n)
            .map(|_| {
                let x = rng.gen_range(lo..hi);
                Plan { production: x, share: if full { x } else { rng.gen_range(0.0..=x) } }
            })
            .collect()
    }

    #[test]
    fn brd_without_scheme_reaches_autarky() {
        let p = baseline(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xb = p.x_hat(p.beta());
        let init = random_plans(&mut rng, 2, 0.0, 2.0 * xb, false);
        let stats = best_response_dynamics(&p, Scheme::None, &init, &BrdConfig { rounds: 20, ..Default::default() }).unwrap();
        let xk = p.x_hat(p.kappa());
        assert!(stats.converged, "{:?} {xk}", stats.final_plans);
        for plan in &stats.final_plans {
            assert!((plan.production - xk).abs() < 1e-3 && plan.share < 1e-3);
        }
    }

    #[test]
    fn brd_under_pricing_reaches_efficient_total() {
        let p = baseline(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xb = p.x_hat(p.beta());
        let init = random_plans(&mut rng, 2, 0.0, 2.0 * xb, false);
        let scheme = Scheme::optimal_price(&p);
        let stats = best_response_dynamics(&p, scheme, &init, &BrdConfig { rounds: 20, ..Default::default() }).unwrap();
        assert!(stats.converged, "{:?}", stats.final_plans);
        let total: f64 = stats.final_plans.iter().map(|q| q.production).sum();
        assert!((total - xb).abs() < 0.02 * xb);
        assert!(optimal_price(&p) > 0.0);
    }

    #[test]
    fn brd_under_intervention_returns_to_symmetric_split() {
        // Symmetric profiles below the efficient total are equilibria as
        // well, so play starts near the efficient split.
        let p = baseline(3);
        let each = p.x_hat(p.beta()) / 3.0;
        let scheme = Scheme::optimal_intervention(&p);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = random_plans(&mut rng, 3, 0.98 * each, 1.02 * each, true);
            let cfg = BrdConfig { rounds: 30, seed, ..Default::default() };
            let stats = best_response_dynamics(&p, scheme, &init, &cfg).unwrap();
            assert!(stats.converged, "{:?}", stats.final_plans);
        }
    }

    #[test]
    fn efficient_split_is_a_fixed_point_under_intervention() {
        for n in [2, 3] {
            let p = baseline(n);
            let each = p.x_hat(p.beta()) / n as f64;
            let init = vec![Plan { production: each, share: each }; n];
            let cfg = BrdConfig { rounds: 10, ..Default::default() };
            let stats = best_response_dynamics(&p, Scheme::optimal_intervention(&p), &init, &cfg).unwrap();
            assert_eq!(stats.final_plans, init);
            assert_eq!(stats.settled_round, Some(1));
        }
    }

    #[test]
    fn brd_rejects_bad_input() {
        let p = baseline(2);
        let plan = Plan { production: 1.0, share: 1.0 };
        let zero = BrdConfig { rounds: 0, ..Default::default() };
        assert!(best_response_dynamics(&p, Scheme::None, &[plan; 2], &zero).is_err());
        assert!(best_response_dynamics(&p, Scheme::None, &[plan; 3], &BrdConfig::default()).is_err());
        let bad = Plan { production: 1.0, share: 2.0 };
        assert!(best_response_dynamics(&p, Scheme::None, &[plan, bad], &BrdConfig::default()).is_err());
    }

    #[test]
    fn grim_trigger_without_deviation_replays_target() {
        let p = baseline(3);
        let target = solve_pareto(&p, &equal_split(3)).unwrap().allocation;
        let v = utilities(&p, &target).unwrap();
        let stats = grim_trigger_run(&p, &target, None, 1, 500).unwrap();
        assert!(stats.converged);
        assert_eq!(stats.detection_round, None);
        for row in &stats.payoffs {
            for (a, b) in row.iter().zip(&v) {
                assert_eq!(a, b);
            }
        }
        for (m, b) in stats.running_means.iter().zip(&v) {
            assert!((m - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grim_trigger_punishes_deviation() {
        let p = baseline(2);
        let target = solve_pareto(&p, &equal_split(2)).unwrap().allocation;
        let v0 = utility(&p, &target, 0).unwrap();
        let horizon = 2000;
        let stats = grim_trigger_run(&p, &target, Some(0), 10, horizon).unwrap();
        assert_eq!(stats.detection_round, Some(10));
        let gain = stats.deviation_gain.unwrap();
        assert!(gain > 0.0);
        let fk = p.conj(p.kappa());
        // nine cooperative rounds, one deviation, autarky afterwards
        let oracle = (9.0 * v0 + (v0 + gain) + (horizon - 10) as f64 * fk) / horizon as f64;
        assert!((stats.running_means[0] - oracle).abs() < 1e-9);
        assert!(stats.running_means[0] < v0);
        assert!((stats.payoffs[9][0] - (v0 + gain)).abs() < 1e-9);
        assert!(stats.payoffs[10..].iter().all(|r| (r[0] - fk).abs() < 1e-12 && (r[1] - fk).abs() < 1e-12));
    }

    #[test]
    fn grim_trigger_rejects_inefficient_target() {
        let p = baseline(2);
        let se = Allocation::full_sharing(vec![1.0, 1.0]);
        assert!(matches!(grim_trigger_run(&p, &se, None, 1, 10), Err(Error::Hypothesis(_))));
    }
}
