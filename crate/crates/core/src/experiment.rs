//! Experiment runner: configuration, the sweep over the number of peers
//! that produces the figure data series, and text reports for single runs.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::benefit::{distinct_files_benefit, log_benefit, BenefitSpec, DistinctFilesParams};
use crate::coalitional::{
    core_vertices, optimal_group_size, participation_bound, scale_tables, shapley, vfs_core, VfsCore,
};
use crate::error::{Error, Result};
use crate::game::{
    equal_split, full_sharing_production, inefficiency, solve_full_sharing, solve_noncooperative, solve_pareto,
    CpsParams,
};
use crate::incentives::{
    check_participation_efficient, intervention_outcome, optimal_downloads, optimal_price, run_price_adjustment,
    run_quantity_adjustment, PriceAdjustment, QuantityAdjustment,
};
use crate::sim::{best_response_dynamics, grim_trigger_run, BrdConfig, Plan, Scheme};

pub const CSV_HEADER: &str = "n,series,value";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenefitChoice {
    Log,
    DistinctFiles(DistinctFilesParams),
}

impl BenefitChoice {
    pub fn build(&self) -> Result<BenefitSpec> {
        match self {
            BenefitChoice::Log => Ok(log_benefit()),
            BenefitChoice::DistinctFiles(p) => distinct_files_benefit(*p),
        }
    }
}

/// Outcomes and schemes an experiment evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    None,
    Pricing,
    Intervention,
    Repeated,
    FullSharing,
    Cooperative,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 6] = [
        SchemeKind::None,
        SchemeKind::Pricing,
        SchemeKind::Intervention,
        SchemeKind::Repeated,
        SchemeKind::FullSharing,
        SchemeKind::Cooperative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::None => "none",
            SchemeKind::Pricing => "pricing",
            SchemeKind::Intervention => "intervention",
            SchemeKind::Repeated => "repeated",
            SchemeKind::FullSharing => "full_sharing",
            SchemeKind::Cooperative => "cooperative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub benefit: BenefitChoice,
    pub kappa: f64,
    pub delta: f64,
    pub sigma: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub schemes: Vec<SchemeKind>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benefit: BenefitChoice::Log,
            kappa: 0.3,
            delta: 0.0025,
            sigma: 0.01,
            n_min: 1,
            n_max: 100,
            schemes: SchemeKind::ALL.to_vec(),
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("benefit", "kind"),
    ("benefit", "a"),
    ("benefit", "m"),
    ("params", "kappa"),
    ("params", "delta"),
    ("params", "sigma"),
    ("sweep", "n_min"),
    ("sweep", "n_max"),
    ("sweep", "schemes"),
    ("output", "dir"),
    ("output", "seed"),
];

impl ExperimentConfig {
    /// Parses `key = value` lines grouped under `[section]` headers. Keys
    /// may also appear before the first header. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        let (mut kind, mut kind_line) = ("log".to_string(), 0);
        let (mut a, mut m) = (1.0, 1000u64);
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |message: String| Error::Config { line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err(format!("unterminated section header `{line}`")))?;
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(err(format!("unknown section `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS.iter().find(|(s, k)| *k == key && (section.is_empty() || *s == section));
            let Some((_, key)) = known else {
                return Err(err(format!("unknown key `{key}` in section `{section}`")));
            };
            let real = || value.parse::<f64>().map_err(|_| err(format!("`{key}` expects a number, got `{value}`")));
            let int = || value.parse::<u64>().map_err(|_| err(format!("`{key}` expects an integer, got `{value}`")));
            match *key {
                "kind" => (kind, kind_line) = (value.to_string(), line_no),
                "a" => a = real()?,
                "m" => m = int()?,
                "kappa" => cfg.kappa = real()?,
                "delta" => cfg.delta = real()?,
                "sigma" => cfg.sigma = real()?,
                "n_min" => cfg.n_min = int()? as usize,
                "n_max" => cfg.n_max = int()? as usize,
                "schemes" => {
                    cfg.schemes = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| SchemeKind::parse(s).ok_or_else(|| err(format!("unknown scheme `{s}`"))))
                        .collect::<Result<_>>()?;
                }
                "dir" => cfg.out_dir = PathBuf::from(value),
                "seed" => cfg.seed = int()?,
                _ => unreachable!("key table and match arms agree"),
            }
        }
        cfg.benefit = match kind.as_str() {
            "log" => BenefitChoice::Log,
            "distinct_files" => BenefitChoice::DistinctFiles(DistinctFilesParams { a, m }),
            other => {
                return Err(Error::Config { line: kind_line, message: format!("unknown benefit kind `{other}`") });
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::InvalidParameter(format!(
                "n range {}..={} must be nonempty and start at 1 or above",
                self.n_min, self.n_max
            )));
        }
        self.params(self.n_min).map(|_| ())
    }

    pub fn params(&self, n: usize) -> Result<CpsParams> {
        CpsParams::new(n, self.benefit.build()?, self.kappa, self.delta, self.sigma)
    }

    pub fn enabled(&self, kind: SchemeKind) -> bool {
        self.schemes.contains(&kind)
    }
}

/// One data series file of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub name: &'static str,
    pub rows: Vec<(usize, &'static str, f64)>,
}

impl Panel {
    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn series(&self, name: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.1 == name).map(|r| (r.0, r.2)).collect()
    }

    /// CSV text; infinities are written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (n, series, value) in &self.rows {
            writeln!(out, "{n},{series},{value}").expect("writing to a String");
        }
        out
    }
}

/// The six data series over `n_min..=n_max`: average and total utility,
/// marginal product, inefficiency measures, transfer volume and the optimal
/// price.
pub fn figure_series(config: &ExperimentConfig) -> Result<Vec<Panel>> {
    config.validate()?;
    let base = config.params(config.n_min)?;
    let tables = scale_tables(&base, config.n_max)?;
    let fk = base.conj(base.kappa());
    let mut panels = vec![
        Panel { name: "average_utility", rows: vec![] },
        Panel { name: "total_utility", rows: vec![] },
        Panel { name: "marginal_product", rows: vec![] },
        Panel { name: "inefficiency", rows: vec![] },
        Panel { name: "transfer_volume", rows: vec![] },
        Panel { name: "optimal_price", rows: vec![] },
    ];
    for n in config.n_min..=config.n_max {
        let params = base.with_peers(n)?;
        let nf = n as f64;
        let metrics = inefficiency(&params);
        let rows: [&[(&'static str, f64)]; 6] = [
            &[("cooperative", tables.g(n)), ("noncooperative", fk), ("full_sharing", tables.g_fs(n))],
            &[("cooperative", tables.big_g(n)), ("noncooperative", nf * fk), ("full_sharing", nf * tables.g_fs(n))],
            &[("mp", tables.mp(n)), ("g", tables.g(n))],
            &[("poa", metrics.poa), ("pons", metrics.pons), ("pou", metrics.pou)],
            &[
                ("cooperative", (nf - 1.0) * params.x_hat(params.beta())),
                ("noncooperative", 0.0),
                ("full_sharing", (nf - 1.0) * full_sharing_production(&params, n)),
            ],
            &[("p_star", optimal_price(&params))],
        ];
        for (panel, series) in panels.iter_mut().zip(rows) {
            panel.rows.extend(series.iter().map(|&(s, v)| (n, s, v)));
        }
    }
    Ok(panels)
}

/// Writes the six series as CSV files into `config.out_dir`.
pub fn run_figure_sweep(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let panels = figure_series(config)?;
    fs::create_dir_all(&config.out_dir)?;
    panels
        .iter()
        .map(|p| {
            let path = config.out_dir.join(p.file_name());
            fs::write(&path, p.to_csv())?;
            Ok(path)
        })
        .collect()
}

/// A single experiment run.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Sweep,
    Solve { n: usize },
    Core { n: usize },
    Shapley { n: usize },
    PriceDynamics { n: usize, p0: Option<f64>, eta: f64, step: Option<f64>, max_iters: usize },
    QuantityDynamics { n: usize, step: f64, max_iters: usize },
    Intervention { n: usize },
    Repeated { n: usize, rounds: usize, deviant: Option<usize>, deviation_round: usize },
    GroupSize { total_n: Option<usize> },
    BestResponse { n: usize, scheme: SchemeKind, rounds: usize },
}

/// Human-readable lines followed by machine-readable `key=value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub title: String,
    pub lines: Vec<String>,
    pub values: Vec<(String, String)>,
}

impl Report {
    fn new(title: impl Into<String>) -> Self {
        Report { title: title.into(), ..Default::default() }
    }

    fn line(&mut self, text: impl Into<String>) {
        self.lines.push(text.into());
    }

    fn kv(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.values.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {}", self.title)?;
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        writeln!(f)?;
        for (k, v) in &self.values {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn run_report(config: &ExperimentConfig, command: &Command) -> Result<Report> {
    config.validate()?;
    match command {
        Command::Sweep => {
            let files = run_figure_sweep(config)?;
            let mut r = Report::new(format!("sweep n={}..={}", config.n_min, config.n_max));
            for f in &files {
                r.line(format!("wrote {}", f.display()));
            }
            r.kv("files", files.len());
            r.kv("out_dir", config.out_dir.display());
            Ok(r)
        }
        Command::Solve { n } => solve_report(config, *n),
        Command::Core { n } => {
            let params = config.params(*n)?;
            let vertices = core_vertices(&params)?;
            let mut centroid = vec![0.0; *n];
            for v in &vertices {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / vertices.len() as f64;
                }
            }
            let sh = shapley(&params);
            let gap = centroid.iter().zip(&sh).map(|(c, s)| (c - s).abs()).fold(0.0, f64::max);
            let mut r = Report::new(format!("core of the sharing game, N={n}"));
            for (k, v) in vertices.iter().enumerate() {
                r.line(format!("vertex {k}: {}", v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")));
                r.kv(format!("vertex.{k}"), list(v));
            }
            r.line(format!("centroid differs from the Shapley value by {gap:.3e}"));
            r.kv("n", n);
            r.kv("vertices", vertices.len());
            r.kv("centroid", list(&centroid));
            r.kv("shapley", list(&sh));
            r.kv("centroid_equals_shapley", gap <= 1e-9);
            Ok(r)
        }
        Command::Shapley { n } => {
            let params = config.params(*n)?;
            let sh = shapley(&params);
            let mut r = Report::new(format!("Shapley value of the sharing game, N={n}"));
            r.line(format!("every peer receives {:.6}", sh[0]));
            r.kv("n", n);
            r.kv("shapley", list(&sh));
            r.kv("f_star_beta", params.conj(params.beta()));
            Ok(r)
        }
        Command::PriceDynamics { n, p0, eta, step, max_iters } => {
            let params = config.params(*n)?;
            let ps = optimal_price(&params);
            let mut cfg = PriceAdjustment::with_defaults(&params, p0.unwrap_or(0.5 * ps));
            cfg.eta = *eta;
            cfg.max_iters = *max_iters;
            if let Some(s) = step {
                cfg.step = *s;
            }
            let t = run_price_adjustment(&params, &cfg)?;
            let mut r = Report::new(format!("price adjustment, N={n}, p0={}", cfg.p0));
            r.line(format!(
                "{} after {} iterations: p={:.8} (p*={ps:.8})",
                if t.converged { "converged" } else { "not converged" },
                t.iterations,
                t.final_price()
            ));
            r.kv("n", n);
            r.kv("p0", cfg.p0);
            r.kv("converged", t.converged);
            r.kv("iterations", t.iterations);
            r.kv("p_final", t.final_price());
            r.kv("p_star", ps);
            r.kv("gap", (t.final_price() - ps).abs());
            Ok(r)
        }
        Command::QuantityDynamics { n, step, max_iters } => {
            let params = config.params(*n)?;
            let xb = params.x_hat(params.beta());
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let x0: Vec<f64> = (0..*n).map(|_| rng.gen_range(0.0..=xb)).collect();
            let d0 = optimal_downloads(&params, &x0);
            let eta: Vec<f64> = (0..*n).map(|_| rng.gen_range(0.5..1.5)).collect();
            let cfg = QuantityAdjustment { eta, step: *step, max_iters: *max_iters };
            let t = run_quantity_adjustment(&params, &x0, &d0, &cfg)?;
            let drift = t
                .states
                .iter()
                .flat_map(|s| s.production.iter().zip(&s.download).map(|(x, d)| (x + d - xb).abs()))
                .fold(0.0, f64::max);
            let last = t.last();
            let mut r = Report::new(format!("quantity adjustment, N={n}"));
            r.line(format!(
                "{} after {} steps: total production {:.8} (target {xb:.8})",
                if t.converged { "converged" } else { "not converged" },
                t.states.len() - 1,
                last.total_production()
            ));
            r.kv("n", n);
            r.kv("converged", t.converged);
            r.kv("steps", t.states.len() - 1);
            r.kv("x0", list(&x0));
            r.kv("x_final", list(&last.production));
            r.kv("total_final", last.total_production());
            r.kv("x_hat_beta", xb);
            r.kv("max_consumption_drift", drift);
            Ok(r)
        }
        Command::Intervention { n } => {
            let params = config.params(*n)?;
            let out = intervention_outcome(&params)?;
            let mut r = Report::new(format!("intervention, N={n}"));
            r.line(format!(
                "each peer produces {:.6}, rating {}, intervention level {}",
                out.report.allocation.x[0], out.ratings[0], out.levels[0]
            ));
            r.kv("n", n);
            r.kv("p_star", out.intervention.p_star);
            r.kv("production", list(&out.report.allocation.x));
            r.kv("ratings", list(&out.ratings));
            r.kv("levels", list(&out.levels));
            r.kv("payoffs", list(&out.payoffs));
            Ok(r)
        }
        Command::Repeated { n, rounds, deviant, deviation_round } => {
            let params = config.params(*n)?;
            let target = solve_pareto(&params, &equal_split(*n))?.allocation;
            let stats = grim_trigger_run(&params, &target, *deviant, *deviation_round, *rounds)?;
            let mut r = Report::new(format!("grim trigger towards the equal-split efficient allocation, N={n}"));
            match (deviant, stats.detection_round) {
                (Some(d), Some(at)) => r.line(format!("peer {d} deviated and was detected in round {at}")),
                (Some(d), None) => r.line(format!("peer {d} had no profitable deviation")),
                _ => r.line("no deviation; the target is replayed every round"),
            }
            r.kv("n", n);
            r.kv("rounds", rounds);
            r.kv("cooperative_utility", params.conj(params.beta()));
            r.kv("autarky_utility", params.conj(params.kappa()));
            r.kv("running_means", list(&stats.running_means));
            r.kv("detection_round", stats.detection_round.map_or("none".to_string(), |v| v.to_string()));
            r.kv("deviation_gain", stats.deviation_gain.map_or("none".to_string(), |v| v.to_string()));
            Ok(r)
        }
        Command::GroupSize { total_n } => {
            let params = config.params(config.n_min)?;
            let gs = optimal_group_size(&params)?;
            let mut r = Report::new("optimal group size under enforced full sharing");
            r.line(format!("N*={}", gs.n_star));
            r.line(format!("per-peer value {:.6}, searched sizes 1..={}", gs.value, gs.search_limit));
            r.kv("n_star", gs.n_star);
            r.kv("value", gs.value);
            r.kv("search_limit", gs.search_limit);
            r.kv("ties", if gs.ties.is_empty() { "none".to_string() } else { format!("{:?}", gs.ties) });
            if let Some(total) = total_n {
                r.kv("total_n", total);
                match vfs_core(&params, *total)? {
                    VfsCore::Unique(profile) => {
                        r.line(format!("core for {total} peers: unique, every peer gets {:.6}", profile[0]));
                        r.kv("core", "unique");
                        r.kv("core_profile", list(&profile));
                    }
                    VfsCore::Empty { blocking, blocking_value, blocking_payoff, .. } => {
                        r.line(format!(
                            "core for {total} peers: empty; {blocking:?} can secure {blocking_value:.6} > {blocking_payoff:.6}"
                        ));
                        r.kv("core", "empty");
                        r.kv("blocking", format!("{blocking:?}"));
                        r.kv("blocking_value", blocking_value);
                        r.kv("blocking_payoff", blocking_payoff);
                    }
                }
            }
            Ok(r)
        }
        Command::BestResponse { n, scheme, rounds } => {
            let params = config.params(*n)?;
            let (sim_scheme, init) = brd_setup(&params, *scheme, config.seed)?;
            let cfg = BrdConfig { rounds: *rounds, seed: config.seed, ..Default::default() };
            let stats = best_response_dynamics(&params, sim_scheme, &init, &cfg)?;
            let mut r = Report::new(format!("best-response dynamics, N={n}, scheme {}", scheme.name()));
            r.line(format!(
                "{} (settled from round {})",
                if stats.converged { "reached the predicted outcome" } else { "did not reach the predicted outcome" },
                stats.settled_round.map_or("-".to_string(), |v| v.to_string())
            ));
            r.kv("n", n);
            r.kv("scheme", scheme.name());
            r.kv("converged", stats.converged);
            r.kv("settled_round", stats.settled_round.map_or("none".to_string(), |v| v.to_string()));
            let prod: Vec<f64> = stats.final_plans.iter().map(|p| p.production).collect();
            let shares: Vec<f64> = stats.final_plans.iter().map(|p| p.share).collect();
            r.kv("production", list(&prod));
            r.kv("shares", list(&shares));
            Ok(r)
        }
    }
}

/// Scheme and seeded starting plans for a best-response run. Without a
/// scheme and under pricing peers start anywhere in `[0, 2 x_hat(beta)]`;
/// under intervention they start within 2% of the symmetric efficient
/// split, because symmetric profiles below the efficient total are
/// equilibria as well.
pub fn brd_setup(params: &CpsParams, kind: SchemeKind, seed: u64) -> Result<(Scheme, Vec<Plan>)> {
    let n = params.n_peers();
    let xb = params.x_hat(params.beta());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let scheme = match kind {
        SchemeKind::None => Scheme::None,
        SchemeKind::Pricing => Scheme::optimal_price(params),
        SchemeKind::Intervention => Scheme::optimal_intervention(params),
        other => {
            return Err(Error::InvalidParameter(format!(
                "best-response dynamics supports none, pricing and intervention, not {}",
                other.name()
            )))
        }
    };
    let init = (0..n)
        .map(|_| match kind {
            SchemeKind::Intervention => {
                let x = xb / n as f64 * rng.gen_range(0.98..1.02);
                Plan { production: x, share: x }
            }
            _ => {
                let x = rng.gen_range(0.0..2.0 * xb);
                Plan { production: x, share: rng.gen_range(0.0..=x) }
            }
        })
        .collect();
    Ok((scheme, init))
}

fn solve_report(config: &ExperimentConfig, n: usize) -> Result<Report> {
    let params = config.params(n)?;
    let mut r = Report::new(format!("solution concepts, N={n}"));
    r.kv("n", n);
    r.kv("beta", params.beta());
    if config.enabled(SchemeKind::None) {
        let se = solve_noncooperative(&params);
        r.line(format!("non-cooperative: each peer produces {:.6}, shares nothing, utility {:.6}", se.allocation.x[0], se.utilities[0]));
        r.kv("se.production", se.allocation.x[0]);
        r.kv("se.utility", se.utilities[0]);
        r.kv("se.total_utility", se.total_utility);
    }
    if config.enabled(SchemeKind::Cooperative) {
        let pe = solve_pareto(&params, &equal_split(n))?;
        let total: f64 = pe.allocation.x.iter().sum();
        r.line(format!("efficient: total production {total:.6}, utility {:.6} each, transfers {:.6}", pe.utilities[0], pe.transfer_volume));
        r.kv("pe.total_production", total);
        r.kv("pe.utility", pe.utilities[0]);
        r.kv("pe.total_utility", pe.total_utility);
        r.kv("pe.transfer_volume", pe.transfer_volume);
    }
    if config.enabled(SchemeKind::FullSharing) {
        let fs = solve_full_sharing(&params, &equal_split(n))?;
        let total: f64 = fs.allocation.x.iter().sum();
        r.line(format!("enforced full sharing: total production {total:.6}, utility {:.6} each", fs.utilities[0]));
        r.kv("fs.total_production", total);
        r.kv("fs.utility", fs.utilities[0]);
        r.kv("fs.total_utility", fs.total_utility);
    }
    if config.enabled(SchemeKind::Pricing) {
        let ps = optimal_price(&params);
        r.line(format!("optimal price {ps:.6}"));
        r.kv("pricing.p_star", ps);
    }
    if config.enabled(SchemeKind::Intervention) && n >= 2 {
        let out = intervention_outcome(&params)?;
        r.line(format!("intervention: payoff {:.6} each, level {}", out.payoffs[0], out.levels[0]));
        r.kv("intervention.payoff", out.payoffs[0]);
    }
    if config.enabled(SchemeKind::Repeated) && n >= 2 {
        let pe = solve_pareto(&params, &equal_split(n))?;
        let ok = check_participation_efficient(&params, &pe.allocation);
        r.line(format!(
            "repeated play: equal split is participation efficient: {ok}; no peer may produce more than {:.6}",
            participation_bound(&params)?
        ));
        r.kv("repeated.equal_split_supported", ok);
        r.kv("repeated.participation_bound", participation_bound(&params)?);
    }
    let m = inefficiency(&params);
    r.line(format!("PoA {:.6}, PoNS {}, PoU {:.6}", m.poa, m.pons, m.pou));
    r.kv("poa", m.poa);
    r.kv("pons", m.pons);
    r.kv("pou", m.pou);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_sections() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let text = "# experiment\nseed = 7\n[benefit]\nkind = distinct_files\na = 2\nm = 500\n[params]\nkappa = 0.4 # higher\n[sweep]\nn_min = 2\nn_max = 20\nschemes = none, pricing\n[output]\ndir = /tmp/x\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.benefit, BenefitChoice::DistinctFiles(DistinctFilesParams { a: 2.0, m: 500 }));
        assert_eq!(cfg.kappa, 0.4);
        assert_eq!((cfg.n_min, cfg.n_max), (2, 20));
        assert_eq!(cfg.schemes, vec![SchemeKind::None, SchemeKind::Pricing]);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("kappa = 0.3\n[nope]\n", 2),
            ("[params]\nkappa 0.3\n", 2),
            ("[params]\n\nkappa = abc\n", 3),
            ("[sweep]\nkappa = 0.3\n", 2),
            ("schemes = none, bogus\n", 1),
            ("[params\n", 1),
        ];
        for (text, line) in cases {
            match ExperimentConfig::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(ExperimentConfig::parse("n_min = 5\nn_max = 4\n").is_err());
        assert!(ExperimentConfig::parse("kappa = 2.0\n").is_err());
        assert!(matches!(ExperimentConfig::parse("\nkind = quadratic\n"), Err(Error::Config { line: 2, .. })));
    }

    #[test]
    fn sweep_series_anchor_values() {
        let panels = figure_series(&ExperimentConfig::default()).unwrap();
        assert_eq!(panels.len(), 6);
        let avg = &panels[0];
        let coop = avg.series("cooperative");
        assert_eq!(coop.len(), 100);
        assert!((coop[99].1 - 3.190387465289556).abs() < 1e-9);
        let fs = avg.series("full_sharing");
        let peak = fs.iter().copied().fold((0, f64::NEG_INFINITY), |b, r| if r.1 > b.1 { r } else { b });
        assert_eq!(peak.0, 5);
        assert!(fs.iter().filter(|r| r.0 >= 71).all(|r| r.1 == 0.0));
        let ineff = &panels[3];
        assert!(ineff.series("pons").iter().filter(|r| r.0 >= 71).all(|r| r.1.is_infinite()));
        assert!(ineff.to_csv().contains("71,pons,inf\n"));
        let price = panels[5].series("p_star");
        assert!(price.windows(2).all(|w| w[1].1 < w[0].1));
        assert!(panels.iter().all(|p| p.to_csv().starts_with("n,series,value\n")));
    }

    #[test]
    fn group_size_report() {
        let r = run_report(&ExperimentConfig::default(), &Command::GroupSize { total_n: Some(7) }).unwrap();
        assert!(r.lines.iter().any(|l| l == "N*=5"));
        assert_eq!(r.get("n_star"), Some("5"));
        assert_eq!(r.get("core"), Some("empty"));
        assert!(r.to_string().contains("\nn_star=5\n"));
    }

    #[test]
    fn core_report_for_two_peers() {
        let r = run_report(&ExperimentConfig::default(), &Command::Core { n: 2 }).unwrap();
        assert_eq!(r.get("vertices"), Some("2"));
        assert_eq!(r.get("centroid_equals_shapley"), Some("true"));
        assert!(run_report(&ExperimentConfig::default(), &Command::Core { n: 9 }).is_err());
    }

    #[test]
    fn price_report_converges_from_half() {
        let cmd = Command::PriceDynamics { n: 10, p0: Some(0.5), eta: 1.0, step: None, max_iters: 100_000 };
        let r = run_report(&ExperimentConfig::default(), &cmd).unwrap();
        assert_eq!(r.get("converged"), Some("true"));
        let gap: f64 = r.get("gap").unwrap().parse().unwrap();
        assert!(gap < 1e-4);
    }

    #[test]
    fn other_reports_run() {
        let cfg = ExperimentConfig::default();
        let cmds = [
            Command::Solve { n: 10 },
            Command::Solve { n: 1 },
            Command::Shapley { n: 4 },
            Command::QuantityDynamics { n: 3, step: 1e-2, max_iters: 1_000_000 },
            Command::Intervention { n: 3 },
            Command::Repeated { n: 2, rounds: 200, deviant: Some(1), deviation_round: 10 },
            Command::BestResponse { n: 2, scheme: SchemeKind::Pricing, rounds: 10 },
        ];
        for cmd in &cmds {
            let r = run_report(&cfg, cmd).unwrap();
            assert!(!r.values.is_empty(), "{cmd:?}");
        }
        let q = run_report(&cfg, &cmds[3]).unwrap();
        assert_eq!(q.get("converged"), Some("true"));
        let rep = run_report(&cfg, &cmds[5]).unwrap();
        assert_eq!(rep.get("detection_round"), Some("10"));
        assert!(run_report(&cfg, &Command::BestResponse { n: 2, scheme: SchemeKind::Repeated, rounds: 5 }).is_err());
        assert!(run_report(&cfg, &Command::Intervention { n: 1 }).is_err());
    }

    #[test]
    fn sweep_writes_files_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { out_dir: dir.path().join("a"), n_max: 30, ..Default::default() };
        let first = run_figure_sweep(&cfg).unwrap();
        let bytes: Vec<Vec<u8>> = first.iter().map(|p| fs::read(p).unwrap()).collect();
        let again = run_figure_sweep(&cfg).unwrap();
        assert_eq!(first, again);
        for (p, b) in again.iter().zip(&bytes) {
            assert_eq!(&fs::read(p).unwrap(), b);
        }
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let bad = ExperimentConfig { out_dir: blocker.join("sub"), ..cfg };
        assert!(matches!(run_figure_sweep(&bad), Err(Error::Io(_))));
    }
}
