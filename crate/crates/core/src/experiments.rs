//! Random market generation and batch studies of tatonnement.
//!
//! Markets are drawn with every parameter uniform in `[2, 3]` and CES
//! parameters uniform over `[1/4, 3/4] ∪ [-101, -1]`. A batch runs the dynamics
//! on each market, fits the decay exponent of the potential gap, and flags
//! runs that stall in an oscillation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{hicksian, marshallian};
use crate::dynamics::{convergence_report, run, Optimum, RunConfig, Termination, Trajectory};
use crate::elasticity::{hicksian_elasticity_fd, market_elasticity, ELASTICITY_FD_STEP};
use crate::error::{Error, Result};
use crate::market::{Market, NestChild, NestNode, UtilityKind, UtilitySpec};
use crate::oracle::{solve_dual, solve_grid, DualConfig, GRID_MAX_GOODS};
use crate::sampling::uniform_in;

/// Buyer kinds and their selection weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette(pub Vec<(UtilityKind, f64)>);

impl Palette {
    /// CES, Cobb-Douglas and Leontief with equal weight.
    pub fn strictly_concave() -> Self {
        Palette(vec![(UtilityKind::Ces, 1.0), (UtilityKind::CobbDouglas, 1.0), (UtilityKind::Leontief, 1.0)])
    }

    /// The strictly concave palette plus linear buyers, all with equal weight.
    pub fn with_linear() -> Self {
        let mut p = Self::strictly_concave();
        p.0.push((UtilityKind::Linear, 1.0));
        p
    }

    /// Parses `kind[:weight],...`, e.g. `ces,cobb_douglas,leontief:2`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, weight) = match item.split_once(':') {
                Some((n, w)) => {
                    let w: f64 = w.parse().map_err(|_| Error::Config(format!("bad palette weight in {item:?}")))?;
                    (n, w)
                }
                None => (item, 1.0),
            };
            let kind =
                UtilityKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown utility kind {name:?}")))?;
            entries.push((kind, weight));
        }
        let p = Palette(entries);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("palette weights must be finite and nonnegative".into()));
        }
        if !(self.0.iter().map(|(_, w)| w).sum::<f64>() > 0.0) {
            return Err(Error::Config("palette weights must have a positive sum".into()));
        }
        Ok(())
    }

    pub fn contains(&self, kind: UtilityKind) -> bool {
        self.0.iter().any(|(k, w)| *k == kind && *w > 0.0)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> UtilityKind {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut r = rng.random::<f64>() * total;
        for (k, w) in &self.0 {
            if r < *w {
                return *k;
            }
            r -= w;
        }
        self.0.iter().rev().find(|(_, w)| *w > 0.0).map(|(k, _)| *k).expect("validated palette")
    }
}

impl std::fmt::Display for Palette {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, w)| format!("{k}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub buyers: usize,
    pub goods: usize,
    pub value_range: (f64, f64),
    pub budget_range: (f64, f64),
    /// Disjoint intervals; rho is uniform over their union.
    pub rho_ranges: Vec<(f64, f64)>,
    pub price_range: (f64, f64),
    pub palette: Palette,
    pub seed: u64,
    pub normalize_budgets: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            buyers: 10,
            goods: 5,
            value_range: (2.0, 3.0),
            budget_range: (2.0, 3.0),
            rho_ranges: vec![(0.25, 0.75), (-101.0, -1.0)],
            price_range: (2.0, 3.0),
            palette: Palette::strictly_concave(),
            seed: 0,
            normalize_budgets: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buyers == 0 || self.goods == 0 {
            return Err(Error::Config("need at least one buyer and one good".into()));
        }
        let positive = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} [{lo}, {hi}] must be a nonempty positive interval")))
            }
        };
        positive("value_range", self.value_range)?;
        positive("budget_range", self.budget_range)?;
        positive("price_range", self.price_range)?;
        if self.rho_ranges.is_empty() {
            return Err(Error::Config("rho_ranges is empty".into()));
        }
        for &(lo, hi) in &self.rho_ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && hi < 1.0) {
                return Err(Error::Config(format!("rho range [{lo}, {hi}] must be nonempty and below 1")));
            }
        }
        self.palette.validate()
    }

    /// Uniform draw from the union of `rho_ranges`, each interval picked with
    /// probability proportional to its length.
    fn draw_rho<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total: f64 = self.rho_ranges.iter().map(|(lo, hi)| hi - lo).sum();
        if total <= 0.0 {
            let i = rng.random_range(0..self.rho_ranges.len());
            return self.rho_ranges[i].0;
        }
        let mut r = rng.random::<f64>() * total;
        for &(lo, hi) in &self.rho_ranges {
            if r <= hi - lo {
                return lo + r;
            }
            r -= hi - lo;
        }
        self.rho_ranges.last().expect("nonempty").1
    }

    fn draw_values<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.goods).map(|_| uniform_in(rng, self.value_range)).collect()
    }

    fn draw_utility<R: Rng + ?Sized>(&self, kind: UtilityKind, rng: &mut R) -> UtilitySpec {
        match kind {
            UtilityKind::Linear => UtilitySpec::Linear { values: self.draw_values(rng) },
            UtilityKind::CobbDouglas => UtilitySpec::CobbDouglas { values: self.draw_values(rng) },
            UtilityKind::Leontief => UtilitySpec::Leontief { values: self.draw_values(rng) },
            UtilityKind::Ces => {
                let values = self.draw_values(rng);
                UtilitySpec::Ces { values, rho: self.draw_rho(rng) }
            }
            UtilityKind::NestedCes => UtilitySpec::NestedCes { root: self.draw_nest(rng) },
        }
    }

    /// Two-level nest: goods split at a random point into two CES nests under a CES root.
    fn draw_nest<R: Rng + ?Sized>(&self, rng: &mut R) -> NestNode {
        let m = self.goods;
        let leaf = |goods: std::ops::Range<usize>, rng: &mut R| NestNode {
            rho: self.draw_rho(rng),
            weights: goods.clone().map(|_| uniform_in(rng, self.value_range)).collect(),
            children: goods.map(NestChild::Good).collect(),
        };
        if m < 2 {
            return leaf(0..m, rng);
        }
        let split = rng.random_range(1..m);
        let left = leaf(0..split, rng);
        let right = leaf(split..m, rng);
        NestNode {
            rho: self.draw_rho(rng),
            weights: vec![uniform_in(rng, self.value_range), uniform_in(rng, self.value_range)],
            children: vec![NestChild::Node(left), NestChild::Node(right)],
        }
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Market number `index` of the stream defined by `config`, with its initial prices.
/// The result depends only on `(config, index)`.
pub fn generate_market(config: &GenConfig, index: u64) -> Result<(Market, Vec<f64>)> {
    config.validate()?;
    let mut rng = config.rng(index);
    let mut budgets = Vec::with_capacity(config.buyers);
    let mut utilities = Vec::with_capacity(config.buyers);
    for _ in 0..config.buyers {
        let kind = config.palette.draw(&mut rng);
        utilities.push(config.draw_utility(kind, &mut rng));
        budgets.push(uniform_in(&mut rng, config.budget_range));
    }
    let p0: Vec<f64> = (0..config.goods).map(|_| uniform_in(&mut rng, config.price_range)).collect();
    let market = Market::validated(config.goods, budgets, utilities, config.normalize_budgets)?;
    Ok((market, p0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub count: usize,
    pub run: RunConfig,
    pub dual: DualConfig,
    /// Points per edge for the grid oracle (used when `m <= 3`).
    pub grid_resolution: usize,
    /// Fraction of the run inspected by the oscillation detector.
    pub tail_fraction: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            count: 200,
            run: RunConfig::default(),
            dual: DualConfig::default(),
            grid_resolution: 2001,
            tail_fraction: 0.1,
        }
    }
}

/// Full-scale batch size.
pub const FULL_SCALE_COUNT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiStarSource {
    Grid,
    Dual,
    /// Smallest recorded potential; the fitted exponent is then only indicative.
    TrajectoryMin,
}

impl PhiStarSource {
    pub fn label(self) -> &'static str {
        match self {
            PhiStarSource::Grid => "grid",
            PhiStarSource::Dual => "dual",
            PhiStarSource::TrajectoryMin => "trajectory_min",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketRecord {
    pub index: u64,
    pub seed: u64,
    #[serde(with = "crate::io::extended_float")]
    pub epsilon: f64,
    /// Largest elasticity of substitution among the buyers.
    #[serde(with = "crate::io::extended_float")]
    pub max_sigma: f64,
    pub has_linear: bool,
    pub termination: String,
    pub converged: bool,
    pub iterations: usize,
    #[serde(with = "crate::io::extended_float")]
    pub final_max_excess: f64,
    #[serde(with = "crate::io::extended_float")]
    pub final_phi: f64,
    pub phi_star: Option<f64>,
    pub phi_star_source: Option<PhiStarSource>,
    pub exponent: Option<f64>,
    pub gamma_events: usize,
    #[serde(with = "crate::io::extended_float")]
    pub final_gamma: f64,
    pub max_iterations: bool,
    /// Potential range over the tail window.
    #[serde(with = "crate::io::extended_float")]
    pub tail_phi_range: f64,
    /// `tail_phi_range > 10 tol`.
    pub tail_oscillation: bool,
    pub price_change_violations: usize,
    #[serde(with = "crate::io::extended_float")]
    pub max_abs_log_ratio: f64,
    pub bregman_violations: usize,
    #[serde(with = "crate::io::extended_float")]
    pub bregman_max_excess: f64,
    pub steps: usize,
    pub non_finite: bool,
    pub diagnostics: Vec<String>,
}

impl MarketRecord {
    /// Stopped at the iteration cap while still oscillating.
    pub fn non_convergent(&self) -> bool {
        self.max_iterations && self.tail_oscillation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub count: usize,
    pub converged: usize,
    /// Absent for an empty batch.
    pub convergence_fraction: Option<f64>,
    pub non_convergent: usize,
    pub rate: RateTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub gen: GenConfig,
    pub batch: BatchConfig,
    pub records: Vec<MarketRecord>,
    pub summary: BatchSummary,
}

/// Certified dual solution when available, else the grid oracle for small markets.
fn reference_optimum(
    market: &Market,
    batch: &BatchConfig,
    diags: &mut Vec<String>,
) -> Option<(Optimum, PhiStarSource)> {
    if !market.has_linear_buyer() {
        match solve_dual(market, &batch.dual) {
            Ok(d) if d.certified => return Some((Optimum { phi: d.phi, prices: Some(d.prices) }, PhiStarSource::Dual)),
            Ok(d) => diags.push(format!("dual oracle not certified (residual {:e})", d.residual)),
            Err(e) => diags.push(format!("dual oracle: {e}")),
        }
    }
    if market.num_goods() <= GRID_MAX_GOODS {
        match solve_grid(market, batch.grid_resolution) {
            Ok(g) => return Some((Optimum { phi: g.phi, prices: Some(g.prices) }, PhiStarSource::Grid)),
            Err(e) => diags.push(format!("grid oracle: {e}")),
        }
    }
    None
}

/// Runs the dynamics on one generated market and summarizes the run.
pub fn run_one(gen: &GenConfig, batch: &BatchConfig, index: u64) -> Result<MarketRecord> {
    let (market, p0) = generate_market(gen, index)?;
    let traj = run(&market, &p0, &batch.run)?;
    Ok(record_run(gen, batch, index, &market, &traj))
}

/// Summarizes a finished run, including the fitted rate exponent.
pub fn record_run(
    gen: &GenConfig,
    batch: &BatchConfig,
    index: u64,
    market: &Market,
    traj: &Trajectory,
) -> MarketRecord {
    let mut diagnostics = Vec::new();
    let converged = traj.termination == Termination::Converged;
    let mut exponent = None;
    let mut phi_star = None;
    let mut phi_star_source = None;
    if !matches!(traj.termination, Termination::Diverged { .. }) {
        let oracle = reference_optimum(market, batch, &mut diagnostics);
        let slack = 1e-9 * (1.0 + traj.min_phi().abs());
        let report = match oracle {
            Some((opt, src)) => match convergence_report(traj, &opt, slack) {
                Ok(r) => Some((r, opt.phi, src)),
                Err(e) => {
                    diagnostics.push(format!("{e}; falling back to trajectory minimum"));
                    None
                }
            },
            None => None,
        };
        let report = report.or_else(|| {
            let opt = Optimum { phi: traj.min_phi(), prices: None };
            convergence_report(traj, &opt, 0.0).ok().map(|r| (r, opt.phi, PhiStarSource::TrajectoryMin))
        });
        if let Some((r, phi, src)) = report {
            exponent = r.exponent;
            phi_star = Some(phi);
            phi_star_source = Some(src);
        }
    }
    let tail_phi_range = traj.tail_range(batch.tail_fraction);
    let eb = market_elasticity(market);
    MarketRecord {
        index,
        seed: gen.seed,
        epsilon: eb.epsilon,
        max_sigma: market.utilities().iter().map(UtilitySpec::sigma).fold(0.0, f64::max),
        has_linear: market.has_linear_buyer(),
        termination: traj.termination.label().to_string(),
        converged,
        iterations: traj.iterations,
        final_max_excess: traj.final_max_excess,
        final_phi: traj.final_phi,
        phi_star,
        phi_star_source,
        exponent,
        gamma_events: traj.policy.events.len(),
        final_gamma: traj.policy.gamma,
        max_iterations: traj.termination == Termination::MaxIterations,
        tail_phi_range,
        tail_oscillation: tail_phi_range > 10.0 * batch.run.tol,
        price_change_violations: traj.audit.price_change_violations,
        max_abs_log_ratio: traj.audit.max_abs_log_ratio,
        bregman_violations: traj.audit.bregman_violations,
        bregman_max_excess: traj.audit.bregman_max_excess,
        steps: traj.audit.steps,
        non_finite: matches!(traj.termination, Termination::Diverged { .. }),
        diagnostics,
    }
}

fn failed_record(gen: &GenConfig, index: u64, err: &Error) -> MarketRecord {
    MarketRecord {
        index,
        seed: gen.seed,
        epsilon: f64::NAN,
        max_sigma: f64::NAN,
        has_linear: false,
        termination: "error".into(),
        converged: false,
        iterations: 0,
        final_max_excess: f64::NAN,
        final_phi: f64::NAN,
        phi_star: None,
        phi_star_source: None,
        exponent: None,
        gamma_events: 0,
        final_gamma: f64::NAN,
        max_iterations: false,
        tail_phi_range: f64::NAN,
        tail_oscillation: false,
        price_change_violations: 0,
        max_abs_log_ratio: 0.0,
        bregman_violations: 0,
        bregman_max_excess: 0.0,
        steps: 0,
        non_finite: false,
        diagnostics: vec![err.to_string()],
    }
}

/// Generates `batch.count` markets and runs the dynamics on each in parallel.
/// Records are ordered by index; per-market failures are recorded, not raised.
pub fn batch_run(gen: &GenConfig, batch: &BatchConfig) -> Result<BatchResult> {
    gen.validate()?;
    let records: Vec<MarketRecord> = (0..batch.count as u64)
        .into_par_iter()
        .map(|i| run_one(gen, batch, i).unwrap_or_else(|e| failed_record(gen, i, &e)))
        .collect();
    Ok(summarize(gen.clone(), *batch, records))
}

pub fn summarize(gen: GenConfig, batch: BatchConfig, records: Vec<MarketRecord>) -> BatchResult {
    let count = records.len();
    let converged = records.iter().filter(|r| r.converged).count();
    let summary = BatchSummary {
        count,
        converged,
        convergence_fraction: (count > 0).then(|| converged as f64 / count as f64),
        non_convergent: records.iter().filter(|r| r.non_convergent()).count(),
        rate: rate_table(&records),
    };
    BatchResult { gen, batch, records, summary }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantiles of `values`; `None` when empty.
pub fn quantiles(values: &[f64]) -> Option<Quantiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let pos = f * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(Quantiles { min: v[0], q25: q(0.25), median: q(0.5), q75: q(0.75), max: v[v.len() - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    /// Converged runs with a fitted exponent.
    pub fitted: usize,
    pub exponents: Option<Quantiles>,
    /// Runs decaying at least like `1/t`.
    pub at_most_minus_one: usize,
    /// Runs decaying at least like `1/t^2`.
    pub at_most_minus_two: usize,
    pub diagnostic: Option<String>,
}

/// Quantiles of the fitted exponents among converged runs.
pub fn rate_table(records: &[MarketRecord]) -> RateTable {
    let exps: Vec<f64> = records.iter().filter(|r| r.converged).filter_map(|r| r.exponent).collect();
    let diagnostic = if !records.iter().any(|r| r.converged) {
        Some("no converged runs".to_string())
    } else if exps.is_empty() {
        Some("no converged run has a fitted exponent".to_string())
    } else {
        None
    };
    RateTable {
        fitted: exps.len(),
        exponents: quantiles(&exps),
        at_most_minus_one: exps.iter().filter(|e| **e <= -1.0).count(),
        at_most_minus_two: exps.iter().filter(|e| **e <= -2.0).count(),
        diagnostic,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaGroup {
    pub label: String,
    pub count: usize,
    pub median_iterations: Option<f64>,
}

/// The max-sigma groups `[0, 1/2]`, `[4/3, 2]` and `(2, 4]`.
pub const SIGMA_GROUPS: [(&str, f64, f64, bool); 3] =
    [("[0,0.5]", 0.0, 0.5, true), ("[4/3,2]", 4.0 / 3.0, 2.0, true), ("(2,4]", 2.0, 4.0, false)];

/// Median iterations-to-tolerance of converged runs, grouped by the market's
/// largest buyer sigma. Markets outside every group are ignored.
pub fn sigma_groups(records: &[MarketRecord]) -> Vec<SigmaGroup> {
    SIGMA_GROUPS
        .iter()
        .map(|&(label, lo, hi, closed_lo)| {
            let iters: Vec<f64> = records
                .iter()
                .filter(|r| r.converged)
                .filter(|r| {
                    let s = r.max_sigma;
                    (if closed_lo { s >= lo - 1e-12 } else { s > lo }) && s <= hi + 1e-12
                })
                .map(|r| r.iterations as f64)
                .collect();
            SigmaGroup {
                label: label.to_string(),
                count: iters.len(),
                median_iterations: quantiles(&iters).map(|q| q.median),
            }
        })
        .collect()
}

/// Hicksian and Marshallian elasticity matrices side by side at `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityContrast {
    pub hicksian: Vec<Vec<f64>>,
    pub marshallian: Vec<Vec<f64>>,
}

/// Central finite-difference `d log x_j / d log p_k` of Marshallian demand.
pub fn marshallian_elasticity_fd(spec: &UtilitySpec, p: &[f64], budget: f64, j: usize, k: usize) -> Result<f64> {
    let d = ELASTICITY_FD_STEP;
    let base = marshallian(spec, p, budget)?.values[j];
    if base <= 0.0 {
        return Err(Error::UndefinedElasticity { good: j });
    }
    let mut q = p.to_vec();
    q[k] = p[k] * (1.0 + d);
    let up = marshallian(spec, &q, budget)?.values[j];
    q[k] = p[k] * (1.0 - d);
    let down = marshallian(spec, &q, budget)?.values[j];
    Ok((up.ln() - down.ln()) / ((1.0 + d).ln() - (1.0 - d).ln()))
}

/// Both elasticity matrices for goods with positive demand (others are NaN).
/// Marshallian elasticities carry an income effect that Hicksian ones do not.
pub fn elasticity_contrast(spec: &UtilitySpec, p: &[f64]) -> Result<ElasticityContrast> {
    let m = p.len();
    let h = hicksian(spec, p, 1.0)?;
    let mut hm = vec![vec![f64::NAN; m]; m];
    let mut mm = vec![vec![f64::NAN; m]; m];
    for j in (0..m).filter(|&j| h.values[j] > 0.0) {
        for k in 0..m {
            hm[j][k] = hicksian_elasticity_fd(spec, p, j, k)?;
            mm[j][k] = marshallian_elasticity_fd(spec, p, 1.0, j, k)?;
        }
    }
    Ok(ElasticityContrast { hicksian: hm, marshallian: mm })
}
