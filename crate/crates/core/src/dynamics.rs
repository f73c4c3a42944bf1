//! Entropic tatonnement: mirror descent on the market potential with the
//! generalized KL divergence, `p_j <- p_j exp(z_j / gamma)`.
//!
//! Three step-size policies are supported. `Theoretical` computes the fixed
//! step from the market's elasticity bound and simplex maxima of Hicksian
//! demand. `Adaptive` keeps `gamma >= 5 max{1, max_j D_j}` before every step,
//! which bounds each price move by a factor `e^{1/5}`. `Fixed` uses a given
//! constant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::{expenditure_unit, unit_eval};
use crate::elasticity::market_elasticity;
use crate::error::{check_len, check_positive, Error, Result};
use crate::market::{Market, PriceVector, UtilitySpec};
use crate::potential::{kl_nonneg, Evaluator, MarketState};
use crate::sampling::uniform_simplex;

/// Floor used by the squared-Euclidean kernel in place of projection onto zero.
pub const EUCLIDEAN_PRICE_FLOOR: f64 = 1e-9;
/// Prices below this count as zero in the convergence test.
pub const ZERO_PRICE_THRESHOLD: f64 = 1e-12;
/// Slack for the per-step smoothness audit.
pub const BREGMAN_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `sum x log x - x`; multiplicative updates.
    WeightedEntropy,
    /// `1/2 |x|^2`; additive updates clipped at [`EUCLIDEAN_PRICE_FLOOR`].
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Theoretical,
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEvent {
    pub t: usize,
    pub old: f64,
    pub new: f64,
    pub trigger_demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizePolicy {
    pub mode: StepMode,
    pub gamma: f64,
    pub initial: f64,
    pub events: Vec<GammaEvent>,
}

impl StepSizePolicy {
    pub fn new(mode: StepMode, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("step size {gamma} must be finite and positive")));
        }
        Ok(StepSizePolicy { mode, gamma, initial: gamma, events: Vec::new() })
    }
}

/// Escalates an adaptive policy so that `gamma >= 5 max{1, max_j D_j}`; logs the change.
/// Non-adaptive policies are returned unchanged.
pub fn step_size_adaptive_update(mut policy: StepSizePolicy, t: usize, demand: &[f64]) -> StepSizePolicy {
    if policy.mode != StepMode::Adaptive {
        return policy;
    }
    let max_d = demand.iter().cloned().fold(1.0, f64::max);
    let required = 5.0 * max_d;
    if required > policy.gamma {
        policy.events.push(GammaEvent { t, old: policy.gamma, new: required, trigger_demand: max_d });
        policy.gamma = required;
    }
    policy
}

/// `p_j exp(z_j / gamma)`.
pub fn entropic_step(p: &PriceVector, z: &[f64], gamma: f64) -> PriceVector {
    PriceVector::from_vec_unchecked(entropic_update(p, z, gamma))
}

fn entropic_update(p: &[f64], z: &[f64], gamma: f64) -> Vec<f64> {
    p.iter().zip(z).map(|(pj, zj)| pj * (zj / gamma).exp()).collect()
}

/// `max(p_j + z_j / gamma, floor)`.
pub fn euclidean_step(p: &PriceVector, z: &[f64], gamma: f64) -> PriceVector {
    PriceVector::from_vec_unchecked(euclidean_update(p, z, gamma))
}

fn euclidean_update(p: &[f64], z: &[f64], gamma: f64) -> Vec<f64> {
    p.iter().zip(z).map(|(pj, zj)| (pj + zj / gamma).max(EUCLIDEAN_PRICE_FLOOR)).collect()
}

/// `6 + 85 eps / 12 + 25 eps^2 / 72`.
pub fn elasticity_factor(epsilon: f64) -> f64 {
    6.0 + 85.0 * epsilon / 12.0 + 25.0 * epsilon * epsilon / 72.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalStep {
    pub gamma: f64,
    pub epsilon: f64,
    pub elasticity_factor: f64,
    /// `sum_i [v_i(p0, b_i) max_q h_ij(q,1) + 2 max ratio_ij]` per good.
    pub per_good: Vec<f64>,
    /// `max_q h_ij(q, 1)`, buyer by good.
    pub max_hicksian: Vec<Vec<f64>>,
    /// `max_{q, q', k} h_ij(q', 1)^2 / h_ik(q, 1)^2`, buyer by good.
    pub max_ratio: Vec<Vec<f64>>,
}

/// Simplex search in softmax coordinates with every price at least `floor`.
fn simplex_point(theta: &[f64], floor: f64) -> Vec<f64> {
    let max = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = theta.iter().map(|t| (t - max).exp()).collect();
    let s: f64 = w.iter().sum();
    let free = 1.0 - floor * theta.len() as f64;
    w.iter().map(|x| floor + free * x / s).collect()
}

/// Multi-start compass search maximizing `f` over the floored simplex.
fn maximize_on_simplex(f: &dyn Fn(&[f64]) -> f64, starts: &[Vec<f64>], floor: f64) -> f64 {
    let m = starts.first().map_or(0, |s| s.len());
    let mut best = f64::NEG_INFINITY;
    for start in starts {
        let mut theta: Vec<f64> = start.iter().map(|x| x.max(1e-300).ln()).collect();
        let mut value = f(&simplex_point(&theta, floor));
        let mut step = 1.0;
        let mut evals = 0;
        while step > 1e-6 && evals < 4000 {
            let mut improved = false;
            'coords: for j in 0..m {
                for dir in [step, -step] {
                    theta[j] += dir;
                    let v = f(&simplex_point(&theta, floor));
                    evals += 1;
                    if v > value {
                        value = v;
                        improved = true;
                        break 'coords;
                    }
                    theta[j] -= dir;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best = best.max(value);
    }
    best
}

const SEARCH_FLOOR: f64 = 1e-6;
const SEARCH_FLOOR_TIGHT: f64 = 1e-9;

/// Simplex maximum of `h_j(., 1)` and simplex minimum over supported goods of
/// `h_k(., 1)`; `None` when either keeps moving as the boundary clip tightens.
fn hicksian_extremes(spec: &UtilitySpec, m: usize, rng: &mut ChaCha8Rng) -> Result<Option<(Vec<f64>, f64)>> {
    if let UtilitySpec::Leontief { values } = spec {
        let min_positive = values.iter().cloned().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        return Ok(Some((values.clone(), min_positive)));
    }
    let starts: Vec<Vec<f64>> = (0..10 * m).map(|_| uniform_simplex(rng, m, 0.0)).collect();
    let mut h = vec![0.0; m];
    let mut probe = vec![0.0; m];
    unit_eval(spec, &starts[0], &mut probe)?;
    let supported: Vec<usize> = (0..m).filter(|&k| probe[k] > 0.0).collect();
    let component = |j: usize, sign: f64| {
        let mut h = vec![0.0; m];
        move |q: &[f64]| match unit_eval(spec, q, &mut h) {
            Ok(_) => sign * h[j],
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let moved = |loose: f64, tight: f64| (tight - loose).abs() > 1e-2 * loose.abs().max(1e-300);
    let mut max_h = vec![0.0; m];
    for &j in &supported {
        let f = component(j, 1.0);
        let cell = std::cell::RefCell::new(f);
        let g = |q: &[f64]| (cell.borrow_mut())(q);
        let loose = maximize_on_simplex(&g, &starts, SEARCH_FLOOR);
        let tight = maximize_on_simplex(&g, &starts, SEARCH_FLOOR_TIGHT);
        if moved(loose, tight) || !tight.is_finite() {
            return Ok(None);
        }
        max_h[j] = tight;
    }
    let mut min_h = f64::INFINITY;
    for &k in &supported {
        let f = component(k, -1.0);
        let cell = std::cell::RefCell::new(f);
        let g = |q: &[f64]| (cell.borrow_mut())(q);
        let loose = -maximize_on_simplex(&g, &starts, SEARCH_FLOOR);
        let tight = -maximize_on_simplex(&g, &starts, SEARCH_FLOOR_TIGHT);
        if moved(loose, tight) || !(tight > 0.0) {
            return Ok(None);
        }
        min_h = min_h.min(tight);
    }
    h.clear();
    Ok(Some((max_h, min_h)))
}

/// Fixed step size under which the `O(1/t)` potential-gap bound holds.
///
/// Leontief buyers use closed forms. Other kinds are maximized numerically
/// over the simplex; the step is infeasible when a maximum is unbounded
/// (complement CES and Cobb-Douglas demand blows up at the boundary,
/// substitute CES demand vanishes there) or when a linear buyer is present.
pub fn step_size_theoretical(market: &Market, p0: &[f64]) -> Result<TheoreticalStep> {
    check_len(market.num_goods(), p0.len())?;
    check_positive(p0, "p0")?;
    let epsilon = market_elasticity(market).epsilon;
    if !epsilon.is_finite() {
        return Err(Error::Infeasible("theoretical γ undefined for linear buyers".into()));
    }
    let m = market.num_goods();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a7);
    let mut per_good = vec![0.0; m];
    let mut max_hicksian = Vec::with_capacity(market.num_buyers());
    let mut max_ratio = Vec::with_capacity(market.num_buyers());
    for (i, (b, spec)) in market.buyers().enumerate() {
        let Some((max_h, min_h)) = hicksian_extremes(spec, m, &mut rng)? else {
            return Err(Error::Infeasible(format!(
                "buyer {i} ({}) has unbounded hicksian demand extremes on the simplex",
                spec.kind()
            )));
        };
        let v0 = b / expenditure_unit(spec, p0)?;
        let ratios: Vec<f64> = max_h.iter().map(|hj| (hj / min_h).powi(2)).collect();
        for j in 0..m {
            per_good[j] += v0 * max_h[j] + 2.0 * ratios[j];
        }
        max_hicksian.push(max_h);
        max_ratio.push(ratios);
    }
    let factor = elasticity_factor(epsilon);
    let gamma = (1.0 + per_good.iter().cloned().fold(0.0, f64::max)) * factor;
    Ok(TheoreticalStep { gamma, epsilon, elasticity_factor: factor, per_good, max_hicksian, max_ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyConfig {
    Theoretical,
    Adaptive { initial: f64 },
    Fixed { gamma: f64 },
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig::Adaptive { initial: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub max_iters: usize,
    pub policy: PolicyConfig,
    pub kernel: Kernel,
    pub tol: f64,
    pub record_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_iters: 50_000,
            policy: PolicyConfig::default(),
            kernel: Kernel::WeightedEntropy,
            tol: 1e-6,
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Diverged { reason: String },
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max-iterations",
            Termination::Diverged { .. } => "diverged",
        }
    }
}

/// State at iterate `t` and the step taken out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub prices: Vec<f64>,
    pub phi: f64,
    pub max_excess: f64,
    /// `KL(p^{t+1}, p^t)`; NaN on the terminal row.
    pub kl_step: f64,
    /// Step size used out of `t` (the current one on the terminal row).
    pub gamma: f64,
}

/// Per-step checks run on every executed step, independent of row thinning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub steps: usize,
    /// Largest `|log(p_j^{t+1} / p_j^t)|`.
    pub max_abs_log_ratio: f64,
    /// Largest `|p_j^{t+1} - p_j^t| / p_j^t`.
    pub max_rel_change: f64,
    /// Coordinate-steps outside `[e^{-1/5}, e^{1/5}]` or moving more than 1/4.
    pub price_change_violations: usize,
    /// Largest `phi(p^{t+1}) - [phi(p^t) - z.(p^{t+1} - p^t) + gamma KL(p^{t+1}, p^t)]`.
    pub bregman_max_excess: f64,
    pub bregman_violations: usize,
}

impl StepAudit {
    fn record(&mut self, prev: &[f64], next: &[f64], before: &MarketState, after: &MarketState, gamma: f64, kl: f64) {
        self.steps += 1;
        let (lo, hi) = ((-0.2f64).exp(), 0.2f64.exp());
        // one ulp of slack on each side for the rounding of p * exp(.)
        let (lo, hi) = (lo * (1.0 - 4.0 * f64::EPSILON), hi * (1.0 + 4.0 * f64::EPSILON));
        let mut linear_term = 0.0;
        for ((a, b), z) in prev.iter().zip(next).zip(&before.excess) {
            let ratio = b / a;
            let rel = (b - a).abs() / a;
            self.max_abs_log_ratio = self.max_abs_log_ratio.max(ratio.ln().abs());
            self.max_rel_change = self.max_rel_change.max(rel);
            if !(lo..=hi).contains(&ratio) || rel > 0.25 {
                self.price_change_violations += 1;
            }
            linear_term -= z * (b - a);
        }
        let excess = after.phi - (before.phi + linear_term + gamma * kl);
        if self.steps == 1 {
            self.bregman_max_excess = excess;
        } else {
            self.bregman_max_excess = self.bregman_max_excess.max(excess);
        }
        if excess > BREGMAN_SLACK {
            self.bregman_violations += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    pub initial_prices: Vec<f64>,
    pub final_prices: Vec<f64>,
    pub final_phi: f64,
    pub final_max_excess: f64,
    /// Index of the last iterate.
    pub iterations: usize,
    pub termination: Termination,
    pub policy: StepSizePolicy,
    pub kernel: Kernel,
    pub audit: StepAudit,
}

impl Trajectory {
    pub fn phis(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.phi)
    }

    pub fn min_phi(&self) -> f64 {
        self.phis().fold(f64::INFINITY, f64::min)
    }

    /// Largest step size used during the run.
    pub fn max_gamma(&self) -> f64 {
        self.rows.iter().map(|r| r.gamma).fold(self.policy.gamma, f64::max)
    }

    /// Range of `phi` over the recorded iterates in the last `fraction` of the run.
    pub fn tail_range(&self, fraction: f64) -> f64 {
        let start = ((1.0 - fraction) * self.iterations as f64).floor() as usize;
        let (lo, hi) = self
            .rows
            .iter()
            .filter(|r| r.t >= start)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.phi), hi.max(r.phi)));
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }
}

fn is_equilibrium(p: &[f64], state: &MarketState, tol: f64) -> bool {
    p.iter().zip(&state.excess).all(|(pj, zj)| zj.abs() <= tol || (*pj < ZERO_PRICE_THRESHOLD && *zj <= tol))
}

fn state_is_finite(p: &[f64], s: &MarketState) -> bool {
    s.phi.is_finite() && s.demand.iter().all(|d| d.is_finite()) && p.iter().all(|x| x.is_finite() && *x > 0.0)
}

/// Runs tatonnement from `p0` until the excess demand is within `tol`
/// (goods priced below [`ZERO_PRICE_THRESHOLD`] only need `D_j <= 1 + tol`),
/// the iteration budget runs out, or a non-finite value appears.
pub fn run(market: &Market, p0: &[f64], config: &RunConfig) -> Result<Trajectory> {
    check_len(market.num_goods(), p0.len())?;
    check_positive(p0, "p0")?;
    if config.record_every == 0 {
        return Err(Error::Config("record_every must be at least 1".into()));
    }
    if !(config.tol >= 0.0) {
        return Err(Error::Config(format!("tolerance {} must be nonnegative", config.tol)));
    }
    let mut policy = match config.policy {
        PolicyConfig::Theoretical => {
            StepSizePolicy::new(StepMode::Theoretical, step_size_theoretical(market, p0)?.gamma)?
        }
        PolicyConfig::Adaptive { initial } => StepSizePolicy::new(StepMode::Adaptive, initial)?,
        PolicyConfig::Fixed { gamma } => StepSizePolicy::new(StepMode::Fixed, gamma)?,
    };
    let mut evaluator = Evaluator::new(market.num_goods());
    let mut p = p0.to_vec();
    let mut state = evaluator.eval_unchecked(market, &p)?;
    let mut rows = Vec::new();
    let mut audit = StepAudit::default();
    let mut t = 0;
    let termination = loop {
        if !state_is_finite(&p, &state) {
            break Termination::Diverged { reason: format!("non-finite state at t = {t}") };
        }
        if is_equilibrium(&p, &state, config.tol) {
            break Termination::Converged;
        }
        if t >= config.max_iters {
            break Termination::MaxIterations;
        }
        policy = step_size_adaptive_update(policy, t, &state.demand);
        let gamma = policy.gamma;
        let next = match config.kernel {
            Kernel::WeightedEntropy => entropic_update(&p, &state.excess, gamma),
            Kernel::SquaredEuclidean => euclidean_update(&p, &state.excess, gamma),
        };
        if !next.iter().all(|x| x.is_finite() && *x > 0.0) {
            rows.push(row(t, &p, &state, f64::NAN, gamma));
            break Termination::Diverged { reason: format!("price left the positive orthant at t = {}", t + 1) };
        }
        let kl = kl_nonneg(&next, &p);
        if t % config.record_every == 0 {
            rows.push(row(t, &p, &state, kl, gamma));
        }
        let next_state = evaluator.eval_unchecked(market, &next)?;
        audit.record(&p, &next, &state, &next_state, gamma, kl);
        p = next;
        state = next_state;
        t += 1;
    };
    if rows.last().is_none_or(|r| r.t != t) {
        rows.push(row(t, &p, &state, f64::NAN, policy.gamma));
    }
    Ok(Trajectory {
        rows,
        initial_prices: p0.to_vec(),
        final_phi: state.phi,
        final_max_excess: state.max_excess(),
        final_prices: p,
        iterations: t,
        termination,
        policy,
        kernel: config.kernel,
        audit,
    })
}

fn row(t: usize, p: &[f64], state: &MarketState, kl_step: f64, gamma: f64) -> TrajectoryRow {
    TrajectoryRow { t, prices: p.to_vec(), phi: state.phi, max_excess: state.max_excess(), kl_step, gamma }
}

/// Reference optimum for a convergence report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub phi: f64,
    /// Equilibrium prices; needed for the `gamma KL(p*, p0) / t` bound.
    pub prices: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `(t, phi(p^t) - phi*)` for every recorded iterate.
    pub gaps: Vec<(usize, f64)>,
    /// Least-squares slope of `log gap` against `log t` over the second half of the run.
    pub exponent: Option<f64>,
    /// Whether `gap_t <= gamma KL(p*, p0) / t + 1e-9` for every recorded `t >= 1`.
    pub bound_holds: Option<bool>,
    pub bound_violations: usize,
    pub gamma: f64,
    pub kl_initial: Option<f64>,
}

/// Slack for the `gamma KL / t` bound.
pub const BOUND_SLACK: f64 = 1e-9;

/// Least-squares slope of `log g` on `log t` using points with `t >= t_last / 2`,
/// `t >= 1` and `g > 0`.
pub fn tail_log_log_slope(points: &[(usize, f64)]) -> Option<f64> {
    let t_last = points.iter().map(|(t, _)| *t).max()?;
    let cut = (t_last as f64 / 2.0).max(1.0);
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, g)| *t as f64 >= cut && *g > 0.0 && g.is_finite())
        .map(|(t, g)| ((*t as f64).ln(), g.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Gaps to `optimum`, the fitted decay exponent, and the `gamma KL(p*, p0) / t`
/// bound check. Fails when `optimum.phi` exceeds the smallest recorded
/// potential by more than `oracle_tol`.
pub fn convergence_report(traj: &Trajectory, optimum: &Optimum, oracle_tol: f64) -> Result<ConvergenceReport> {
    if traj.rows.is_empty() {
        return Err(Error::Config("empty trajectory".into()));
    }
    let min_phi = traj.min_phi();
    if optimum.phi > min_phi + oracle_tol {
        return Err(Error::InconsistentOracle { phi_star: optimum.phi, min_phi });
    }
    let gaps: Vec<(usize, f64)> = traj.rows.iter().map(|r| (r.t, r.phi - optimum.phi)).collect();
    let exponent = tail_log_log_slope(&gaps);
    let gamma = traj.max_gamma();
    let kl_initial = match &optimum.prices {
        Some(p_star) => Some(crate::potential::kl_divergence_boundary(p_star, &traj.initial_prices)?),
        None => None,
    };
    let mut bound_violations = 0;
    if let Some(kl) = kl_initial {
        for &(t, g) in gaps.iter().filter(|(t, _)| *t >= 1) {
            if g > gamma * kl / t as f64 + BOUND_SLACK {
                bound_violations += 1;
            }
        }
    }
    Ok(ConvergenceReport {
        bound_holds: kl_initial.map(|_| bound_violations == 0),
        gaps,
        exponent,
        bound_violations,
        gamma,
        kl_initial,
    })
}
