//! Reference equilibrium computation, independent of the tatonnement code
//! path: projected-gradient minimization of the potential on the budget
//! simplex, brute-force grid search for up to three goods, and certification
//! of candidate equilibria.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{indirect_utility, marshallian, utility_value};
use crate::error::{check_len, check_positive, Error, Result};
use crate::market::{Allocation, Market};
use crate::potential::{evaluate, potential_closed, Evaluator};
use crate::sampling::uniform_simplex;

/// Goods priced below this fraction of the largest price are treated as free in [`certify`].
pub const NEAR_ZERO_PRICE: f64 = 1e-8;
/// Largest number of goods [`solve_grid`] accepts.
pub const GRID_MAX_GOODS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualConfig {
    /// Iterations per restart.
    pub iters: usize,
    pub restarts: usize,
    /// Target for the projected excess-demand residual.
    pub tol: f64,
    /// Step `c B / sqrt(t)`, with `B` the total budget.
    pub step_scale: f64,
    /// Prices are kept at least `price_floor * B`.
    pub price_floor: f64,
    /// Run even when a linear buyer makes the potential nonsmooth.
    pub allow_nonsmooth: bool,
    pub seed: u64,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            iters: 20_000,
            restarts: 8,
            tol: 1e-9,
            step_scale: 0.1,
            price_floor: 1e-12,
            allow_nonsmooth: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub prices: Vec<f64>,
    pub phi: f64,
    /// Projected excess-demand residual at `prices`.
    pub residual: f64,
    /// Whether `residual <= tol`.
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    pub prices: Vec<f64>,
    pub phi: f64,
    pub resolution: usize,
}

/// Euclidean projection onto `{p : sum p = total, p >= floor}`.
pub fn project_simplex(y: &[f64], total: f64, floor: f64) -> Vec<f64> {
    let m = y.len();
    let mass = total - floor * m as f64;
    let mut u: Vec<f64> = y.iter().map(|v| v - floor).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - mass) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - floor - theta).max(0.0) + floor).collect()
}

/// KKT residual on the scaled simplex: with `lambda` the mean excess demand over
/// goods above the floor, `max |z_j - lambda|` over those goods and
/// `max (z_j - lambda)_+` over goods at the floor.
fn projected_residual(p: &[f64], z: &[f64], floor: f64) -> f64 {
    let at_floor = |pj: f64| pj <= floor * (1.0 + 1e-9);
    let (sum, n) =
        p.iter().zip(z).filter(|(pj, _)| !at_floor(**pj)).fold((0.0, 0usize), |(s, n), (_, zj)| (s + zj, n + 1));
    let lambda = if n > 0 { sum / n as f64 } else { 0.0 };
    p.iter()
        .zip(z)
        .map(|(pj, zj)| if at_floor(*pj) { (zj - lambda).max(0.0) } else { (zj - lambda).abs() })
        .fold(0.0, f64::max)
}

fn dual_restart(market: &Market, start: Vec<f64>, config: &DualConfig) -> Result<DualSolution> {
    let total = market.total_budget();
    let floor = config.price_floor * total;
    let mut ev = Evaluator::new(market.num_goods());
    let mut p = project_simplex(&start, total, floor);
    let mut state = ev.eval(market, &p)?;
    let mut best = DualSolution {
        residual: projected_residual(&p, &state.excess, floor),
        prices: p.clone(),
        phi: state.phi,
        certified: false,
    };
    let diminishing = if market.has_linear_buyer() { config.iters } else { config.iters.min(DIMINISHING_ITERS) };
    for t in 1..=diminishing {
        if best.residual <= config.tol {
            break;
        }
        let eta = config.step_scale * total / (t as f64).sqrt();
        let y: Vec<f64> = p.iter().zip(&state.excess).map(|(pj, zj)| pj + eta * zj).collect();
        p = project_simplex(&y, total, floor);
        state = ev.eval(market, &p)?;
        let residual = projected_residual(&p, &state.excess, floor);
        if state.phi < best.phi || (state.phi == best.phi && residual < best.residual) {
            best = DualSolution { prices: p.clone(), phi: state.phi, residual, certified: false };
        }
    }
    if !market.has_linear_buyer() {
        let budget = config.iters - diminishing;
        best = polish(market, &mut ev, best, budget / 2, floor, config)?;
        if best.residual > config.tol {
            best = polish_entropic(market, &mut ev, best, budget - budget / 2, floor, config)?;
        }
    }
    best.certified = best.residual <= config.tol;
    Ok(best)
}

/// Iterations of the `c / sqrt(t)` phase before switching to backtracking steps.
const DIMINISHING_ITERS: usize = 2_000;

/// Projected gradient with Armijo backtracking from `start`. The potential is
/// smooth without linear buyers, so this converges linearly where the
/// diminishing-step phase only creeps. Steps within rounding noise of the
/// sufficient-decrease test are accepted only if they shrink the residual.
fn polish(
    market: &Market,
    ev: &mut Evaluator,
    start: DualSolution,
    iters: usize,
    floor: f64,
    config: &DualConfig,
) -> Result<DualSolution> {
    let total = market.total_budget();
    let mut best = start;
    let mut p = best.prices.clone();
    let mut state = ev.eval(market, &p)?;
    let mut eta = config.step_scale * total;
    for _ in 0..iters {
        if best.residual <= config.tol || eta < 1e-30 * total {
            break;
        }
        let noise = 16.0 * f64::EPSILON * (state.phi.abs() + total);
        loop {
            let y: Vec<f64> = p.iter().zip(&state.excess).map(|(pj, zj)| pj + eta * zj).collect();
            let q = project_simplex(&y, total, floor);
            let next = ev.eval(market, &q)?;
            let mut lin = 0.0;
            let mut sq = 0.0;
            for ((a, b), z) in q.iter().zip(&p).zip(&state.excess) {
                lin -= z * (a - b);
                sq += (a - b) * (a - b);
            }
            let bound = state.phi + lin + sq / (2.0 * eta);
            if next.phi.is_finite() && next.phi <= bound {
                p = q;
                state = next;
                eta *= 2.0;
                break;
            }
            let current = projected_residual(&p, &state.excess, floor);
            if next.phi <= bound + noise && projected_residual(&q, &next.excess, floor) < current {
                p = q;
                state = next;
                break;
            }
            eta *= 0.5;
            if eta < 1e-30 * total {
                break;
            }
        }
        let residual = projected_residual(&p, &state.excess, floor);
        if residual < best.residual {
            best = DualSolution { prices: p.clone(), phi: state.phi, residual, certified: false };
        }
    }
    Ok(best)
}

/// `p_j exp(eta z_j)` rescaled to sum `total`, with entries below `floor`
/// raised to it and the rest rescaled to keep the sum.
fn entropic_point(p: &[f64], z: &[f64], eta: f64, total: f64, floor: f64) -> Vec<f64> {
    let logs: Vec<f64> = p.iter().zip(z).map(|(pj, zj)| pj.ln() + eta * zj).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let mut q: Vec<f64> = logs.iter().map(|l| total * (l - max).exp() / sum).collect();
    let low = q.iter().filter(|x| **x <= floor).count();
    if low > 0 {
        let rest: f64 = q.iter().filter(|x| **x > floor).sum();
        let scale = (total - floor * low as f64) / rest;
        q.iter_mut().for_each(|x| *x = if *x <= floor { floor } else { *x * scale });
    }
    q
}

/// Exponentiated-gradient steps with backtracking on the model
/// `phi(p) - z.(q - p) + KL(q, p) / eta`. Near-zero prices shrink
/// geometrically here, where Euclidean steps stall against curvature that
/// grows like `1 / p_j`.
fn polish_entropic(
    market: &Market,
    ev: &mut Evaluator,
    start: DualSolution,
    iters: usize,
    floor: f64,
    config: &DualConfig,
) -> Result<DualSolution> {
    let total = market.total_budget();
    let mut best = start;
    let mut p = best.prices.clone();
    let mut state = ev.eval(market, &p)?;
    let mut eta = 1.0;
    for _ in 0..iters {
        if best.residual <= config.tol || eta < 1e-30 {
            break;
        }
        let noise = 16.0 * f64::EPSILON * (state.phi.abs() + total);
        loop {
            let q = entropic_point(&p, &state.excess, eta, total, floor);
            let next = ev.eval(market, &q)?;
            let mut lin = 0.0;
            let mut kl = 0.0;
            for ((a, b), z) in q.iter().zip(&p).zip(&state.excess) {
                lin -= z * (a - b);
                kl += a * (a / b).ln() - a + b;
            }
            let bound = state.phi + lin + kl / eta;
            if next.phi.is_finite() && next.phi <= bound {
                p = q;
                state = next;
                eta *= 2.0;
                break;
            }
            let current = projected_residual(&p, &state.excess, floor);
            if next.phi <= bound + noise && projected_residual(&q, &next.excess, floor) < current {
                p = q;
                state = next;
                break;
            }
            eta *= 0.5;
            if eta < 1e-30 {
                break;
            }
        }
        let residual = projected_residual(&p, &state.excess, floor);
        if state.phi <= best.phi + noise && residual < best.residual {
            best = DualSolution { prices: p.clone(), phi: state.phi, residual, certified: false };
        }
    }
    Ok(best)
}

/// Minimizes the potential over `{p >= 0 : sum p = sum b}` by projected gradient
/// descent from several Dirichlet(1) starts and returns the best point found.
/// Steps are `c B / sqrt(t)`; without linear buyers this phase is capped and
/// followed by backtracking steps. `certified` is false when the projected excess
/// demand there is still above `tol`.
pub fn solve_dual(market: &Market, config: &DualConfig) -> Result<DualSolution> {
    if market.has_linear_buyer() && !config.allow_nonsmooth {
        return Err(Error::Unsupported(
            "potential is nonsmooth with linear buyers; set allow_nonsmooth or use the grid oracle".into(),
        ));
    }
    if config.restarts == 0 {
        return Err(Error::Config("at least one restart is required".into()));
    }
    let m = market.num_goods();
    let total = market.total_budget();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let starts: Vec<Vec<f64>> = (0..config.restarts)
        .map(|_| uniform_simplex(&mut rng, m, 0.0).into_iter().map(|x| x * total).collect())
        .collect();
    let results = starts.into_par_iter().map(|s| dual_restart(market, s, config)).collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().min_by(|a, b| a.phi.total_cmp(&b.phi)).expect("restarts > 0"))
}

/// Points of the simplex grid with `resolution` points per edge, as integer
/// coordinates summing to `resolution - 1`.
fn grid_points(m: usize, resolution: usize) -> Vec<Vec<usize>> {
    let n = resolution - 1;
    match m {
        1 => vec![vec![n]],
        2 => (0..=n).map(|k| vec![k, n - k]).collect(),
        _ => (0..=n).flat_map(|a| (0..=n - a).map(move |b| vec![a, b, n - a - b])).collect(),
    }
}

/// Exhaustive minimization of the potential over the simplex grid scaled to
/// the total budget, boundary included (zero prices are allowed there).
pub fn solve_grid(market: &Market, resolution: usize) -> Result<GridSolution> {
    let m = market.num_goods();
    if m > GRID_MAX_GOODS {
        return Err(Error::Unsupported(format!("grid oracle supports at most {GRID_MAX_GOODS} goods, got {m}")));
    }
    if m == 0 || resolution < 2 {
        return Err(Error::Config(format!("resolution {resolution} is too coarse for {m} goods")));
    }
    let scale = market.total_budget() / (resolution - 1) as f64;
    let best = grid_points(m, resolution)
        .into_par_iter()
        .filter_map(|k| {
            let p: Vec<f64> = k.iter().map(|&kj| kj as f64 * scale).collect();
            potential_closed(market, &p).ok().map(|phi| (phi, p))
        })
        .filter(|(phi, _)| phi.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.partial_cmp(&b.1).unwrap()));
    let (phi, prices) = best.ok_or_else(|| Error::Domain("potential is infinite on every grid point".into()))?;
    Ok(GridSolution { prices, phi, resolution })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMethod {
    DualMinimization,
    Grid,
    /// Prices supplied by the caller (e.g. a tatonnement iterate).
    Supplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `max_i (v_i(p, b_i) - u_i(x_i)) / v_i(p, b_i)`.
    pub optimality_gap: f64,
    /// `max_j |D_j - 1|` on priced goods, `(D_j - 1)_+` on near-free goods.
    pub clearing: f64,
    /// `max_i |p . x_i - b_i| / b_i`.
    pub walras: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.optimality_gap.max(self.clearing).max(self.walras)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCertificate {
    pub prices: Vec<f64>,
    pub allocation: Allocation,
    pub residuals: Residuals,
    pub method: CertificateMethod,
    pub tol: f64,
    pub valid: bool,
}

/// Checks `(p, x)` against the equilibrium conditions: each bundle is optimal
/// within budget and every good with a non-negligible price clears.
pub fn certify_allocation(
    market: &Market,
    p: &[f64],
    allocation: Allocation,
    tol: f64,
    method: CertificateMethod,
) -> Result<EquilibriumCertificate> {
    let m = market.num_goods();
    check_len(m, p.len())?;
    check_positive(p, "p")?;
    check_len(market.num_buyers(), allocation.rows.len())?;
    let mut optimality_gap: f64 = 0.0;
    let mut walras: f64 = 0.0;
    for ((b, spec), x) in market.buyers().zip(&allocation.rows) {
        check_len(m, x.len())?;
        let v = indirect_utility(spec, p, b)?;
        let u = utility_value(spec, x);
        optimality_gap = optimality_gap.max(((v - u) / v).max(0.0));
        let spent: f64 = p.iter().zip(x).map(|(pj, xj)| pj * xj).sum();
        walras = walras.max((spent - b).abs() / b);
    }
    let pmax = p.iter().cloned().fold(0.0, f64::max);
    let clearing = allocation
        .column_sums(m)
        .iter()
        .zip(p)
        .map(|(d, pj)| if *pj > NEAR_ZERO_PRICE * pmax { (d - 1.0).abs() } else { (d - 1.0).max(0.0) })
        .fold(0.0, f64::max);
    let residuals = Residuals { optimality_gap, clearing, walras };
    Ok(EquilibriumCertificate { prices: p.to_vec(), allocation, valid: residuals.max() <= tol, residuals, method, tol })
}

/// Certifies `p` using each buyer's Marshallian demand as the allocation.
pub fn certify(market: &Market, p: &[f64], tol: f64) -> Result<EquilibriumCertificate> {
    certify_with_method(market, p, tol, CertificateMethod::Supplied)
}

pub fn certify_with_method(
    market: &Market,
    p: &[f64],
    tol: f64,
    method: CertificateMethod,
) -> Result<EquilibriumCertificate> {
    check_len(market.num_goods(), p.len())?;
    check_positive(p, "p")?;
    let rows =
        market.buyers().map(|(b, spec)| marshallian(spec, p, b).map(|d| d.values)).collect::<Result<Vec<_>>>()?;
    certify_allocation(market, p, Allocation { rows }, tol, method)
}

/// Potential and excess-demand sup-norm at `p`; a convenience for reports.
pub fn summarize(market: &Market, p: &[f64]) -> Result<(f64, f64)> {
    let s = evaluate(market, p)?;
    Ok((s.phi, s.max_excess()))
}
