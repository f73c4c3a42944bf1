//! Convex potential of a homothetic Fisher market, the Eisenberg-Gale dual,
//! excess demand and the generalized KL divergence.
//!
//! The potential is `phi(p) = sum_j p_j - sum_i b_i log e_i(p, 1)`. Its gradient
//! is the negative excess demand, so entropic mirror descent on `phi` is
//! tatonnement, and its minimizers are equilibrium prices.

use serde::{Deserialize, Serialize};

use crate::demand::{dot, marshallian_from_unit, unit_eval};
use crate::error::{check_len, check_positive, Error, Result};
use crate::market::{Market, UtilitySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialValue {
    pub phi: f64,
    /// `b_i log e_i(p, 1)` per buyer.
    pub buyer_terms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessDemand {
    /// Aggregate Marshallian demand `D(p)`.
    pub demand: Vec<f64>,
    /// `z = D - 1`.
    pub excess: Vec<f64>,
}

impl ExcessDemand {
    pub fn max_norm(&self) -> f64 {
        self.excess.iter().fold(0.0, |a, z| a.max(z.abs()))
    }
}

/// Potential, aggregate demand and excess demand at one price vector,
/// computed with a single pass over the buyers.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub phi: f64,
    pub demand: Vec<f64>,
    pub excess: Vec<f64>,
    /// `e_i(p, 1)` per buyer.
    pub unit_costs: Vec<f64>,
}

impl MarketState {
    pub fn max_excess(&self) -> f64 {
        self.excess.iter().fold(0.0, |a, z| a.max(z.abs()))
    }

    pub fn max_demand(&self) -> f64 {
        self.demand.iter().cloned().fold(0.0, f64::max)
    }
}

/// Reusable scratch space for repeated market evaluations.
#[derive(Debug, Clone)]
pub struct Evaluator {
    h: Vec<f64>,
    x: Vec<f64>,
}

impl Evaluator {
    pub fn new(num_goods: usize) -> Self {
        Evaluator { h: vec![0.0; num_goods], x: vec![0.0; num_goods] }
    }

    /// Evaluates the market at `p`, which the caller guarantees is positive and of length m.
    pub(crate) fn eval_unchecked(&mut self, market: &Market, p: &[f64]) -> Result<MarketState> {
        let m = market.num_goods();
        let mut demand = vec![0.0; m];
        let mut unit_costs = Vec::with_capacity(market.num_buyers());
        let mut phi: f64 = p.iter().sum();
        for (b, spec) in market.buyers() {
            let e = unit_eval(spec, p, &mut self.h)?;
            marshallian_from_unit(spec, p, b, e, &self.h, &mut self.x)?;
            for (d, x) in demand.iter_mut().zip(&self.x) {
                *d += x;
            }
            phi -= b * e.ln();
            unit_costs.push(e);
        }
        let excess = demand.iter().map(|d| d - 1.0).collect();
        Ok(MarketState { phi, demand, excess, unit_costs })
    }

    pub fn eval(&mut self, market: &Market, p: &[f64]) -> Result<MarketState> {
        check_len(market.num_goods(), p.len())?;
        check_positive(p, "p")?;
        self.eval_unchecked(market, p)
    }
}

/// Evaluates potential and excess demand together.
pub fn evaluate(market: &Market, p: &[f64]) -> Result<MarketState> {
    Evaluator::new(market.num_goods()).eval(market, p)
}

pub fn potential(market: &Market, p: &[f64]) -> Result<PotentialValue> {
    check_len(market.num_goods(), p.len())?;
    check_positive(p, "p")?;
    let mut h = vec![0.0; p.len()];
    let mut buyer_terms = Vec::with_capacity(market.num_buyers());
    for (b, spec) in market.buyers() {
        buyer_terms.push(b * unit_eval(spec, p, &mut h)?.ln());
    }
    let phi = p.iter().sum::<f64>() - buyer_terms.iter().sum::<f64>();
    Ok(PotentialValue { phi, buyer_terms })
}

/// Potential on the closed orthant. Zero prices are allowed; the value is
/// `+inf` wherever some buyer can reach utility at zero cost.
pub fn potential_closed(market: &Market, p: &[f64]) -> Result<f64> {
    check_len(market.num_goods(), p.len())?;
    if let Some(j) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain(format!("p[{j}] = {} is negative or non-finite", p[j])));
    }
    let mut h = vec![0.0; p.len()];
    let mut phi: f64 = p.iter().sum();
    for (b, spec) in market.buyers() {
        let e = match spec {
            UtilitySpec::Leontief { values } => dot(values, p),
            _ => unit_eval(spec, p, &mut h)?,
        };
        if !(e > 0.0) {
            return Ok(f64::INFINITY);
        }
        phi -= b * e.ln();
    }
    Ok(phi)
}

/// `sum_i (b_i log b_i - b_i)`, the constant separating the EG dual from the potential.
pub fn eg_offset(market: &Market) -> f64 {
    market.budgets().iter().map(|b| b * b.ln() - b).sum()
}

/// Eisenberg-Gale dual objective `sum_j p_j + sum_i (b_i log v_i(p, b_i) - b_i)`.
pub fn eg_dual(market: &Market, p: &[f64]) -> Result<f64> {
    check_len(market.num_goods(), p.len())?;
    check_positive(p, "p")?;
    let mut h = vec![0.0; p.len()];
    let mut total: f64 = p.iter().sum();
    for (b, spec) in market.buyers() {
        let v = b / unit_eval(spec, p, &mut h)?;
        total += b * v.ln() - b;
    }
    Ok(total)
}

pub fn excess_demand(market: &Market, p: &[f64]) -> Result<ExcessDemand> {
    let s = evaluate(market, p)?;
    Ok(ExcessDemand { demand: s.demand, excess: s.excess })
}

/// Generalized KL divergence `sum x log(x/y) - x + y` for strictly positive vectors.
pub fn kl_divergence(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    check_positive(x, "x")?;
    check_positive(y, "y")?;
    Ok(kl_nonneg(x, y))
}

/// Generalized KL divergence allowing zeros in `x` (with `0 log 0 = 0`).
/// Used against equilibrium prices, which may sit on the boundary.
pub fn kl_divergence_boundary(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    check_positive(y, "y")?;
    if let Some(j) = x.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain(format!("x[{j}] = {} is negative or non-finite", x[j])));
    }
    Ok(kl_nonneg(x, y))
}

pub(crate) fn kl_nonneg(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() - a + b } else { b }).sum()
}

/// Outcome of comparing finite differences of the potential with `-z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SubgradientCheck {
    /// Largest `|fd_j + z_j| / max(1, |z_j|)` over goods.
    Checked { max_rel_error: f64 },
    /// The potential is not differentiable near `p` (a linear buyer is close to a tie).
    Skipped { reason: String },
}

impl SubgradientCheck {
    pub fn error(&self) -> Option<f64> {
        match self {
            SubgradientCheck::Checked { max_rel_error } => Some(*max_rel_error),
            SubgradientCheck::Skipped { .. } => None,
        }
    }
}

/// Relative gap between the best and second-best bang-per-buck of a linear buyer.
fn linear_tie_gap(values: &[f64], p: &[f64]) -> f64 {
    let mut ratios: Vec<f64> = values.iter().zip(p).filter(|(v, _)| **v > 0.0).map(|(v, pj)| v / pj).collect();
    if ratios.len() < 2 {
        return f64::INFINITY;
    }
    ratios.sort_by(|a, b| b.total_cmp(a));
    (ratios[0] - ratios[1]) / ratios[0]
}

/// Central finite differences of the potential with relative step `rel_step`
/// in each coordinate, compared against the negative excess demand.
pub fn subgradient_check(market: &Market, p: &[f64], rel_step: f64) -> Result<SubgradientCheck> {
    check_len(market.num_goods(), p.len())?;
    check_positive(p, "p")?;
    // A perturbation of relative size `rel_step` can move a bang-per-buck ratio
    // by the same relative amount, so ties closer than that are skipped too.
    let tie_threshold = f64::max(1e-8, 2.0 * rel_step);
    for (i, spec) in market.utilities().iter().enumerate() {
        if let UtilitySpec::Linear { values } = spec {
            let gap = linear_tie_gap(values, p);
            if gap < tie_threshold {
                return Ok(SubgradientCheck::Skipped {
                    reason: format!("buyer {i} is within {gap:.3e} of a bang-per-buck tie"),
                });
            }
        }
    }
    let state = evaluate(market, p)?;
    let mut q = p.to_vec();
    let mut worst: f64 = 0.0;
    for j in 0..p.len() {
        let step = rel_step * p[j];
        q[j] = p[j] + step;
        let up = potential(market, &q)?.phi;
        q[j] = p[j] - step;
        let down = potential(market, &q)?.phi;
        q[j] = p[j];
        let fd = (up - down) / (2.0 * step);
        let z = state.excess[j];
        worst = worst.max((fd + z).abs() / z.abs().max(1.0));
    }
    Ok(SubgradientCheck::Checked { max_rel_error: worst })
}
