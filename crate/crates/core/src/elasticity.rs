//! Price elasticity of Hicksian demand and the market parameter epsilon.
//!
//! For CES-type utilities `E_jk = sigma (s_k - [j == k])`, where `s_k` is the
//! expenditure share of good `k`; its supremum over prices is `sigma`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demand::{hicksian, unit_eval};
use crate::error::{check_len, check_positive, Error, Result};
use crate::market::{Market, UtilitySpec};
use crate::sampling::uniform_simplex;

/// Relative (log-space) step for finite-difference elasticities.
pub const ELASTICITY_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Analytic,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityBound {
    /// Max over buyers; infinite when a linear buyer is present.
    pub epsilon: f64,
    pub per_buyer: Vec<f64>,
    pub method: BoundMethod,
}

/// `h_j(p, u)`, through the unit demand and homogeneity in the utility level.
fn hicksian_component(spec: &UtilitySpec, p: &[f64], u: f64, j: usize, h: &mut [f64]) -> Result<f64> {
    unit_eval(spec, p, h)?;
    Ok(u * h[j])
}

/// Central finite-difference estimate of `d log h_j / d log p_k` at utility level one.
pub fn hicksian_elasticity_fd(spec: &UtilitySpec, p: &[f64], j: usize, k: usize) -> Result<f64> {
    hicksian_elasticity_fd_at(spec, p, 1.0, j, k)
}

/// Same as [`hicksian_elasticity_fd`] but differentiating `h(p, u)` at utility level `u`.
pub fn hicksian_elasticity_fd_at(spec: &UtilitySpec, p: &[f64], u: f64, j: usize, k: usize) -> Result<f64> {
    if let UtilitySpec::Linear { .. } = spec {
        return Err(Error::Unsupported("linear hicksian demand is not differentiable in prices".into()));
    }
    if let Some(v) = spec.values() {
        check_len(v.len(), p.len())?;
    }
    check_positive(p, "p")?;
    if j >= p.len() || k >= p.len() {
        return Err(Error::Dimension { expected: p.len(), got: j.max(k) + 1 });
    }
    let mut h = vec![0.0; p.len()];
    let base = hicksian_component(spec, p, u, j, &mut h)?;
    if base <= 0.0 {
        return Err(Error::UndefinedElasticity { good: j });
    }
    let d = ELASTICITY_FD_STEP;
    let mut q = p.to_vec();
    q[k] = p[k] * (1.0 + d);
    let up = hicksian_component(spec, &q, u, j, &mut h)?;
    q[k] = p[k] * (1.0 - d);
    let down = hicksian_component(spec, &q, u, j, &mut h)?;
    Ok((up.ln() - down.ln()) / ((1.0 + d).ln() - (1.0 - d).ln()))
}

/// Finite-difference `d log h_j(p, u) / d log u` at `u`; one for homothetic utilities.
pub fn utility_level_elasticity_fd(spec: &UtilitySpec, p: &[f64], u: f64, j: usize) -> Result<f64> {
    let d = ELASTICITY_FD_STEP;
    let base = hicksian(spec, p, u)?.values[j];
    if base <= 0.0 {
        return Err(Error::UndefinedElasticity { good: j });
    }
    let up = hicksian(spec, p, u * (1.0 + d))?.values[j];
    let down = hicksian(spec, p, u * (1.0 - d))?.values[j];
    Ok((up.ln() - down.ln()) / ((1.0 + d).ln() - (1.0 - d).ln()))
}

/// Supremum over prices of `|E_jk|`: 0 for Leontief, 1 for Cobb-Douglas,
/// `sigma` for CES, the largest node `sigma` for nested CES, infinite for linear.
pub fn elasticity_bound(spec: &UtilitySpec) -> f64 {
    spec.sigma()
}

pub fn market_elasticity(market: &Market) -> ElasticityBound {
    let per_buyer: Vec<f64> = market.utilities().iter().map(elasticity_bound).collect();
    let epsilon = per_buyer.iter().cloned().fold(0.0, f64::max);
    ElasticityBound { epsilon, per_buyer, method: BoundMethod::Analytic }
}

/// Largest `|E_jk|` over all good pairs with `h_j > 0` at `p`.
pub fn max_abs_elasticity_at(spec: &UtilitySpec, p: &[f64]) -> Result<f64> {
    let mut h = vec![0.0; p.len()];
    unit_eval(spec, p, &mut h)?;
    let mut worst: f64 = 0.0;
    for j in (0..p.len()).filter(|&j| h[j] > 0.0) {
        for k in 0..p.len() {
            worst = worst.max(hicksian_elasticity_fd(spec, p, j, k)?.abs());
        }
    }
    Ok(worst)
}

/// Largest `|E_jk|` seen over `samples` uniform draws from the price simplex.
pub fn sampled_max_elasticity<R: Rng + ?Sized>(
    spec: &UtilitySpec,
    num_goods: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let p = uniform_simplex(rng, num_goods, 1e-300);
        worst = worst.max(max_abs_elasticity_at(spec, &p)?);
    }
    Ok(worst)
}

/// Per-buyer sampled bounds for a market (linear buyers report infinity).
pub fn sampled_market_elasticity<R: Rng + ?Sized>(
    market: &Market,
    samples: usize,
    rng: &mut R,
) -> Result<ElasticityBound> {
    let mut per_buyer = Vec::with_capacity(market.num_buyers());
    for spec in market.utilities() {
        per_buyer.push(match spec {
            UtilitySpec::Linear { .. } => f64::INFINITY,
            _ => sampled_max_elasticity(spec, market.num_goods(), samples, rng)?,
        });
    }
    let epsilon = per_buyer.iter().cloned().fold(0.0, f64::max);
    Ok(ElasticityBound { epsilon, per_buyer, method: BoundMethod::Sampled })
}
