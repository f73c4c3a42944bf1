//! Closed-form consumer functions for homothetic utilities.
//!
//! Everything is derived from the unit expenditure function `e(p, 1)` and the
//! unit Hicksian demand `h(p, 1) = grad_p e(p, 1)`:
//!
//! * `e(p, u) = u e(p, 1)` and `h(p, u) = u h(p, 1)` (homogeneity),
//! * indirect utility `v(p, b) = b / e(p, 1)`,
//! * Marshallian demand `x(p, b) = b h(p, 1) / e(p, 1)`.
//!
//! CES price indices are evaluated in log space so that elasticities of
//! substitution far from one do not overflow.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, check_positive, Error, Result};
use crate::market::{argmax_set, NestChild, NestNode, UtilitySpec, RHO_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandContext {
    Marshallian { budget: f64 },
    Hicksian { utility: f64 },
}

/// A demand bundle together with the point it was evaluated at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandVector {
    pub values: Vec<f64>,
    pub context: DemandContext,
    pub prices: Vec<f64>,
}

impl DemandVector {
    /// `p . d`
    pub fn cost(&self) -> f64 {
        dot(&self.values, &self.prices)
    }
}

/// Elasticity of substitution `sigma = 1 / (1 - rho)` of a utility.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SubstitutionParam(pub f64);

impl SubstitutionParam {
    pub fn of(spec: &UtilitySpec) -> Self {
        SubstitutionParam(spec.sigma())
    }

    pub fn from_rho(rho: f64) -> Self {
        SubstitutionParam(1.0 / (1.0 - rho))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn spec_dim(spec: &UtilitySpec) -> Option<usize> {
    spec.values().map(|v| v.len())
}

fn check_inputs(spec: &UtilitySpec, p: &[f64]) -> Result<()> {
    if let Some(m) = spec_dim(spec) {
        check_len(m, p.len())?;
    }
    check_positive(p, "p")
}

/// Log of a CES price index `(sum w_c^sigma e_c^{1-sigma})^{1/(1-sigma)}`, or of
/// the Cobb-Douglas index when `|rho|` is below the canonicalization threshold.
fn log_price_index(rho: f64, weights: &[f64], log_costs: &[f64]) -> f64 {
    if rho.abs() < RHO_EPS {
        let total: f64 = weights.iter().sum();
        return weights
            .iter()
            .zip(log_costs)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, lc)| {
                let a = w / total;
                a * (lc - a.ln())
            })
            .sum();
    }
    let sigma = 1.0 / (1.0 - rho);
    let terms = weights
        .iter()
        .zip(log_costs)
        .filter(|(w, _)| **w > 0.0)
        .map(move |(w, lc)| sigma * w.ln() + (1.0 - sigma) * lc);
    log_sum_exp(terms) / (1.0 - sigma)
}

/// Hicksian demand of child `c` per unit of the aggregate, given the aggregate's
/// log unit cost.
fn child_unit_demand(rho: f64, weights: &[f64], log_costs: &[f64], log_e: f64, c: usize) -> f64 {
    let w = weights[c];
    if w <= 0.0 {
        return 0.0;
    }
    if rho.abs() < RHO_EPS {
        let a = w / weights.iter().sum::<f64>();
        return a * (log_e - log_costs[c]).exp();
    }
    let sigma = 1.0 / (1.0 - rho);
    (sigma * (w.ln() - log_costs[c] + log_e)).exp()
}

fn child_log_cost(child: &NestChild, p: &[f64]) -> f64 {
    match child {
        NestChild::Good(g) => p[*g].ln(),
        NestChild::Node(n) => node_log_cost(n, p),
    }
}

fn node_log_cost(node: &NestNode, p: &[f64]) -> f64 {
    let lcs: Vec<f64> = node.children.iter().map(|c| child_log_cost(c, p)).collect();
    log_price_index(node.rho, &node.weights, &lcs)
}

/// Pushes `quantity` units of the node aggregate down to the leaves.
fn node_distribute(node: &NestNode, p: &[f64], log_e: f64, quantity: f64, h: &mut [f64]) {
    let lcs: Vec<f64> = node.children.iter().map(|c| child_log_cost(c, p)).collect();
    for (c, child) in node.children.iter().enumerate() {
        let q = quantity * child_unit_demand(node.rho, &node.weights, &lcs, log_e, c);
        if q == 0.0 {
            continue;
        }
        match child {
            NestChild::Good(g) => h[*g] += q,
            NestChild::Node(n) => node_distribute(n, p, lcs[c], q, h),
        }
    }
}

fn max_goods_index(node: &NestNode) -> usize {
    node.children
        .iter()
        .map(|c| match c {
            NestChild::Good(g) => *g,
            NestChild::Node(n) => max_goods_index(n),
        })
        .max()
        .unwrap_or(0)
}

fn linear_best(values: &[f64], p: &[f64]) -> Result<Vec<usize>> {
    if !values.iter().any(|v| *v > 0.0) {
        return Err(Error::DegenerateUtility("linear utility with all-zero valuations".into()));
    }
    let ratios: Vec<f64> =
        values.iter().zip(p).map(|(v, pj)| if *v > 0.0 { v / pj } else { f64::NEG_INFINITY }).collect();
    Ok(argmax_set(&ratios, |r| r))
}

/// Evaluates `e(p, 1)` and writes `h(p, 1)` into `h`. Linear ties go to the
/// lowest index. Inputs are assumed checked.
pub(crate) fn unit_eval(spec: &UtilitySpec, p: &[f64], h: &mut [f64]) -> Result<f64> {
    h.iter_mut().for_each(|x| *x = 0.0);
    match spec {
        UtilitySpec::Leontief { values } => {
            h.copy_from_slice(values);
            let e = dot(values, p);
            if e <= 0.0 {
                return Err(Error::DegenerateUtility("leontief utility with all-zero valuations".into()));
            }
            Ok(e)
        }
        UtilitySpec::Linear { values } => {
            let best = linear_best(values, p)?;
            let j = best[0];
            h[j] = 1.0 / values[j];
            Ok(p[j] / values[j])
        }
        UtilitySpec::CobbDouglas { values } => {
            let total: f64 = values.iter().sum();
            if total <= 0.0 {
                return Err(Error::DegenerateUtility("cobb-douglas with all-zero exponents".into()));
            }
            let log_e: f64 = values
                .iter()
                .zip(p)
                .filter(|(a, _)| **a > 0.0)
                .map(|(a, pj)| {
                    let a = a / total;
                    a * (pj.ln() - a.ln())
                })
                .sum();
            let e = log_e.exp();
            for ((hj, a), pj) in h.iter_mut().zip(values).zip(p) {
                if *a > 0.0 {
                    *hj = a / total * e / pj;
                }
            }
            Ok(e)
        }
        UtilitySpec::Ces { values, rho } => {
            if !values.iter().any(|v| *v > 0.0) {
                return Err(Error::DegenerateUtility("ces utility with all-zero valuations".into()));
            }
            let sigma = 1.0 / (1.0 - rho);
            let log_e = log_sum_exp(
                values.iter().zip(p).filter(|(v, _)| **v > 0.0).map(|(v, pj)| sigma * v.ln() + (1.0 - sigma) * pj.ln()),
            ) / (1.0 - sigma);
            for ((hj, v), pj) in h.iter_mut().zip(values).zip(p) {
                if *v > 0.0 {
                    *hj = (sigma * (v.ln() - pj.ln() + log_e)).exp();
                }
            }
            Ok(log_e.exp())
        }
        UtilitySpec::NestedCes { root } => {
            if max_goods_index(root) >= p.len() {
                return Err(Error::Dimension { expected: max_goods_index(root) + 1, got: p.len() });
            }
            let log_e = node_log_cost(root, p);
            node_distribute(root, p, log_e, 1.0, h);
            Ok(log_e.exp())
        }
    }
}

/// Minimum cost of one unit of utility, `e(p, 1)`.
pub fn expenditure_unit(spec: &UtilitySpec, p: &[f64]) -> Result<f64> {
    check_inputs(spec, p)?;
    let mut h = vec![0.0; p.len()];
    unit_eval(spec, p, &mut h)
}

/// Minimum cost of reaching utility `u`, `u e(p, 1)`.
pub fn expenditure(spec: &UtilitySpec, p: &[f64], u: f64) -> Result<f64> {
    Ok(u * expenditure_unit(spec, p)?)
}

/// Cost-minimizing bundle reaching one unit of utility.
pub fn hicksian_unit(spec: &UtilitySpec, p: &[f64]) -> Result<DemandVector> {
    hicksian(spec, p, 1.0)
}

/// Cost-minimizing bundle reaching utility `u`.
pub fn hicksian(spec: &UtilitySpec, p: &[f64], u: f64) -> Result<DemandVector> {
    check_inputs(spec, p)?;
    let mut h = vec![0.0; p.len()];
    unit_eval(spec, p, &mut h)?;
    if u != 1.0 {
        h.iter_mut().for_each(|x| *x *= u);
    }
    Ok(DemandVector { values: h, context: DemandContext::Hicksian { utility: u }, prices: p.to_vec() })
}

/// Maximum utility affordable with budget `b`, `b / e(p, 1)`.
pub fn indirect_utility(spec: &UtilitySpec, p: &[f64], b: f64) -> Result<f64> {
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::Domain(format!("budget {b} must be finite and nonnegative")));
    }
    let e = expenditure_unit(spec, p)?;
    Ok(b / e)
}

/// Writes the Marshallian demand for budget `b` into `x`, given a unit
/// evaluation `(e, h)` at the same prices. Linear ties split the budget evenly.
pub(crate) fn marshallian_from_unit(
    spec: &UtilitySpec,
    p: &[f64],
    b: f64,
    e: f64,
    h: &[f64],
    x: &mut [f64],
) -> Result<()> {
    if let UtilitySpec::Linear { values } = spec {
        x.iter_mut().for_each(|v| *v = 0.0);
        let best = linear_best(values, p)?;
        let share = b / best.len() as f64;
        for j in best {
            x[j] = share / p[j];
        }
        return Ok(());
    }
    let scale = b / e;
    for (xj, hj) in x.iter_mut().zip(h) {
        *xj = scale * hj;
    }
    Ok(())
}

/// Utility-maximizing bundle for budget `b`, `b h(p, 1) / e(p, 1)`.
pub fn marshallian(spec: &UtilitySpec, p: &[f64], b: f64) -> Result<DemandVector> {
    check_inputs(spec, p)?;
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::Domain(format!("budget {b} must be finite and nonnegative")));
    }
    let mut h = vec![0.0; p.len()];
    let e = unit_eval(spec, p, &mut h)?;
    let mut x = vec![0.0; p.len()];
    marshallian_from_unit(spec, p, b, e, &h, &mut x)?;
    Ok(DemandVector { values: x, context: DemandContext::Marshallian { budget: b }, prices: p.to_vec() })
}

fn node_utility(node: &NestNode, x: &[f64]) -> f64 {
    let us: Vec<f64> = node
        .children
        .iter()
        .map(|c| match c {
            NestChild::Good(g) => x.get(*g).copied().unwrap_or(0.0),
            NestChild::Node(n) => node_utility(n, x),
        })
        .collect();
    aggregate(node.rho, &node.weights, &us)
}

fn aggregate(rho: f64, weights: &[f64], us: &[f64]) -> f64 {
    if rho.abs() < RHO_EPS {
        let total: f64 = weights.iter().sum();
        return weights.iter().zip(us).filter(|(w, _)| **w > 0.0).map(|(w, u)| u.powf(w / total)).product();
    }
    // Log space: u^rho over- or underflows for |rho| near 100.
    let terms = weights.iter().zip(us).filter(|(w, _)| **w > 0.0).map(|(w, u)| w.ln() + rho * u.ln());
    (log_sum_exp(terms) / rho).exp()
}

/// Utility of bundle `x`. Homogeneous of degree one.
pub fn utility_value(spec: &UtilitySpec, x: &[f64]) -> f64 {
    match spec {
        UtilitySpec::Linear { values } => dot(values, x),
        UtilitySpec::CobbDouglas { values } => aggregate(0.0, values, x),
        UtilitySpec::Leontief { values } => {
            values.iter().zip(x).filter(|(v, _)| **v > 0.0).map(|(v, xj)| xj / v).fold(f64::INFINITY, f64::min)
        }
        UtilitySpec::Ces { values, rho } => aggregate(*rho, values, x),
        UtilitySpec::NestedCes { root } => node_utility(root, x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ces(v: &[f64], rho: f64) -> UtilitySpec {
        UtilitySpec::Ces { values: v.to_vec(), rho }
    }

    #[test]
    fn expenditure_examples() {
        let leo = UtilitySpec::Leontief { values: vec![1.0, 1.0] };
        assert_relative_eq!(expenditure_unit(&leo, &[0.5, 0.5]).unwrap(), 1.0);
        assert_relative_eq!(expenditure_unit(&ces(&[1.0, 1.0], 0.5), &[0.5, 0.5]).unwrap(), 0.25, epsilon = 1e-15);
        let cd = UtilitySpec::CobbDouglas { values: vec![0.5, 0.5] };
        assert_relative_eq!(expenditure_unit(&cd, &[0.5, 0.5]).unwrap(), 1.0, epsilon = 1e-15);
        let lin = UtilitySpec::Linear { values: vec![3.0, 1.0] };
        assert_relative_eq!(expenditure_unit(&lin, &[1.0, 1.0]).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn expenditure_rejects_bad_prices() {
        let leo = UtilitySpec::Leontief { values: vec![1.0, 1.0] };
        assert!(matches!(expenditure_unit(&leo, &[0.0, 1.0]), Err(Error::Domain(_))));
        assert!(matches!(expenditure_unit(&leo, &[-1.0, 1.0]), Err(Error::Domain(_))));
        assert!(matches!(expenditure_unit(&leo, &[1.0]), Err(Error::Dimension { .. })));
        let lin = UtilitySpec::Linear { values: vec![0.0, 0.0] };
        assert!(matches!(expenditure_unit(&lin, &[1.0, 1.0]), Err(Error::DegenerateUtility(_))));
    }

    #[test]
    fn hicksian_examples() {
        let leo = UtilitySpec::Leontief { values: vec![2.0, 1.0] };
        assert_eq!(hicksian_unit(&leo, &[0.3, 7.0]).unwrap().values, vec![2.0, 1.0]);
        let h = hicksian_unit(&ces(&[1.0, 1.0], 0.5), &[0.5, 0.5]).unwrap();
        assert_relative_eq!(h.values[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(h.values[1], 0.25, epsilon = 1e-15);
        assert_relative_eq!(h.cost(), 0.25, epsilon = 1e-15);
        let lin = UtilitySpec::Linear { values: vec![3.0, 1.0] };
        assert_eq!(hicksian_unit(&lin, &[1.0, 1.0]).unwrap().values, vec![1.0 / 3.0, 0.0]);
        // tie: lowest index
        let lin = UtilitySpec::Linear { values: vec![1.0, 1.0] };
        assert_eq!(hicksian_unit(&lin, &[1.0, 1.0]).unwrap().values, vec![1.0, 0.0]);
    }

    #[test]
    fn indirect_utility_examples() {
        let leo = UtilitySpec::Leontief { values: vec![1.0, 1.0] };
        assert_relative_eq!(indirect_utility(&leo, &[0.5, 0.5], 1.0).unwrap(), 1.0);
        assert_relative_eq!(indirect_utility(&ces(&[1.0, 1.0], 0.5), &[0.5, 0.5], 2.0).unwrap(), 8.0, epsilon = 1e-13);
        assert_eq!(indirect_utility(&leo, &[0.5, 0.5], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn marshallian_examples() {
        let leo = UtilitySpec::Leontief { values: vec![2.0, 1.0] };
        let x = marshallian(&leo, &[0.5, 0.5], 0.5).unwrap();
        assert_relative_eq!(x.values[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(x.values[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(x.cost(), 0.5, epsilon = 1e-15);

        let cd = UtilitySpec::CobbDouglas { values: vec![0.5, 0.5] };
        let x = marshallian(&cd, &[0.5, 0.5], 1.0).unwrap();
        assert_relative_eq!(x.values[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(x.values[1], 1.0, epsilon = 1e-14);

        let x = marshallian(&ces(&[1.0, 1.0], 0.5), &[0.2, 0.8], 1.0).unwrap();
        assert_relative_eq!(x.values[0], 4.0, epsilon = 1e-13);
        assert_relative_eq!(x.values[1], 0.25, epsilon = 1e-13);
        assert_relative_eq!(x.cost(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn linear_marshallian_splits_ties_evenly() {
        let lin = UtilitySpec::Linear { values: vec![1.0, 2.0, 1.0] };
        let x = marshallian(&lin, &[1.0, 2.0, 3.0], 1.0).unwrap();
        assert_relative_eq!(x.values[0], 0.5);
        assert_relative_eq!(x.values[1], 0.25);
        assert_eq!(x.values[2], 0.0);
        assert_relative_eq!(x.cost(), 1.0);
    }

    #[test]
    fn utility_examples() {
        assert_relative_eq!(utility_value(&UtilitySpec::Leontief { values: vec![2.0, 1.0] }, &[2.0, 1.0]), 1.0);
        assert_relative_eq!(utility_value(&UtilitySpec::Linear { values: vec![3.0, 1.0] }, &[1.0, 1.0]), 4.0);
        assert_relative_eq!(utility_value(&ces(&[1.0, 1.0], 0.5), &[0.25, 0.25]), 1.0, epsilon = 1e-15);
        // complements with a missing good give zero utility
        assert_eq!(utility_value(&ces(&[1.0, 1.0], -2.0), &[1.0, 0.0]), 0.0);
        // x^rho leaves the f64 range here
        assert_relative_eq!(
            utility_value(&ces(&[1.0, 1.0], -100.0), &[1e-4, 1e-4]),
            1e-4 * 2f64.powf(-0.01),
            max_relative = 1e-14
        );
        assert_relative_eq!(utility_value(&ces(&[1.0, 3.0], 0.5), &[1e300, 1e300]), 1e300 * 16.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_valuations_give_exact_zero_demand() {
        for spec in [
            ces(&[1.0, 0.0, 2.0], 0.5),
            ces(&[1.0, 0.0, 2.0], -3.0),
            UtilitySpec::CobbDouglas { values: vec![0.5, 0.0, 0.5] },
            UtilitySpec::Leontief { values: vec![1.0, 0.0, 1.0] },
        ] {
            let h = hicksian_unit(&spec, &[0.3, 0.4, 0.5]).unwrap();
            assert_eq!(h.values[1], 0.0, "{spec:?}");
            let x = marshallian(&spec, &[0.3, 0.4, 0.5], 1.0).unwrap();
            assert_eq!(x.values[1], 0.0, "{spec:?}");
        }
    }

    #[test]
    fn extreme_sigma_does_not_overflow() {
        // rho = -101 gives sigma = 1/102; rho = 0.75 gives sigma = 4
        for rho in [-101.0, 0.75] {
            let spec = ces(&[2.0, 3.0, 2.5], rho);
            let p = [1e-8, 3.0, 1e6];
            let e = expenditure_unit(&spec, &p).unwrap();
            assert!(e.is_finite() && e > 0.0);
            let h = hicksian_unit(&spec, &p).unwrap();
            assert!(h.values.iter().all(|x| x.is_finite()));
            assert_relative_eq!(h.cost(), e, max_relative = 1e-10);
        }
    }

    #[test]
    fn nested_ces_with_single_good_leaves_reduces_to_flat_ces() {
        let flat = ces(&[2.0, 1.0, 3.0], 0.4);
        let nested = UtilitySpec::NestedCes {
            root: NestNode {
                rho: 0.4,
                weights: vec![2.0, 1.0, 3.0],
                children: vec![NestChild::Good(0), NestChild::Good(1), NestChild::Good(2)],
            },
        };
        let p = [0.7, 1.3, 0.2];
        assert_relative_eq!(
            expenditure_unit(&flat, &p).unwrap(),
            expenditure_unit(&nested, &p).unwrap(),
            max_relative = 1e-13
        );
        let hf = hicksian_unit(&flat, &p).unwrap();
        let hn = hicksian_unit(&nested, &p).unwrap();
        for (a, b) in hf.values.iter().zip(&hn.values) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        assert_relative_eq!(
            utility_value(&flat, &[1.0, 2.0, 0.5]),
            utility_value(&nested, &[1.0, 2.0, 0.5]),
            max_relative = 1e-13
        );
    }

    #[test]
    fn substitution_param() {
        assert_eq!(SubstitutionParam::from_rho(0.5).0, 2.0);
        assert_eq!(SubstitutionParam::of(&UtilitySpec::Leontief { values: vec![1.0] }).0, 0.0);
        assert!(SubstitutionParam::of(&UtilitySpec::Linear { values: vec![1.0] }).0.is_infinite());
    }
}
