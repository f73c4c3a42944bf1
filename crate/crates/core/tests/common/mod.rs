#![allow(dead_code)]

use proptest::prelude::*;
use rand::Rng;
use taton_core::market::{NestChild, NestNode};
use taton_core::{Market, UtilitySpec};

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn values(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..3.0, m)
}

pub fn prices(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..2.0, m)
}

pub fn rho() -> impl Strategy<Value = f64> {
    prop_oneof![0.25f64..0.75, -101.0f64..-1.0, -0.9f64..-0.1]
}

pub fn normalized(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Leontief, Cobb-Douglas or CES over `m` goods.
pub fn concave_spec(m: usize) -> impl Strategy<Value = UtilitySpec> {
    prop_oneof![
        values(m).prop_map(|values| UtilitySpec::Leontief { values }),
        values(m).prop_map(|v| UtilitySpec::CobbDouglas { values: normalized(v) }),
        (values(m), rho()).prop_map(|(values, rho)| UtilitySpec::Ces { values, rho }),
    ]
}

/// `root(good 0, inner(good 1, good 2))`.
pub fn nested_spec() -> impl Strategy<Value = UtilitySpec> {
    (rho(), rho(), values(2), values(2)).prop_map(|(r1, r2, w1, w2)| UtilitySpec::NestedCes {
        root: NestNode {
            rho: r1,
            weights: w1,
            children: vec![
                NestChild::Good(0),
                NestChild::Node(NestNode {
                    rho: r2,
                    weights: w2,
                    children: vec![NestChild::Good(1), NestChild::Good(2)],
                }),
            ],
        },
    })
}

/// Any differentiable spec over three goods.
pub fn smooth_spec3() -> impl Strategy<Value = UtilitySpec> {
    prop_oneof![3 => concave_spec(3), 1 => nested_spec()]
}

pub fn concave_market(n: usize, m: usize) -> impl Strategy<Value = Market> {
    (prop::collection::vec(concave_spec(m), n), prop::collection::vec(0.5f64..3.0, n))
        .prop_map(move |(specs, budgets)| Market::validated(m, budgets, specs, true).unwrap())
}

pub fn random_concave_spec<R: Rng>(rng: &mut R, m: usize, kind: usize) -> UtilitySpec {
    let values: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();
    match kind % 3 {
        0 => UtilitySpec::Leontief { values },
        1 => UtilitySpec::CobbDouglas { values: normalized(values) },
        _ => {
            let rho = if rng.random::<bool>() { rng.random_range(0.25..0.75) } else { rng.random_range(-20.0..-0.2) };
            UtilitySpec::Ces { values, rho }
        }
    }
}

pub fn random_prices<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(0.05..2.0)).collect()
}

/// Golden-section maximization of a unimodal `f` on `[lo, hi]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    0.5 * (lo + hi)
}

/// Dense grid plus golden refinement of a unimodal function on `[lo, hi]`.
pub fn grid_then_golden(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
    let step = (hi - lo) / (points - 1) as f64;
    let best = (0..points).map(|i| lo + i as f64 * step).max_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
    golden_max(&f, (best - step).max(lo), (best + step).min(hi))
}

/// Two-good CES utility written out directly.
pub fn ces_utility2(v: [f64; 2], rho: f64, x: [f64; 2]) -> f64 {
    (v[0] * x[0].powf(rho) + v[1] * x[1].powf(rho)).powf(1.0 / rho)
}

/// Expenditure-minimizing bundle for CES utility level one over two goods,
/// by searching along the indifference curve.
pub fn ces_emp_oracle(v: [f64; 2], rho: f64, p: [f64; 2]) -> ([f64; 2], f64) {
    let x2_of = |x1: f64| ((1.0 - v[0] * x1.powf(rho)) / v[1]).powf(1.0 / rho);
    // On the curve x1 ranges over (0, v1^{-1/rho}) for rho > 0 and (v1^{-1/rho}, inf) for rho < 0.
    let edge = v[0].powf(-1.0 / rho);
    let (lo, hi) = if rho > 0.0 { (1e-12, edge * (1.0 - 1e-12)) } else { (edge * (1.0 + 1e-9), edge * 1e3) };
    let cost = |x1: f64| {
        let x2 = x2_of(x1);
        if x2.is_finite() && x2 > 0.0 {
            -(p[0] * x1 + p[1] * x2)
        } else {
            f64::NEG_INFINITY
        }
    };
    let x1 = if rho > 0.0 {
        grid_then_golden(cost, lo, hi, 2001)
    } else {
        // Log-spaced search on the unbounded side.
        let t = grid_then_golden(|s| cost(lo * s.exp()), 0.0, (hi / lo).ln(), 2001);
        lo * t.exp()
    };
    let x = [x1, x2_of(x1)];
    (x, p[0] * x[0] + p[1] * x[1])
}

/// Utility-maximizing bundle on the budget line, by search over `x1`.
pub fn ump_oracle(u: impl Fn([f64; 2]) -> f64, p: [f64; 2], b: f64) -> [f64; 2] {
    let x2 = |x1: f64| ((b - p[0] * x1) / p[1]).max(0.0);
    let x1 = grid_then_golden(|x1| u([x1, x2(x1)]), 0.0, b / p[0], 2001);
    [x1, x2(x1)]
}
