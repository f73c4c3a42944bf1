mod common;

use approx::assert_relative_eq;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taton_core::demand::{
    expenditure, expenditure_unit, hicksian, hicksian_unit, indirect_utility, marshallian, utility_value,
};
use taton_core::market::{canonicalize, quasilinear_best_goods, quasilinear_to_linear, validate_market};
use taton_core::{Market, UtilitySpec};

fn fd_gradient(spec: &UtilitySpec, p: &[f64]) -> Vec<f64> {
    (0..p.len())
        .map(|j| {
            let d = 1e-6 * p[j];
            let mut q = p.to_vec();
            q[j] = p[j] + d;
            let up = expenditure_unit(spec, &q).unwrap();
            q[j] = p[j] - d;
            let down = expenditure_unit(spec, &q).unwrap();
            (up - down) / (2.0 * d)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn shephard_lemma(spec in smooth_spec3(), p in prices(3)) {
        let h = hicksian_unit(&spec, &p).unwrap().values;
        let scale = h.iter().cloned().fold(0.0, f64::max);
        for (fd, hj) in fd_gradient(&spec, &p).iter().zip(&h) {
            prop_assert!((fd - hj).abs() <= 1e-5 * scale, "fd {fd} vs h {hj}");
        }
    }

    #[test]
    fn homogeneity(spec in smooth_spec3(), p in prices(3), lambda in 0.1f64..10.0, b in 0.1f64..5.0) {
        let lp: Vec<f64> = p.iter().map(|x| lambda * x).collect();
        prop_assert!(rel_err(expenditure_unit(&spec, &lp).unwrap(), lambda * expenditure_unit(&spec, &p).unwrap()) <= 1e-10);
        let h = hicksian_unit(&spec, &p).unwrap().values;
        let hl = hicksian_unit(&spec, &lp).unwrap().values;
        let x = marshallian(&spec, &p, b).unwrap().values;
        let xl = marshallian(&spec, &lp, b).unwrap().values;
        for j in 0..3 {
            prop_assert!((hl[j] - h[j]).abs() <= 1e-10 * h[j].max(1e-300));
            prop_assert!((lambda * xl[j] - x[j]).abs() <= 1e-10 * x[j].max(1e-300));
        }
        let v = indirect_utility(&spec, &p, b).unwrap();
        prop_assert!(rel_err(indirect_utility(&spec, &p, lambda * b).unwrap(), lambda * v) <= 1e-10);
    }

    #[test]
    fn duality_identities(spec in smooth_spec3(), p in prices(3), b in 0.1f64..5.0) {
        let v = indirect_utility(&spec, &p, b).unwrap();
        prop_assert!(rel_err(expenditure(&spec, &p, v).unwrap(), b) <= 1e-8);
        let x = marshallian(&spec, &p, b).unwrap();
        prop_assert!(rel_err(utility_value(&spec, &x.values), v) <= 1e-8);
        prop_assert!(rel_err(x.cost(), b) <= 1e-10);
    }

    #[test]
    fn marshallian_is_scaled_hicksian(spec in smooth_spec3(), p in prices(3), b in 0.1f64..5.0) {
        let e = expenditure_unit(&spec, &p).unwrap();
        let h = hicksian_unit(&spec, &p).unwrap().values;
        let x = marshallian(&spec, &p, b).unwrap().values;
        for j in 0..3 {
            prop_assert!((x[j] - b * h[j] / e).abs() <= 1e-12 * x[j].max(1.0));
        }
    }

    #[test]
    fn hicksian_cost_is_expenditure(spec in smooth_spec3(), p in prices(3)) {
        let h = hicksian_unit(&spec, &p).unwrap();
        prop_assert!(rel_err(h.cost(), expenditure_unit(&spec, &p).unwrap()) <= 1e-10);
    }

    #[test]
    fn hicksian_scales_with_utility(spec in smooth_spec3(), p in prices(3), u in 0.1f64..10.0) {
        let h1 = hicksian_unit(&spec, &p).unwrap().values;
        let hu = hicksian(&spec, &p, u).unwrap().values;
        for j in 0..3 {
            prop_assert_eq!(hu[j], u * h1[j]);
        }
    }

    #[test]
    fn law_of_demand(spec in concave_spec(3), p in prices(3), q in prices(3)) {
        let hp = hicksian_unit(&spec, &p).unwrap().values;
        let hq = hicksian_unit(&spec, &q).unwrap().values;
        let s: f64 = (0..3).map(|j| (q[j] - p[j]) * (hq[j] - hp[j])).sum();
        prop_assert!(s <= 1e-10, "{s}");
    }

    #[test]
    fn canonicalize_is_idempotent(values in values(3), r in prop_oneof![Just(1.0), Just(0.0), Just(1e-12), Just(-1e7), -5.0f64..0.99]) {
        for spec in [
            UtilitySpec::Ces { values: values.clone(), rho: r },
            UtilitySpec::CobbDouglas { values: values.clone() },
            UtilitySpec::Leontief { values: values.clone() },
            UtilitySpec::Linear { values: values.clone() },
        ] {
            let once = canonicalize(&spec).unwrap();
            prop_assert_eq!(canonicalize(&once).unwrap(), once);
        }
    }

    #[test]
    fn normalization_preserves_budget_ratios(budgets in prop::collection::vec(0.1f64..10.0, 1..6)) {
        let n = budgets.len();
        let specs = vec![UtilitySpec::Leontief { values: vec![1.0, 1.0] }; n];
        let m = Market::new(2, budgets.clone(), specs, true);
        prop_assert!((m.total_budget() - 1.0).abs() <= 1e-12);
        for i in 0..n {
            prop_assert!(rel_err(m.budgets()[i] / m.budgets()[0], budgets[i] / budgets[0]) <= 1e-12);
        }
        let again = Market::new(2, m.budgets().to_vec(), m.utilities().to_vec(), true);
        prop_assert_eq!(again.budgets(), m.budgets());
    }
}

#[test]
fn quasilinear_rules_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let m = rand::Rng::random_range(&mut rng, 1..5);
        let v: Vec<f64> = (0..m).map(|_| rand::Rng::random_range(&mut rng, 0.1..3.0)).collect();
        let p = random_prices(&mut rng, m);
        let UtilitySpec::Linear { values } = quasilinear_to_linear(&v).unwrap() else { panic!() };
        let mut pp = p.clone();
        pp.push(1.0);
        // Linear rule: goods maximizing v_j / p_j, money included.
        let ratios: Vec<f64> = values.iter().zip(&pp).map(|(a, b)| a / b).collect();
        let best = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let linear: Vec<usize> = (0..=m).filter(|&j| best - ratios[j] <= 1e-12 * best).collect();
        assert_eq!(linear, quasilinear_best_goods(&v, &p), "v {v:?} p {p:?}");
    }
}

#[test]
fn quasilinear_examples() {
    assert_eq!(quasilinear_to_linear(&[3.0, 2.0]).unwrap(), UtilitySpec::Linear { values: vec![3.0, 2.0, 1.0] });
    assert_eq!(quasilinear_best_goods(&[3.0, 2.0], &[2.0, 3.0]), vec![0]);
    let lin = quasilinear_to_linear(&[3.0, 2.0]).unwrap();
    let x = marshallian(&lin, &[2.0, 3.0, 1.0], 1.0).unwrap().values;
    assert_eq!(x, vec![0.5, 0.0, 0.0]);
    assert_eq!(quasilinear_best_goods(&[1.0, 1.0], &[2.0, 2.0]), vec![2]);
    let x = marshallian(&quasilinear_to_linear(&[1.0, 1.0]).unwrap(), &[2.0, 2.0, 1.0], 1.0).unwrap().values;
    assert_eq!(x, vec![0.0, 0.0, 1.0]);
}

#[test]
fn ces_expenditure_matches_emp_search() {
    let spec = UtilitySpec::Ces { values: vec![1.0, 1.0], rho: 0.5 };
    assert_relative_eq!(expenditure_unit(&spec, &[0.5, 0.5]).unwrap(), 0.25, max_relative = 1e-12);
    let (x, cost) = ces_emp_oracle([1.0, 1.0], 0.5, [0.5, 0.5]);
    assert_relative_eq!(cost, 0.25, max_relative = 1e-9);
    assert!((x[0] - 0.25).abs() < 1e-4 && (x[1] - 0.25).abs() < 1e-4);
    assert_eq!(hicksian_unit(&spec, &[0.5, 0.5]).unwrap().values, vec![0.25, 0.25]);
}

#[test]
fn hicksian_matches_emp_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let v = [rand::Rng::random_range(&mut rng, 0.5..3.0), rand::Rng::random_range(&mut rng, 0.5..3.0)];
        let rho = if rand::Rng::random::<bool>(&mut rng) {
            rand::Rng::random_range(&mut rng, 0.25..0.75)
        } else {
            rand::Rng::random_range(&mut rng, -5.0..-0.25)
        };
        let p = [rand::Rng::random_range(&mut rng, 0.2..2.0), rand::Rng::random_range(&mut rng, 0.2..2.0)];
        let spec = UtilitySpec::Ces { values: v.to_vec(), rho };
        let (x, cost) = ces_emp_oracle(v, rho, p);
        assert!(rel_err(expenditure_unit(&spec, &p).unwrap(), cost) < 1e-8, "v {v:?} rho {rho} p {p:?}");
        let h = hicksian_unit(&spec, &p).unwrap().values;
        for j in 0..2 {
            assert!(rel_err(h[j], x[j]) < 1e-4, "h {h:?} vs {x:?}");
        }
    }
}

#[test]
fn marshallian_matches_ump_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kind in 0..30 {
        let spec = random_concave_spec(&mut rng, 2, kind);
        let p = [rand::Rng::random_range(&mut rng, 0.2..2.0), rand::Rng::random_range(&mut rng, 0.2..2.0)];
        let b = rand::Rng::random_range(&mut rng, 0.5..3.0);
        let x = marshallian(&spec, &p, b).unwrap().values;
        let values = spec.values().unwrap().to_vec();
        let u = |y: [f64; 2]| match &spec {
            UtilitySpec::Leontief { .. } => (y[0] / values[0]).min(y[1] / values[1]),
            UtilitySpec::CobbDouglas { .. } => y[0].powf(values[0]) * y[1].powf(values[1]),
            UtilitySpec::Ces { rho, .. } => ces_utility2([values[0], values[1]], *rho, y),
            _ => unreachable!(),
        };
        let y = ump_oracle(u, p, b);
        let tol = 1e-5 * b / p[0].min(p[1]);
        for j in 0..2 {
            assert!((x[j] - y[j]).abs() < tol, "{spec:?} p {p:?}: {x:?} vs {y:?}");
        }
    }
}

#[test]
fn closed_form_examples() {
    let leo = UtilitySpec::Leontief { values: vec![1.0, 1.0] };
    assert_eq!(expenditure_unit(&leo, &[0.5, 0.5]).unwrap(), 1.0);
    assert_eq!(indirect_utility(&leo, &[0.5, 0.5], 1.0).unwrap(), 1.0);
    let cd = UtilitySpec::CobbDouglas { values: vec![0.5, 0.5] };
    assert_relative_eq!(expenditure_unit(&cd, &[0.5, 0.5]).unwrap(), 1.0, max_relative = 1e-15);
    assert_eq!(marshallian(&cd, &[0.5, 0.5], 1.0).unwrap().values, vec![1.0, 1.0]);
    let ces = UtilitySpec::Ces { values: vec![1.0, 1.0], rho: 0.5 };
    assert_relative_eq!(indirect_utility(&ces, &[0.5, 0.5], 2.0).unwrap(), 8.0, max_relative = 1e-12);
    let x = marshallian(&ces, &[0.2, 0.8], 1.0).unwrap().values;
    assert_relative_eq!(x[0], 4.0, max_relative = 1e-12);
    assert_relative_eq!(x[1], 0.25, max_relative = 1e-12);
    assert_relative_eq!(utility_value(&ces, &[0.25, 0.25]), 1.0, max_relative = 1e-12);
    let x = marshallian(&UtilitySpec::Leontief { values: vec![2.0, 1.0] }, &[0.5, 0.5], 0.5).unwrap().values;
    assert_relative_eq!(x[0], 2.0 / 3.0, max_relative = 1e-12);
    assert_relative_eq!(x[1], 1.0 / 3.0, max_relative = 1e-12);
    let lin = UtilitySpec::Linear { values: vec![3.0, 1.0] };
    assert_eq!(hicksian_unit(&lin, &[1.0, 1.0]).unwrap().values, vec![1.0 / 3.0, 0.0]);
    assert_eq!(utility_value(&lin, &[1.0, 1.0]), 4.0);
    assert_eq!(indirect_utility(&ces, &[0.5, 0.5], 0.0).unwrap(), 0.0);
}

#[test]
fn zero_valuations_give_zero_demand() {
    let p = [0.3, 0.5, 0.2];
    for spec in [
        UtilitySpec::Ces { values: vec![1.0, 0.0, 2.0], rho: 0.5 },
        UtilitySpec::Ces { values: vec![1.0, 0.0, 2.0], rho: -3.0 },
        UtilitySpec::CobbDouglas { values: vec![0.5, 0.0, 0.5] },
        UtilitySpec::Leontief { values: vec![1.0, 0.0, 2.0] },
    ] {
        assert_eq!(hicksian_unit(&spec, &p).unwrap().values[1], 0.0, "{spec:?}");
        assert_eq!(marshallian(&spec, &p, 1.0).unwrap().values[1], 0.0, "{spec:?}");
    }
}

#[test]
fn validation_diagnostics() {
    let leo = UtilitySpec::Leontief { values: vec![1.0, 1.0] };
    let ok = Market::new(2, vec![0.5, 0.5], vec![leo.clone(), leo.clone()], true);
    assert!(validate_market(&ok).is_empty());
    let raw = Market::new(2, vec![0.3, 0.3], vec![leo.clone(), leo], false);
    let d = validate_market(&raw);
    assert_eq!(d.len(), 1);
    assert!(d[0].message.contains("0.6"), "{}", d[0]);
    let ces1 = Market::new(2, vec![1.0], vec![UtilitySpec::Ces { values: vec![1.0, 1.0], rho: 1.0 }], true);
    assert!(validate_market(&ces1).iter().any(|d| d.message.contains("canonicalized")));
}
