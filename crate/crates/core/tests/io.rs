mod common;

use common::*;
use proptest::prelude::*;
use taton_core::dynamics::{run, RunConfig};
use taton_core::experiments::{batch_run, BatchConfig, GenConfig, Palette};
use taton_core::io::{
    batch_from_json, batch_to_json, market_to_json, parse_market, read_trajectory_csv, write_records_csv,
    write_trajectory_csv, IoError,
};
use taton_core::{Market, UtilitySpec};

fn any_spec3() -> impl Strategy<Value = UtilitySpec> {
    prop_oneof![smooth_spec3(), values(3).prop_map(|values| UtilitySpec::Linear { values }),]
}

fn any_market() -> impl Strategy<Value = (Market, Option<Vec<f64>>)> {
    (
        prop::collection::vec(any_spec3(), 1..5),
        prop::collection::vec(0.1f64..5.0, 5),
        any::<bool>(),
        prop::option::of(prices(3)),
    )
        .prop_map(|(specs, budgets, normalize, p0)| {
            let n = specs.len();
            (Market::validated(3, budgets[..n].to_vec(), specs, normalize).unwrap(), p0)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn market_json_round_trip((market, p0) in any_market()) {
        let text = market_to_json(&market, p0.as_deref());
        let parsed = parse_market(&text).unwrap();
        prop_assert_eq!(&parsed.market, &market);
        prop_assert_eq!(&parsed.initial_prices, &p0);
        if market.is_normalized() {
            prop_assert!(parsed.warnings.is_empty());
        }
        let again = market_to_json(&parsed.market, parsed.initial_prices.as_deref());
        prop_assert_eq!(again, text);
    }

    #[test]
    fn trajectory_csv_round_trip(market in concave_market(3, 3), p0 in prices(3), every in 1usize..5) {
        let cfg = RunConfig { max_iters: 300, record_every: every, ..RunConfig::default() };
        let traj = run(&market, &p0, &cfg).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        prop_assert!(!text.contains('\r'));
        prop_assert_eq!(text.lines().count(), traj.rows.len() + 1);
        let rows = read_trajectory_csv(&buf[..]).unwrap();
        prop_assert_eq!(rows.len(), traj.rows.len());
        for (a, b) in rows.iter().zip(&traj.rows) {
            prop_assert_eq!(a.t, b.t);
            prop_assert_eq!(a.phi.to_bits(), b.phi.to_bits());
            prop_assert_eq!(&a.prices, &b.prices);
            prop_assert_eq!(a.gamma.to_bits(), b.gamma.to_bits());
        }
    }
}

#[test]
fn parse_examples() {
    let p = parse_market(
        r#"{"version":"1","goods":2,"buyers":[{"budget":1,"utility":{"type":"leontief","values":[1,1]}}]}"#,
    )
    .unwrap();
    assert_eq!(p.market.budgets(), &[1.0]);
    assert_eq!(p.market.utilities()[0], UtilitySpec::Leontief { values: vec![1.0, 1.0] });
    assert!(p.initial_prices.is_none());

    let err = parse_market(
        r#"{"version":"1","goods":2,"buyers":[{"budget":1,"utility":{"type":"leontief","values":[1,1],"rho":0.5}}]}"#,
    )
    .unwrap_err();
    match err {
        IoError::Schema { path, .. } => assert_eq!(path, "buyers[0].utility.rho"),
        e => panic!("{e}"),
    }

    let p = parse_market(
        r#"{"version":"1","goods":2,"buyers":[{"budget":1,"utility":{"type":"ces","values":[1,2],"rho":1}}]}"#,
    )
    .unwrap();
    assert_eq!(p.market.utilities()[0], UtilitySpec::Linear { values: vec![1.0, 2.0] });
    assert_eq!(p.warnings.len(), 1);

    match parse_market("{\"version\": \"1\",\n \"goods\": 2,\n \"buyers\": [}").unwrap_err() {
        IoError::Syntax { line, .. } => assert_eq!(line, 3),
        e => panic!("{e}"),
    }
    assert!(matches!(
        parse_market(r#"{"version":"2","goods":1,"buyers":[{"budget":1,"utility":{"type":"leontief","values":[1]}}]}"#),
        Err(IoError::Schema { .. })
    ));
    assert!(matches!(
        parse_market(
            r#"{"version":"1","goods":2,"buyers":[{"budget":1,"utility":{"type":"leontief","values":[0,0]}}]}"#
        ),
        Err(IoError::Invalid(_))
    ));
}

#[test]
fn nested_market_file() {
    let text = r#"{"version":"1","goods":3,"buyers":[{"budget":1,"utility":{"type":"nested_ces","nest":
        {"rho":0.5,"weights":[1,2],"children":[{"good":0},{"rho":-1,"weights":[1,1],"children":[{"good":1},{"good":2}]}]}}}]}"#;
    let p = parse_market(text).unwrap();
    assert!(matches!(p.market.utilities()[0], UtilitySpec::NestedCes { .. }));
    assert_eq!(parse_market(&market_to_json(&p.market, None)).unwrap().market, p.market);
}

#[test]
fn batch_json_round_trip_with_linear_buyers() {
    let gen = GenConfig { buyers: 3, goods: 2, palette: Palette::with_linear(), seed: 4, ..GenConfig::default() };
    let batch = BatchConfig {
        count: 6,
        run: RunConfig { max_iters: 2000, ..RunConfig::default() },
        grid_resolution: 201,
        ..BatchConfig::default()
    };
    let result = batch_run(&gen, &batch).unwrap();
    assert!(result.records.iter().any(|r| r.epsilon.is_infinite()));
    let back = batch_from_json(&batch_to_json(&result)).unwrap();
    assert_eq!(back.records.len(), result.records.len());
    for (a, b) in back.records.iter().zip(&result.records) {
        assert_eq!(a.epsilon, b.epsilon);
        assert_eq!(a.final_phi.to_bits(), b.final_phi.to_bits());
        assert_eq!(a.termination, b.termination);
    }
    assert_eq!(back.gen, result.gen);
    assert_eq!(back.batch, result.batch);
    let mut csv = Vec::new();
    write_records_csv(&result.records, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().next().unwrap().starts_with("index,seed,epsilon"));
    assert!(text.contains("inf"));
}
