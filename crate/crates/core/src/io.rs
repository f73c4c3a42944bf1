//! File formats: market JSON, trajectory CSV and batch results.
//!
//! A market file looks like
//!
//! ```json
//! {
//!   "version": "1",
//!   "goods": 2,
//!   "buyers": [
//!     {"budget": 1, "utility": {"type": "ces", "values": [1, 2], "rho": 0.5}}
//!   ],
//!   "initial_prices": [0.5, 0.5],
//!   "normalize_budgets": true
//! }
//! ```
//!
//! Nested CES utilities carry a `nest` tree instead of `values`/`rho`; each
//! node is `{"rho": r, "weights": [...], "children": [...]}` and each child is
//! either `{"good": j}` or another node.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Trajectory, TrajectoryRow};
use crate::experiments::{BatchResult, MarketRecord, PhiStarSource};
use crate::market::{
    canonicalize, validate_market, Diagnostic, Market, NestChild, NestNode, Severity, UtilityKind, UtilitySpec,
};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },

    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("invalid market:\n{}", format_diags(.0))]
    Invalid(Vec<Diagnostic>),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed trajectory file: {0}")]
    Trajectory(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serde adapter writing non-finite floats as the strings `"inf"`, `"-inf"` and `"nan"`.
pub(crate) mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => {
                    Err(serde::de::Error::custom(format!("expected a number, \"inf\", \"-inf\" or \"nan\", got {t:?}")))
                }
            },
        }
    }
}

fn format_diags(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketFile {
    version: String,
    goods: usize,
    buyers: Vec<BuyerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_prices: Option<Vec<f64>>,
    #[serde(default = "yes")]
    normalize_budgets: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BuyerEntry {
    budget: f64,
    utility: UtilityEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtilityEntry {
    #[serde(rename = "type")]
    kind: UtilityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nest: Option<NestEntry>,
}

/// A nest node or, when `good` is set, a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    good: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<Vec<NestEntry>>,
}

/// A parsed and validated market file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMarket {
    pub market: Market,
    pub initial_prices: Option<Vec<f64>>,
    pub warnings: Vec<Diagnostic>,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> IoError {
    IoError::Schema { path: path.into(), message: message.into() }
}

fn forbid<T>(field: &Option<T>, path: &str, name: &str, kind: UtilityKind) -> Result<(), IoError> {
    if field.is_some() {
        return Err(schema(format!("{path}.{name}"), format!("`{name}` is not allowed for type {kind}")));
    }
    Ok(())
}

fn require<T: Clone>(field: &Option<T>, path: &str, name: &str, kind: UtilityKind) -> Result<T, IoError> {
    field.clone().ok_or_else(|| schema(format!("{path}.{name}"), format!("`{name}` is required for type {kind}")))
}

fn nest_from_entry(e: &NestEntry, path: &str) -> Result<NestChild, IoError> {
    if let Some(g) = e.good {
        if e.rho.is_some() || e.weights.is_some() || e.children.is_some() {
            return Err(schema(path, "a leaf has only `good`"));
        }
        return Ok(NestChild::Good(g));
    }
    let rho = e.rho.ok_or_else(|| schema(format!("{path}.rho"), "node requires `rho`"))?;
    let weights = e.weights.clone().ok_or_else(|| schema(format!("{path}.weights"), "node requires `weights`"))?;
    let entries = e.children.as_ref().ok_or_else(|| schema(format!("{path}.children"), "node requires `children`"))?;
    let children = entries
        .iter()
        .enumerate()
        .map(|(c, ch)| nest_from_entry(ch, &format!("{path}.children[{c}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(NestChild::Node(NestNode { rho, weights, children }))
}

fn utility_from_entry(u: &UtilityEntry, path: &str) -> Result<UtilitySpec, IoError> {
    let k = u.kind;
    match k {
        UtilityKind::NestedCes => {
            forbid(&u.values, path, "values", k)?;
            forbid(&u.rho, path, "rho", k)?;
            let nest = require(&u.nest, path, "nest", k)?;
            match nest_from_entry(&nest, &format!("{path}.nest"))? {
                NestChild::Node(root) => Ok(UtilitySpec::NestedCes { root }),
                NestChild::Good(_) => Err(schema(format!("{path}.nest"), "the root must be a node")),
            }
        }
        _ => {
            forbid(&u.nest, path, "nest", k)?;
            let values = require(&u.values, path, "values", k)?;
            if k == UtilityKind::Ces {
                let rho = require(&u.rho, path, "rho", k)?;
                return Ok(UtilitySpec::Ces { values, rho });
            }
            forbid(&u.rho, path, "rho", k)?;
            Ok(match k {
                UtilityKind::Linear => UtilitySpec::Linear { values },
                UtilityKind::CobbDouglas => UtilitySpec::CobbDouglas { values },
                _ => UtilitySpec::Leontief { values },
            })
        }
    }
}

fn nest_to_entry(child: &NestChild) -> NestEntry {
    match child {
        NestChild::Good(g) => NestEntry { good: Some(*g), rho: None, weights: None, children: None },
        NestChild::Node(n) => NestEntry {
            good: None,
            rho: Some(n.rho),
            weights: Some(n.weights.clone()),
            children: Some(n.children.iter().map(nest_to_entry).collect()),
        },
    }
}

fn utility_to_entry(spec: &UtilitySpec) -> UtilityEntry {
    let nest = match spec {
        UtilitySpec::NestedCes { root } => Some(nest_to_entry(&NestChild::Node(root.clone()))),
        _ => None,
    };
    UtilityEntry { kind: spec.kind(), values: spec.values().map(<[f64]>::to_vec), rho: spec.rho(), nest }
}

/// Strict parse: JSON syntax, then the schema (unknown fields are rejected),
/// then canonicalization of each utility and market validation.
pub fn parse_market(text: &str) -> Result<ParsedMarket, IoError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: MarketFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
                IoError::Syntax { line: inner.line(), column: inner.column(), message: inner.to_string() }
            }
            _ => schema(if path == "." { String::from("$") } else { path }, inner.to_string()),
        }
    })?;
    if file.version != FORMAT_VERSION {
        return Err(schema(
            "version",
            format!("unsupported version {:?}, expected \"{FORMAT_VERSION}\"", file.version),
        ));
    }
    let mut warnings = Vec::new();
    let mut errors = Vec::new();
    let mut budgets = Vec::with_capacity(file.buyers.len());
    let mut utilities = Vec::with_capacity(file.buyers.len());
    for (i, b) in file.buyers.iter().enumerate() {
        let path = format!("buyers[{i}].utility");
        let raw = utility_from_entry(&b.utility, &path)?;
        match canonicalize(&raw) {
            Ok(spec) => {
                if spec.kind() != raw.kind() {
                    warnings
                        .push(Diagnostic::warning(path, format!("{} canonicalized to {}", raw.kind(), spec.kind())));
                }
                utilities.push(spec);
            }
            Err(e) => {
                errors.push(Diagnostic::error(path, e.to_string()));
                utilities.push(raw);
            }
        }
        budgets.push(b.budget);
    }
    if let Some(p) = &file.initial_prices {
        if p.len() != file.goods {
            errors.push(Diagnostic::error("initial_prices", format!("{} prices for {} goods", p.len(), file.goods)));
        }
        for (j, pj) in p.iter().enumerate() {
            if !(pj.is_finite() && *pj > 0.0) {
                errors.push(Diagnostic::error(format!("initial_prices[{j}]"), format!("price {pj} must be positive")));
            }
        }
    }
    let market = Market::new(file.goods, budgets, utilities, file.normalize_budgets);
    for d in validate_market(&market) {
        match d.severity {
            Severity::Error => errors.push(d),
            Severity::Warning => warnings.push(d),
        }
    }
    if !errors.is_empty() {
        return Err(IoError::Invalid(errors));
    }
    Ok(ParsedMarket { market, initial_prices: file.initial_prices, warnings })
}

pub fn read_market(path: &std::path::Path) -> Result<ParsedMarket, IoError> {
    parse_market(&std::fs::read_to_string(path)?)
}

/// Pretty-printed market file; parsing it back yields an identical market.
pub fn market_to_json(market: &Market, initial_prices: Option<&[f64]>) -> String {
    let file = MarketFile {
        version: FORMAT_VERSION.to_string(),
        goods: market.num_goods(),
        buyers: market.buyers().map(|(budget, spec)| BuyerEntry { budget, utility: utility_to_entry(spec) }).collect(),
        initial_prices: initial_prices.map(<[f64]>::to_vec),
        normalize_budgets: market.is_normalized(),
    };
    serde_json::to_string_pretty(&file).expect("market file serializes")
}

/// `{:.16e}` keeps 17 significant digits, enough to round-trip any f64.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn trajectory_header(m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=m).map(|j| format!("p_{j}")));
    h.extend(["phi", "max_excess", "kl_step", "gamma"].map(String::from));
    h
}

/// Writes `t,p_1..p_m,phi,max_excess,kl_step,gamma`, one row per recorded iterate.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<(), IoError> {
    let m = traj.initial_prices.len();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(trajectory_header(m))?;
    for r in &traj.rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.prices.iter().map(|p| fmt_f64(*p)));
        rec.extend([r.phi, r.max_excess, r.kl_step, r.gamma].map(fmt_f64));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRow>, IoError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.len() < 5 {
        return Err(IoError::Trajectory(format!("header has {} columns", header.len())));
    }
    let m = header.len() - 5;
    if header != trajectory_header(m) {
        return Err(IoError::Trajectory(format!("unexpected header {header:?}")));
    }
    let num = |s: &str, line: usize| {
        s.parse::<f64>().map_err(|_| IoError::Trajectory(format!("line {line}: bad number {s:?}")))
    };
    let mut rows: Vec<TrajectoryRow> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let t: usize = rec[0].parse().map_err(|_| IoError::Trajectory(format!("line {line}: bad t {:?}", &rec[0])))?;
        if rows.last().is_some_and(|prev| prev.t >= t) {
            return Err(IoError::Trajectory(format!("line {line}: t is not strictly increasing")));
        }
        let prices = (1..=m).map(|j| num(&rec[j], line)).collect::<Result<Vec<_>, _>>()?;
        rows.push(TrajectoryRow {
            t,
            prices,
            phi: num(&rec[m + 1], line)?,
            max_excess: num(&rec[m + 2], line)?,
            kl_step: num(&rec[m + 3], line)?,
            gamma: num(&rec[m + 4], line)?,
        });
    }
    Ok(rows)
}

pub fn batch_to_json(result: &BatchResult) -> String {
    serde_json::to_string_pretty(result).expect("batch result serializes")
}

pub fn batch_from_json(text: &str) -> Result<BatchResult, IoError> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Serialize)]
struct RecordRow<'a> {
    index: u64,
    seed: u64,
    epsilon: f64,
    max_sigma: f64,
    has_linear: bool,
    termination: &'a str,
    converged: bool,
    iterations: usize,
    final_max_excess: f64,
    final_phi: f64,
    phi_star: Option<f64>,
    phi_star_source: Option<&'static str>,
    exponent: Option<f64>,
    gamma_events: usize,
    final_gamma: f64,
    tail_phi_range: f64,
    tail_oscillation: bool,
    price_change_violations: usize,
    bregman_violations: usize,
    diagnostics: String,
}

/// One CSV row per market.
pub fn write_records_csv<W: Write>(records: &[MarketRecord], out: W) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in records {
        w.serialize(RecordRow {
            index: r.index,
            seed: r.seed,
            epsilon: r.epsilon,
            max_sigma: r.max_sigma,
            has_linear: r.has_linear,
            termination: &r.termination,
            converged: r.converged,
            iterations: r.iterations,
            final_max_excess: r.final_max_excess,
            final_phi: r.final_phi,
            phi_star: r.phi_star,
            phi_star_source: r.phi_star_source.map(PhiStarSource::label),
            exponent: r.exponent,
            gamma_events: r.gamma_events,
            final_gamma: r.final_gamma,
            tail_phi_range: r.tail_phi_range,
            tail_oscillation: r.tail_oscillation,
            price_change_violations: r.price_change_violations,
            bregman_violations: r.bregman_violations,
            diagnostics: r.diagnostics.join("; "),
        })?;
    }
    w.flush()?;
    Ok(())
}
