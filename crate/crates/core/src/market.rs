//! Fisher market model: utility specifications, markets, prices and allocations.
//!
//! Every buyer holds a homothetic utility drawn from the CES family. The limit
//! cases of the CES parameter (rho = 1, 0, -inf) are kept as their own kinds so
//! that the demand formulas never evaluate a numerically degenerate CES.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// |rho| below this is treated as Cobb-Douglas.
pub const RHO_EPS: f64 = 1e-9;
/// rho below this is treated as Leontief.
pub const RHO_LEONTIEF_CUTOFF: f64 = -1e6;

/// Relative tolerance for bang-per-buck ties.
pub(crate) const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    Linear,
    CobbDouglas,
    Leontief,
    Ces,
    NestedCes,
}

impl UtilityKind {
    pub fn name(self) -> &'static str {
        match self {
            UtilityKind::Linear => "linear",
            UtilityKind::CobbDouglas => "cobb_douglas",
            UtilityKind::Leontief => "leontief",
            UtilityKind::Ces => "ces",
            UtilityKind::NestedCes => "nested_ces",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "linear" => UtilityKind::Linear,
            "cobb_douglas" => UtilityKind::CobbDouglas,
            "leontief" => UtilityKind::Leontief,
            "ces" => UtilityKind::Ces,
            "nested_ces" => UtilityKind::NestedCes,
            _ => return None,
        })
    }
}

impl fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Internal node of a nested CES tree. `weights[c]` scales child `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestNode {
    pub rho: f64,
    pub weights: Vec<f64>,
    pub children: Vec<NestChild>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NestChild {
    Good(usize),
    Node(NestNode),
}

impl NestNode {
    /// Elasticity of substitution of this node, `1 / (1 - rho)`.
    pub fn sigma(&self) -> f64 {
        1.0 / (1.0 - self.rho)
    }

    /// Largest node-wise elasticity of substitution in the subtree.
    pub fn max_sigma(&self) -> f64 {
        self.children
            .iter()
            .filter_map(|c| match c {
                NestChild::Node(n) => Some(n.max_sigma()),
                NestChild::Good(_) => None,
            })
            .fold(self.sigma(), f64::max)
    }

    /// Goods reachable from this node through strictly positive weights.
    pub fn supported_goods(&self, out: &mut BTreeSet<usize>) {
        for (w, c) in self.weights.iter().zip(&self.children) {
            if *w > 0.0 {
                match c {
                    NestChild::Good(g) => {
                        out.insert(*g);
                    }
                    NestChild::Node(n) => n.supported_goods(out),
                }
            }
        }
    }

    fn leaves(&self, out: &mut Vec<usize>) {
        for c in &self.children {
            match c {
                NestChild::Good(g) => out.push(*g),
                NestChild::Node(n) => n.leaves(out),
            }
        }
    }

    fn validate(&self, path: &str, num_goods: usize, diags: &mut Vec<Diagnostic>) {
        if !(self.rho.is_finite() && self.rho < 1.0) {
            diags.push(Diagnostic::error(
                format!("{path}.rho"),
                format!("nest rho = {} must be finite and < 1", self.rho),
            ));
        }
        if self.weights.len() != self.children.len() {
            diags.push(Diagnostic::error(
                format!("{path}.weights"),
                format!("{} weights for {} children", self.weights.len(), self.children.len()),
            ));
        }
        if self.children.is_empty() {
            diags.push(Diagnostic::error(path.to_string(), "nest node has no children"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            diags.push(Diagnostic::error(format!("{path}.weights"), "weights must be finite and nonnegative"));
        } else if !self.weights.iter().any(|w| *w > 0.0) {
            diags.push(Diagnostic::error(format!("{path}.weights"), "at least one weight must be positive"));
        }
        for (c, child) in self.children.iter().enumerate() {
            match child {
                NestChild::Good(g) if *g >= num_goods => diags.push(Diagnostic::error(
                    format!("{path}.children[{c}]"),
                    format!("good index {g} out of range (m = {num_goods})"),
                )),
                NestChild::Good(_) => {}
                NestChild::Node(n) => n.validate(&format!("{path}.children[{c}]"), num_goods, diags),
            }
        }
    }
}

/// A homothetic utility function.
///
/// `Linear`: `u(x) = sum v_j x_j`. `CobbDouglas`: `u(x) = prod x_j^{a_j}` with
/// `sum a = 1`. `Leontief`: `u(x) = min_{v_j > 0} x_j / v_j`. `Ces`:
/// `u(x) = (sum v_j x_j^rho)^{1/rho}`. `NestedCes`: a tree of CES aggregators
/// whose leaves are goods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UtilitySpec {
    Linear { values: Vec<f64> },
    CobbDouglas { values: Vec<f64> },
    Leontief { values: Vec<f64> },
    Ces { values: Vec<f64>, rho: f64 },
    NestedCes { root: NestNode },
}

impl UtilitySpec {
    pub fn kind(&self) -> UtilityKind {
        match self {
            UtilitySpec::Linear { .. } => UtilityKind::Linear,
            UtilitySpec::CobbDouglas { .. } => UtilityKind::CobbDouglas,
            UtilitySpec::Leontief { .. } => UtilityKind::Leontief,
            UtilitySpec::Ces { .. } => UtilityKind::Ces,
            UtilitySpec::NestedCes { .. } => UtilityKind::NestedCes,
        }
    }

    /// Valuation vector; `None` for nested CES.
    pub fn values(&self) -> Option<&[f64]> {
        match self {
            UtilitySpec::Linear { values }
            | UtilitySpec::CobbDouglas { values }
            | UtilitySpec::Leontief { values }
            | UtilitySpec::Ces { values, .. } => Some(values),
            UtilitySpec::NestedCes { .. } => None,
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            UtilitySpec::Ces { rho, .. } => Some(*rho),
            _ => None,
        }
    }

    /// Elasticity of substitution `sigma = 1/(1 - rho)`: 0 for Leontief, 1 for
    /// Cobb-Douglas, infinite for linear, the largest node value for nested CES.
    pub fn sigma(&self) -> f64 {
        match self {
            UtilitySpec::Linear { .. } => f64::INFINITY,
            UtilitySpec::CobbDouglas { .. } => 1.0,
            UtilitySpec::Leontief { .. } => 0.0,
            UtilitySpec::Ces { rho, .. } => 1.0 / (1.0 - rho),
            UtilitySpec::NestedCes { root } => root.max_sigma(),
        }
    }

    /// Goods with positive weight in this utility.
    pub fn supported_goods(&self) -> BTreeSet<usize> {
        match self {
            UtilitySpec::NestedCes { root } => {
                let mut s = BTreeSet::new();
                root.supported_goods(&mut s);
                s
            }
            _ => self
                .values()
                .unwrap_or_default()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.0)
                .map(|(j, _)| j)
                .collect(),
        }
    }

    fn validate(&self, path: &str, num_goods: usize, diags: &mut Vec<Diagnostic>) {
        if let Some(values) = self.values() {
            if values.len() != num_goods {
                diags.push(Diagnostic::error(
                    format!("{path}.values"),
                    format!("{} valuations for {num_goods} goods", values.len()),
                ));
            }
            if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                diags.push(Diagnostic::error(format!("{path}.values"), "valuations must be finite and nonnegative"));
            } else if !values.iter().any(|v| *v > 0.0) {
                diags.push(Diagnostic::error(format!("{path}.values"), "degenerate utility: no positive valuation"));
            }
        }
        match self {
            UtilitySpec::Ces { rho, .. } => {
                if !rho.is_finite() || *rho > 1.0 {
                    diags.push(Diagnostic::error(format!("{path}.rho"), format!("rho = {rho} outside (-inf, 1]")));
                } else if *rho == 1.0 {
                    diags.push(Diagnostic::error(format!("{path}.rho"), "rho=1 must be canonicalized to Linear"));
                } else if rho.abs() < RHO_EPS {
                    diags.push(Diagnostic::error(format!("{path}.rho"), "rho=0 must be canonicalized to CobbDouglas"));
                } else if *rho < RHO_LEONTIEF_CUTOFF {
                    diags.push(Diagnostic::error(
                        format!("{path}.rho"),
                        "rho below the Leontief cutoff must be canonicalized to Leontief",
                    ));
                }
            }
            UtilitySpec::CobbDouglas { values } => {
                let s: f64 = values.iter().sum();
                if s > 0.0 && (s - 1.0).abs() > 1e-9 {
                    diags.push(Diagnostic::error(
                        format!("{path}.values"),
                        format!("cobb-douglas exponents sum {s} != 1"),
                    ));
                }
            }
            UtilitySpec::NestedCes { root } => {
                root.validate(&format!("{path}.nest"), num_goods, diags);
                let mut leaves = Vec::new();
                root.leaves(&mut leaves);
                let mut seen = BTreeSet::new();
                for g in leaves {
                    if !seen.insert(g) {
                        diags.push(Diagnostic::error(
                            format!("{path}.nest"),
                            format!("good {g} appears in more than one leaf"),
                        ));
                    }
                }
            }
            _ => {}
        }
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidUtility("valuations must be finite and nonnegative".into()));
    }
    if !values.iter().any(|v| *v > 0.0) {
        return Err(Error::DegenerateUtility("all valuations are zero".into()));
    }
    Ok(())
}

/// Rescales to unit sum. Vectors already summing to one within rounding are
/// returned unchanged, which keeps normalization idempotent bit for bit.
pub(crate) fn normalized(values: &[f64]) -> Vec<f64> {
    let s: f64 = values.iter().sum();
    if (s - 1.0).abs() <= 8.0 * f64::EPSILON {
        return values.to_vec();
    }
    values.iter().map(|v| v / s).collect()
}

/// Maps limit cases of the CES family onto their own kinds and normalizes
/// Cobb-Douglas exponents. Idempotent.
pub fn canonicalize(spec: &UtilitySpec) -> Result<UtilitySpec> {
    if let Some(values) = spec.values() {
        check_values(values)?;
    }
    Ok(match spec {
        UtilitySpec::Ces { values, rho } => {
            let rho = *rho;
            if rho.is_nan() || rho > 1.0 {
                return Err(Error::InvalidUtility(format!("rho = {rho} outside (-inf, 1]")));
            }
            if rho == 1.0 {
                UtilitySpec::Linear { values: values.clone() }
            } else if rho.abs() < RHO_EPS {
                UtilitySpec::CobbDouglas { values: normalized(values) }
            } else if rho < RHO_LEONTIEF_CUTOFF {
                // The CES weights drop out in the limit: u -> min over supported goods.
                UtilitySpec::Leontief { values: values.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect() }
            } else {
                spec.clone()
            }
        }
        UtilitySpec::CobbDouglas { values } => UtilitySpec::CobbDouglas { values: normalized(values) },
        UtilitySpec::NestedCes { root } => {
            let mut diags = Vec::new();
            root.validate("nest", usize::MAX, &mut diags);
            if let Some(d) = diags.first() {
                return Err(Error::InvalidUtility(d.to_string()));
            }
            spec.clone()
        }
        UtilitySpec::Linear { .. } | UtilitySpec::Leontief { .. } => spec.clone(),
    })
}

/// Linear utility over `m + 1` goods equivalent to the quasilinear utility
/// `sum v_j x_j + money`; the last good is money, priced at 1 by the caller.
pub fn quasilinear_to_linear(values: &[f64]) -> Result<UtilitySpec> {
    check_values(values)?;
    let mut v = values.to_vec();
    v.push(1.0);
    Ok(UtilitySpec::Linear { values: v })
}

/// Goods maximizing the quasilinear surplus rate `(v_j - p_j) / p_j`, with
/// money (index `m`, rate 0) as a candidate. Ties within a relative 1e-12.
pub fn quasilinear_best_goods(values: &[f64], prices: &[f64]) -> Vec<usize> {
    let mut rates: Vec<f64> = values.iter().zip(prices).map(|(v, p)| (v - p) / p).collect();
    rates.push(0.0);
    argmax_set(&rates, |r| r + 1.0)
}

/// Indices whose score is within the tie tolerance of the maximum. `scale`
/// maps a score to a positive magnitude used for the relative comparison.
pub(crate) fn argmax_set(scores: &[f64], scale: impl Fn(f64) -> f64) -> Vec<usize> {
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_RTOL * scale(best).abs().max(f64::MIN_POSITIVE);
    scores.iter().enumerate().filter(|(_, s)| best - **s <= tol).map(|(j, _)| j).collect()
}

/// Strictly positive price vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PriceVector(Vec<f64>);

impl PriceVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        crate::error::check_positive(&p, "p")?;
        Ok(PriceVector(p))
    }

    /// Caller guarantees positivity (used by the dynamics, whose updates preserve it).
    pub(crate) fn from_vec_unchecked(p: Vec<f64>) -> Self {
        debug_assert!(p.iter().all(|x| *x > 0.0));
        PriceVector(p)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for PriceVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for PriceVector {
    type Error = Error;
    fn try_from(p: Vec<f64>) -> Result<Self> {
        PriceVector::new(p)
    }
}

impl From<PriceVector> for Vec<f64> {
    fn from(p: PriceVector) -> Self {
        p.0
    }
}

/// Row `i` is buyer `i`'s bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub rows: Vec<Vec<f64>>,
}

impl Allocation {
    pub fn column_sums(&self, num_goods: usize) -> Vec<f64> {
        let mut s = vec![0.0; num_goods];
        for row in &self.rows {
            for (acc, x) in s.iter_mut().zip(row) {
                *acc += x;
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    pub fn error(location: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, location: location.into(), message: message.into() }
    }

    pub fn warning(location: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Warning, location: location.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{sev} at {}: {}", self.location, self.message)
    }
}

/// A Fisher market with unit supply of each good.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    num_goods: usize,
    budgets: Vec<f64>,
    utilities: Vec<UtilitySpec>,
    normalized: bool,
}

impl Market {
    /// Builds a market, rescaling budgets to sum to one when `normalize` is set.
    /// No validation is performed; see [`validate_market`] and [`Market::validated`].
    pub fn new(num_goods: usize, budgets: Vec<f64>, utilities: Vec<UtilitySpec>, normalize: bool) -> Self {
        let budgets = if normalize {
            let s: f64 = budgets.iter().sum();
            if s > 0.0 && s.is_finite() {
                normalized(&budgets)
            } else {
                budgets
            }
        } else {
            budgets
        };
        Market { num_goods, budgets, utilities, normalized: normalize }
    }

    /// Like [`Market::new`] but canonicalizes utilities and rejects markets with
    /// error-level diagnostics.
    pub fn validated(
        num_goods: usize,
        budgets: Vec<f64>,
        utilities: Vec<UtilitySpec>,
        normalize: bool,
    ) -> Result<Self> {
        let utilities = utilities.iter().map(canonicalize).collect::<Result<Vec<_>>>()?;
        let market = Market::new(num_goods, budgets, utilities, normalize);
        let errors: Vec<String> = validate_market(&market)
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| d.to_string())
            .collect();
        if errors.is_empty() {
            Ok(market)
        } else {
            Err(Error::InvalidMarket(errors))
        }
    }

    pub fn num_goods(&self) -> usize {
        self.num_goods
    }

    pub fn num_buyers(&self) -> usize {
        self.budgets.len()
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    pub fn utilities(&self) -> &[UtilitySpec] {
        &self.utilities
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn total_budget(&self) -> f64 {
        self.budgets.iter().sum()
    }

    pub fn buyers(&self) -> impl Iterator<Item = (f64, &UtilitySpec)> {
        self.budgets.iter().copied().zip(&self.utilities)
    }

    pub fn has_linear_buyer(&self) -> bool {
        self.utilities.iter().any(|u| u.kind() == UtilityKind::Linear)
    }
}

/// Returns every violated market invariant. Budgets that do not sum to one
/// and goods nobody wants are warnings; everything else is an error.
pub fn validate_market(market: &Market) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let m = market.num_goods;
    if m == 0 {
        diags.push(Diagnostic::error("goods", "market needs at least one good"));
    }
    if market.budgets.is_empty() {
        diags.push(Diagnostic::error("buyers", "market needs at least one buyer"));
    }
    if market.budgets.len() != market.utilities.len() {
        diags.push(Diagnostic::error(
            "buyers",
            format!("{} budgets for {} utilities", market.budgets.len(), market.utilities.len()),
        ));
    }
    for (i, b) in market.budgets.iter().enumerate() {
        if !(b.is_finite() && *b > 0.0) {
            diags.push(Diagnostic::error(
                format!("buyers[{i}].budget"),
                format!("budget {b} must be finite and positive"),
            ));
        }
    }
    let total: f64 = market.budgets.iter().sum();
    if total.is_finite() && (total - 1.0).abs() > 1e-9 {
        diags.push(Diagnostic::warning("buyers", format!("budgets sum {total} ≠ 1")));
    }
    for (i, u) in market.utilities.iter().enumerate() {
        u.validate(&format!("buyers[{i}].utility"), m, &mut diags);
    }
    let mut wanted = BTreeSet::new();
    for u in &market.utilities {
        wanted.extend(u.supported_goods());
    }
    for j in 0..m {
        if !wanted.contains(&j) {
            diags.push(Diagnostic::warning(
                format!("goods[{j}]"),
                "no buyer values this good; its equilibrium price is 0",
            ));
        }
    }
    diags
}
