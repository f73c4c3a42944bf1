//! Entropic tatonnement for Fisher markets with homothetic buyers.
//!
//! Buyers have linear, Cobb-Douglas, Leontief, CES or nested-CES utilities.
//! Prices adjust multiplicatively in the direction of excess demand, which is
//! mirror descent on a convex potential whose minimizers are the equilibria.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demand;
pub mod dynamics;
pub mod elasticity;
pub mod error;
pub mod experiments;
pub mod io;
pub mod market;
pub mod oracle;
pub mod potential;
pub mod sampling;

pub use error::{Error, Result};
pub use market::{Market, PriceVector, UtilityKind, UtilitySpec};
