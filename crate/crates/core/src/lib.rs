//! Trust-aware federated zero-shot intrusion detection over semantic
//! attack prototypes.
//!
//! Three encoders embed offensive, defensive and adversarial descriptions
//! of each attack concept. Their mean is the concept prototype and their
//! spread is its disagreement. Clients learn linear maps from traffic
//! features to prototype space; the server aggregates them with weights
//! derived from reported losses. Observations are attributed to the
//! nearest prototype by cosine and scored for zero-day risk.

// Negated float comparisons are how NaN gets rejected in validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod encoding;
pub mod error;
pub mod federation;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod projection;
pub mod rng;

pub use error::{Error, Result};
