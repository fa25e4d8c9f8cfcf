//! Distributed state estimation over time-varying directed graphs.
//!
//! Each node of a network observes part of a discrete-time LTI plant and
//! keeps an estimate of the full state. Nodes exchange estimates tagged
//! with a freshness index (an age-of-information counter) and adopt the
//! freshest information they hear. A scalar Byzantine-resilient variant
//! keeps a short list of the freshest neighbors and trims extreme values.
//!
//! Module map:
//! - [`lti`]: plant model, observability, multi-sensor decomposition
//! - [`gains`]: observer gains, rate chains, finite-time deadlines
//! - [`graph`]: graph sequences, connectivity and robustness checks, generators
//! - [`aoi`]: the freshness-index observer protocol
//! - [`resilient`]: the resilient scalar protocol and adversary library
//! - [`sim`]: scenario execution, traces, verification
//! - [`io`]: JSON file formats
//! - [`reproduce`]: canned scenarios

// `!(x <= tol)` is used on purpose so that NaN counts as a failure
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aoi;
pub mod gains;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod lti;
pub mod reproduce;
pub mod resilient;
pub mod scenario;
pub mod sim;

mod error;

pub use error::Error;
