//! Deterministic simulator and analysis toolkit for federated learning over
//! packet-erasure uplinks.
//!
//! The library models `N` devices running local gradient descent on convex
//! losses, a central node aggregating their parameter vectors each round, and
//! an erasure channel that drops device uploads independently with
//! probability `epsilon_i`. Three aggregation rules are provided: the ideal
//! error-free average, a memoryless rule that renormalizes over the received
//! set, and a stale-reuse rule that substitutes each missing device's most
//! recent successfully received update.
//!
//! Everything is reproducible: one 64-bit seed fixes the dataset, every
//! erasure pattern, and therefore every output bit.

// Parameter validation uses `!(x > 0.0)`-style comparisons so NaN fails
// closed.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod analysis;
pub mod channel;
pub mod data;
mod error;
pub(crate) mod linalg;
pub mod model;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
