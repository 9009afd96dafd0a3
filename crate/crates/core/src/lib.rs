//! Consistent selectivity estimation for distance-threshold queries over
//! high-dimensional vectors.
//!
//! The estimator learns, per query object, a piecewise-linear curve over the
//! threshold whose control points and control values come from two small
//! networks. Increments are non-negative by construction, so estimates never
//! decrease as the threshold grows. The database can be split into ball-tree
//! clusters with one local curve per cluster.
//!
//! Module map:
//!
//! - [`nnet`]: dense networks, backprop, optimizer, gradient checking
//! - [`estimator`]: the model, its losses, training and persistence
//! - [`partition`]: ball-tree partitioning, greedy merging, gating
//! - [`oracle`]: distances, exact counting (brute force and tree)
//! - [`workload`]: synthetic data and labeled query workloads
//! - [`updates`]: insert/delete streams, drift checks, incremental training
//! - [`metrics`]: error metrics, empirical monotonicity, sampling baseline
//! - [`toy`]: one-dimensional comparison of learned vs fixed control points

pub mod error;
pub mod estimator;
pub mod metrics;
pub mod nnet;
pub mod oracle;
pub mod partition;
pub mod toy;
pub mod updates;
pub mod workload;

pub use error::{Error, Result};
