//! Budgeted recursive clip selection for query-conditioned temporal localization.
//!
//! The crate covers synthetic task generation, the localization network, the
//! recursive selection policy, training objectives, baseline selectors, an
//! analytic compute-cost model and the experiment runner behind the `spotem` CLI.

pub mod autograd;
pub mod baselines;
pub mod costmodel;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod spotter;
pub mod taskgen;
pub mod types;

pub use types::{EmInstance, MetricsReport, SelectionMask, TimeWindow};
