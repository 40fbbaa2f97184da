//! Causal analytics for online-to-offline advertising experiments.
//!
//! The crate covers the full analysis chain for A/B-tested shop advertisements:
//!
//! - [`trajectory`]: ping ingestion, stay detection, alignment to the target shop, gridding
//!   and travel-distance features.
//! - [`spatial`]: geographically weighted logistic regression of group dominance.
//! - [`panel`]: fixed-effects estimates of post-visit travel-distance differences.
//! - [`revisit`]: per-campaign revisit tables and odds-ratio pooling.
//! - [`uplift`]: class-variable-transformation uplift model on boosted trees, AUUC,
//!   feature search and permutation importance.
//! - [`simulator`]: synthetic experiments with planted ground truth.
//! - [`pipeline`]: configuration, end-to-end runs and report artifacts.

pub mod error;
pub mod geo;
pub mod panel;
pub mod pipeline;
pub mod revisit;
pub mod spatial;
pub mod simulator;
pub mod stats;
pub mod trajectory;
pub mod uplift;

pub use error::{Error, Result};
