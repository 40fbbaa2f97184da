//! Geographically weighted logistic regression of group dominance.

mod bandwidth;
mod gwr;
pub mod logistic;
mod predict;

pub use bandwidth::{search_interval, select_bandwidth, BandwidthKind, BandwidthSelection, MAX_REFINE_SWEEPS};
pub use gwr::{
    aicc, fit_gwr_logistic, Bandwidth, Bandwidths, CoefficientSummary, GwrDesign, GwrFit, Kernel,
    MAX_NONCONVERGED_SHARE, MIN_LOCATIONS,
};
pub use predict::{convex_hull, predict_dominance, DominancePrediction, PredictionCell};
