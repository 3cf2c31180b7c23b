//! Chained difference-in-differences for unbalanced and rotating panels.
//!
//! The pipeline runs bottom-up: [`panel`] holds the data, [`propensity`] fits
//! treatment and sampling models, [`blocks`] computes the k-period group-time
//! differences with their influence functions, [`chain`] aggregates them into
//! ATT(g,t), [`summaries`] and [`inference`] build summary parameters and
//! simultaneous bands, and [`simlab`] holds the simulation designs.

pub mod blocks;
pub mod chain;
pub mod error;
pub mod inference;
pub mod panel;
pub mod propensity;
pub mod simlab;
pub mod summaries;

pub use blocks::{AttEstimate, AttMethod, ControlSpec, DeltaAtt};
pub use chain::{estimate_att, AttTable, EstimateOptions, GmmSystem, Method, Weighting};
pub use error::{Error, Result};
pub use inference::{multiplier_bootstrap, pretrend_test, BootstrapBands};
pub use panel::{load_panel, validate, PanelDataset, PanelParts, Schema, ValidationReport};
pub use propensity::{Link, LinkModel, PropensityFit, SamplingFit};
pub use summaries::{all_summaries, theta_calendar, theta_dynamic, theta_lead, theta_selective, CohortShares, DynamicStart, ShareBasis, SummaryEstimate, SummaryKind};
