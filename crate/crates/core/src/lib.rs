//! Mid-term human mobility prediction.
//!
//! Daily trajectories are decoupled into location and duration chains,
//! encoded day by day and week by week on top of a heterogeneous
//! cell/admin geospatial graph, and decoded autoregressively into the next
//! day (or week). The crate also carries the evaluation statistics used to
//! compare predicted and observed mobility and an SEIR metapopulation
//! simulator driven by trajectory-derived transition matrices.

pub mod epi;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod traj;

pub use error::{Error, Result};
