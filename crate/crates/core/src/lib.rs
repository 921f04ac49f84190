//! Simulator for hierarchical federated learning with mobile vehicles.
//!
//! Vehicles train on local shards, edge servers aggregate the vehicles
//! currently on their road side, and a cloud server periodically averages
//! the edges. The [`analysis`] module evaluates the divergence-based error
//! bounds against recorded trajectories.

pub mod analysis;
pub mod config;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod harness;
pub mod mobility;
pub mod models;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
pub use params::ParamVector;
