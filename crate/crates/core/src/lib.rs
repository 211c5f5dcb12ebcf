//! Simulation of clustered, communication-efficient federated learning.
//!
//! Clients are grouped by the similarity of briefly trained models, one
//! leader per cluster takes part in partial-layer federated averaging, and
//! the leaders' models are then transferred to the remaining cluster members.
//! Every simulated transmission is metered in a bit-exact ledger.

pub mod clustering;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod flcore;
pub mod harness;
pub mod model;
pub mod similarity;

pub use error::{Error, Result};
