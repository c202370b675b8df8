//! Learning and re-generating the update process of operational power-system
//! forecasts.
//!
//! Historical forecast trajectories are turned into forecast updates
//! ([`data`]), four generative model families learn the update distribution
//! ([`copula`], [`flow`], [`argen`]), generated updates are rebuilt into
//! bounded trajectories against pseudo-observations ([`reconstruct`]), and the
//! result is scored with MiVo, Energy Score and Variogram Score ([`metrics`]).
//! [`synthbench`] provides ground-truth generators with known distributions.

pub mod argen;
pub mod autodiff;
pub mod copula;
pub mod data;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod reconstruct;
pub mod stats;
pub mod synthbench;
pub mod train;
mod error;

pub use error::{Error, Result};
