//! Simulation and verification toolkit for equilibria with heterogeneous,
//! state-dependent impatience.
//!
//! Agent types move through a type space under a Brownian flow driven by one
//! common noise. Population-weighted aggregates of those types give the
//! effective aggregate process η, the loading −∂η and the state price
//! H = −∂η / I. Everything downstream (policies, prices, clearing,
//! no-arbitrage, decompositions) is built from these paths and checked by the
//! statistical oracles in [`oracle`].

pub mod cli;
pub mod config;
pub mod decomp;
pub mod equilibrium;
pub mod error;
pub mod flow;
pub mod oracle;
pub mod policy;
pub mod population;
pub mod preferences;
pub mod quad;
pub mod scenarios;
pub mod series;

pub use error::{Error, Result};
