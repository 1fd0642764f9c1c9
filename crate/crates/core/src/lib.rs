//! CoRGi: content-attentive message passing for edge-value prediction on
//! bipartite user–item graphs.
//!
//! The crate covers graph and content storage ([`graph`], [`formats`]), the
//! model and its baselines ([`model`], [`baselines`]), attention caching and
//! item sampling ([`cache`]), training and evaluation ([`training`],
//! [`metrics`]), the focus-word benchmark ([`synthetic`]) and the `corgi`
//! command line ([`cli`], [`config`]).

pub mod baselines;
pub mod cache;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
