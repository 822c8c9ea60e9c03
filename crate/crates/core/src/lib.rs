//! Parameter learning for discrete Bayesian networks from partially observed
//! data with a parallel, chromatic, SAME-replicated Gibbs sampler that
//! streams data in fixed-size minibatches.
//!
//! The main entry point is [`sampler::Sampler`]. [`datagen`] builds synthetic
//! data sets and [`metrics`] scores learned parameters.

pub mod cli;
pub mod data;
pub mod datagen;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod model;
pub mod network;
pub mod rng;
pub mod sampler;

pub use data::{DataMatrix, FileSource, InMemorySource, Minibatch, MinibatchSource};
pub use error::{Error, Result};
pub use model::{CountSet, CptSet, DirichletPrior};
pub use network::{Coloring, MoralGraph, Network};
pub use rng::StreamKey;
pub use sampler::{AccumulatorMode, MSchedule, Sampler, SamplerConfig, Trace, TraceRecord};
