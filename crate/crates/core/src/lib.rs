//! Deterministic simulator for partially local federated learning.
//!
//! Models split their parameters into global blocks, aggregated by a server
//! across sampled clients, and local blocks that never leave a client. In
//! Federated Reconstruction training a client rebuilds its local blocks from
//! scratch every round with a few gradient steps on a support split of its
//! data, then updates the global blocks on the query split and returns only
//! the global delta.

pub mod baselines;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hash;
pub mod model;
pub mod models;
pub mod params;
pub mod recipes;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
pub use model::{
    check_gradients, ClientDataset, Example, Features, GradCheckReport, InputToken, LocalKind,
    MetricMap, MetricSums, Model, Prediction, Target,
};
pub use params::{
    axpy_blocks, concat_params, Layout, Overlay, ParamBlock, ParamSource, Params,
    PartitionedParams, RowSparse,
};
