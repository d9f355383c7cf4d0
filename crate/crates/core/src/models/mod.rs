//! Shipped model specifications.

mod matfac;
mod metrics;
mod nwp;

pub use matfac::{MatFacConfig, MatrixFactorization};
pub use metrics::{rating_accuracy, rmse, round_rating};
pub use nwp::{special, NextWordModel, NwpConfig};
