//! Cross-client vertical federated learning with feature completion.

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod losses;
pub mod models;
pub mod numkit;
pub mod optim;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
