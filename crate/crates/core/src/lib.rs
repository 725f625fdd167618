pub mod broker;
pub mod clock;
pub mod config;
pub mod consumer;
pub mod error;
pub mod harvester;
pub mod net;
pub mod predictor;
pub mod pricing;
pub mod silo;
pub mod sim;
pub mod store;
pub mod units;
pub mod wire;

pub use error::{Error, Result};
