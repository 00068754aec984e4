//! Core library for flexible personalized split federated learning on a
//! single machine: a small autodiff engine, the split model, the binary
//! wire protocol, client/server runtimes, a discrete-event device
//! simulator, synthetic federated data, and the training protocols.

pub mod blocks;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod protocols;
pub mod runner;
pub mod server;
pub mod sim;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
