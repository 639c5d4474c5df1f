//! Deterministic cross-device federated learning simulator.
//!
//! The server side implements FedAvg, FedAvgM, FedOpt (Adam) and FedEve, a
//! predict-observe optimizer that fuses server momentum (prediction) with the
//! aggregated client update (observation) through a scalar Kalman gain driven
//! by estimated period-drift and client-drift variances. Clients run plain,
//! proximal (FedProx) or control-variate corrected (SCAFFOLD) local SGD.

pub mod client;
pub mod data;
pub mod drift;
pub mod error;
pub mod experiment;
pub mod model;
pub mod params;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
pub use params::ParamVector;
