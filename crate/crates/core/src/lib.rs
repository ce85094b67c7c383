//! Deterministic federated meta-learning simulator.
//!
//! FedAvg, Reptile, FedSGD and first-order MAML share one round engine
//! ([`federation`]); [`analysis`] checks that a FedAvg round splits exactly
//! into a FedSGD step plus a sum of FOMAML updates, and [`personalization`]
//! measures how well a global model adapts to each client.
//!
//! Every random draw comes from a [`rng::Streams`] stream keyed by the run
//! seed and the draw's coordinates, so results do not depend on thread
//! count or scheduling.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod optim;
pub mod personalization;
pub mod rng;

pub use error::{Error, Result};
pub use model::{Activation, Batch, Example, Gradient, LossKind, ModelSpec, ParamVector};
