//! Distributed zeroth-order fine-tuning at desk scale.
//!
//! A small decoder-only transformer is trained forward-only with a
//! central-difference gradient estimator under several runtimes: in-memory
//! MeZO, block-streaming ZO2 over a simulated host/device memory hierarchy,
//! perturbation parallelism, scalar-gradient data parallelism and their 2D
//! combination. An interconnect cost model and discrete-event simulator cover
//! the sliced upload/offload strategy.

pub mod bench;
pub mod comm;
pub mod dist;
pub mod error;
pub mod model;
pub mod offload;
pub mod real;
pub mod rng;
pub mod zo;

pub use error::{Error, ErrorKind, Result};
