//! Deterministic machinery around a manufacturing-aware anomaly-detection
//! model: expert map metrics, region tokens, confidence voting, dataset
//! organizers and an evaluation harness.

pub mod config;
pub mod cotm;
pub mod cvm;
pub mod egroi;
pub mod error;
pub mod evalharness;
pub mod instructiad;
pub mod label;
pub mod map_io;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
pub use label::{Decision, Label};
