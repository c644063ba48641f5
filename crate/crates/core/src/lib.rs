//! Timeline modeling toolkit: dataset format and synthetic generator,
//! four-metric evaluation protocol, and three baseline transformer
//! architectures with a training harness.

pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
