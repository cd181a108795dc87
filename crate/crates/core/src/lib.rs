//! Memory-constrained mixed-precision quantization for MCU-class CNNs.

pub mod agent;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod memory;
pub mod nn;
pub mod qat;
pub mod quant;
pub mod search;

pub use error::{Error, Result};
