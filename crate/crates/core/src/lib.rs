//! Behavioral simulator of capacitive in-sensor multiply-and-accumulate
//! arrays, with a hardware-in-the-loop trainer for FC classifiers, FC
//! autoencoders and CNN classifiers whose first layer runs in the array.
//!
//! - [`device`]: series sensing capacitance and the four-phase MAC cycle
//! - [`array`]: subpixel bank wiring, FC readout, convolution scheduling
//! - [`dataset`]: capacitive letter images
//! - [`netlab`]: the three networks and their training loops
//! - [`metrics`]: latency, energy and waveform assembly
//! - [`experiment`]: config-driven runs, checkpoints and artifacts

pub mod array;
pub mod dataset;
pub mod device;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod netlab;

pub use error::{Error, Result};
