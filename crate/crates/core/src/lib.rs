//! Workbench for converting trained perceptrons into rate-coded spiking
//! networks of conductance-based LIF neurons and benchmarking them on an ideal
//! simulator and on emulated neuromorphic device profiles.

pub mod ann;
pub mod bench;
pub mod converter;
pub mod error;
pub mod hil;
pub mod hw_emulator;
pub mod mnist_data;
pub mod nas;
pub mod snn_sim;

pub use error::{Error, Result};
