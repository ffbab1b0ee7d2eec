//! End-to-end assembly, classification, synthetic data, toy training and
//! the energy simulation driver.

pub mod assembly;
pub mod classify;
pub mod config;
pub mod energy;
pub mod gradients;
pub mod synth;
pub mod train;
