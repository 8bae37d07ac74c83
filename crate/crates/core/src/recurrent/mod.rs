//! Recurrent variants built on the U-Net blocks.

pub mod config;
pub mod gates;
pub mod model;

pub use config::{ModelConfig, Variant};
pub use gates::{ConvGru, GatedUnit, UPDATE_GATE_BIAS};
pub use model::{foreground_probability, Architecture, RecurrentUNet};
