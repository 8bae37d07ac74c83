//! Recurrent U-Net segmentation engine.
//!
//! A compact U-Net whose inner encoder/decoder levels can be wrapped in a
//! gated recurrent unit that refines a hidden tensor and the predicted mask
//! over several iterations. Everything, including the reverse-mode autodiff
//! used for training, is implemented in this crate.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ini;
pub mod nn;
pub mod ops;
pub mod recurrent;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use recurrent::{ModelConfig, RecurrentUNet, Variant};
pub use tensor::{Real, Tensor};
