//! Volumetric feature recalibration: autodiff kernel, recalibration blocks,
//! a scaled 3D U-net, losses, metrics, synthetic phantoms and the training
//! driver behind the `recal3d` CLI.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod experiments;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod segnet;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume_io;

pub use error::{Error, Result};
pub use tensor::{Init, Rng, Shape, Tensor};
