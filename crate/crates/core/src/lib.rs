//! Prompt-guided, degradation-coupled infrared/visible image fusion.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece of
//! the system: a small reverse-mode autodiff engine, the learned blocks and the
//! full two-branch encoder / fusion decoder, the training losses, the fusion
//! quality metrics, the degradation synthesizer and the checkpoint codec.
//! File IO, dataset handling and the command line live in the `promptfuse`
//! companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod config;
pub mod degrade;
pub mod error;
pub mod image;
pub mod imgproc;
pub mod jpdcf;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod prompt;
pub mod spdce;
pub mod tensor;
pub mod train;

mod hash;

pub use config::{KeyValues, LossWeights, NetworkConfig};
pub use error::{Error, Result};
pub use hash::derive_seed;
pub use image::{FusionSample, ImageTensor, YCbCrImage};
pub use tensor::Tensor;
