//! File formats, dataset handling, the training driver and the command line
//! for [`promptfuse_core`].

pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fit;
pub mod imageio;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
