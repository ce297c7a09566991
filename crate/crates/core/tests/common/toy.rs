use promptfuse_core::degrade::{make_sample, DegradeSpec};
use promptfuse_core::network::FusionNetwork;
use promptfuse_core::prompt::{IrDegradation, StubEncoder, ViDegradation};
use promptfuse_core::train::{TrainConfig, TrainMode, TrainingExample};
use promptfuse_core::{FusionSample, ImageTensor, NetworkConfig};

pub const PROMPT_DIM: usize = 16;

/// The desk-scale network used by the gradient, overfit and resume checks.
pub fn config(seed: u64) -> NetworkConfig {
    NetworkConfig { base_channels: 4, prompt_dim: PROMPT_DIM, attention_heads: 1, seed, ..NetworkConfig::default() }
}

pub fn network(seed: u64) -> FusionNetwork {
    FusionNetwork::new(config(seed), Default::default()).unwrap()
}

pub fn encoder() -> StubEncoder {
    StubEncoder::new(PROMPT_DIM, 0)
}

/// Smooth synthetic pair of side `size`; `phase` shifts the pattern.
pub fn clean_pair(size: usize, phase: f64) -> (ImageTensor, ImageTensor) {
    let f = size as f64;
    let ir = ImageTensor::from_fn(1, size, size, |_, y, x| {
        0.5 + 0.4 * ((x as f64 / f * 6.0 + phase).sin() * (y as f64 / f * 4.0).cos())
    })
    .unwrap();
    let vi = ImageTensor::from_fn(3, size, size, |c, y, x| {
        0.5 + 0.4 * ((x as f64 / f * 3.0 + c as f64 + phase).cos() * (y as f64 / f * 5.0).sin())
    })
    .unwrap();
    (ir, vi)
}

/// Noise on the infrared branch and low light on the visible branch.
pub fn degraded_sample(size: usize, phase: f64, seed: u64) -> FusionSample {
    let (ir, vi) = clean_pair(size, phase);
    let spec = DegradeSpec::new(IrDegradation::Noise, ViDegradation::LowLight, 0.5, seed).unwrap();
    make_sample(&ir, &vi, &spec).unwrap()
}

pub fn example(size: usize, phase: f64, seed: u64) -> TrainingExample {
    TrainingExample::new(degraded_sample(size, phase, seed), &encoder(), TrainMode::DegradationAware).unwrap()
}

pub fn train_config(lr: f64) -> TrainConfig {
    TrainConfig { learning_rate: lr, batch_size: 1, patch_size: 16, ..TrainConfig::default() }
}
