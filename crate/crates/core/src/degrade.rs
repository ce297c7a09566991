//! Seeded synthesis of the four degradation scenarios.
//!
//! Visible images get low light or overexposure, infrared images low
//! contrast or additive noise. Every operator is the identity at severity 0
//! and its effect grows monotonically with severity. Noise fields depend only
//! on the seed and the image size, so sweeps over severity rescale one fixed
//! field.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hash::derive_seed;
use crate::image::{FusionSample, ImageTensor};
use crate::prompt::{IrDegradation, PromptTemplate, ViDegradation};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub ir_mode: IrDegradation,
    pub vi_mode: ViDegradation,
    pub severity: f64,
    pub seed: u64,
}

impl DegradeSpec {
    pub fn new(ir_mode: IrDegradation, vi_mode: ViDegradation, severity: f64, seed: u64) -> Result<Self> {
        check_severity(severity)?;
        Ok(Self { ir_mode, vi_mode, severity, seed })
    }

    pub fn template(&self) -> PromptTemplate {
        PromptTemplate::new(self.ir_mode, self.vi_mode)
    }
}

fn check_severity(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Range(format!("severity {s} outside [0, 1]")));
    }
    Ok(())
}

/// `n` standard normal samples from a seeded ChaCha8 stream.
pub fn noise_field(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn clamped(img: &ImageTensor, f: impl Fn(usize, f64) -> f64) -> Result<ImageTensor> {
    let data = img.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    ImageTensor::from_clamped(Tensor::new(img.tensor().shape(), data)?)
}

/// `x^(1 + 1.5 s) * (1 - 0.6 s)` plus Gaussian read noise of std `0.02 s`.
pub fn apply_low_light(img: &ImageTensor, severity: f64, seed: u64) -> Result<ImageTensor> {
    check_severity(severity)?;
    if severity == 0.0 {
        return Ok(img.clone());
    }
    let gamma = 1.0 + 1.5 * severity;
    let gain = 1.0 - 0.6 * severity;
    let sigma = 0.02 * severity;
    let noise = noise_field(img.data().len(), derive_seed(seed, "low_light"));
    clamped(img, |i, v| libm::pow(v, gamma) * gain + sigma * noise[i])
}

/// Gain `1 + 2 s`, then clamp.
pub fn apply_overexposure(img: &ImageTensor, severity: f64, _seed: u64) -> Result<ImageTensor> {
    check_severity(severity)?;
    if severity == 0.0 {
        return Ok(img.clone());
    }
    let gain = 1.0 + 2.0 * severity;
    clamped(img, |_, v| v * gain)
}

/// Contracts every channel towards its mean by `1 - 0.8 s`.
pub fn apply_low_contrast(img: &ImageTensor, severity: f64, _seed: u64) -> Result<ImageTensor> {
    check_severity(severity)?;
    if severity == 0.0 {
        return Ok(img.clone());
    }
    let k = 1.0 - 0.8 * severity;
    let plane = img.height() * img.width();
    let means: Vec<f64> = (0..img.channels()).map(|c| img.plane(c).iter().sum::<f64>() / plane as f64).collect();
    clamped(img, |i, v| {
        let m = means[i / plane];
        m + k * (v - m)
    })
}

/// Additive Gaussian noise of std `0.1 s`, clamped.
pub fn apply_noise(img: &ImageTensor, severity: f64, seed: u64) -> Result<ImageTensor> {
    check_severity(severity)?;
    if severity == 0.0 {
        return Ok(img.clone());
    }
    let sigma = 0.1 * severity;
    let noise = noise_field(img.data().len(), derive_seed(seed, "noise"));
    clamped(img, |i, v| v + sigma * noise[i])
}

pub fn degrade_ir(img: &ImageTensor, mode: IrDegradation, severity: f64, seed: u64) -> Result<ImageTensor> {
    match mode {
        IrDegradation::None => {
            check_severity(severity)?;
            Ok(img.clone())
        }
        IrDegradation::LowContrast => apply_low_contrast(img, severity, seed),
        IrDegradation::Noise => apply_noise(img, severity, seed),
    }
}

pub fn degrade_vi(img: &ImageTensor, mode: ViDegradation, severity: f64, seed: u64) -> Result<ImageTensor> {
    match mode {
        ViDegradation::None => {
            check_severity(severity)?;
            Ok(img.clone())
        }
        ViDegradation::LowLight => apply_low_light(img, severity, seed),
        ViDegradation::Overexposure => apply_overexposure(img, severity, seed),
    }
}

/// Degrades a clean pair according to `spec`, keeps the clean images as
/// references and attaches the matching modality prompts.
pub fn make_sample(ir_clean: &ImageTensor, vi_clean: &ImageTensor, spec: &DegradeSpec) -> Result<FusionSample> {
    if ir_clean.channels() != 1 || vi_clean.channels() != 3 || !ir_clean.same_size(vi_clean) {
        return Err(shape_err!(
            "make_sample needs a (1, H, W) infrared and a (3, H, W) visible image, got {:?} and {:?}",
            ir_clean.tensor().shape(),
            vi_clean.tensor().shape()
        ));
    }
    let ir = degrade_ir(ir_clean, spec.ir_mode, spec.severity, derive_seed(spec.seed, "ir"))?;
    let vi = degrade_vi(vi_clean, spec.vi_mode, spec.severity, derive_seed(spec.seed, "vi"))?;
    let t = spec.template();
    FusionSample::new(ir, vi, ir_clean.clone(), vi_clean.clone(), t.render_ir(), t.render_vi())
}
