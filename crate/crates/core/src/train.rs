//! Training configuration, optimizer state and the single-step update.
//!
//! Parameters and Adam moments are kept at f32 precision after every update
//! so that the f32 checkpoint format captures the state exactly and resumed
//! runs continue bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{KeyValues, LossWeights, NetworkConfig};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::image::FusionSample;
use crate::losses::{loss_graph, LossReport, LossTargets};
use crate::network::{Architecture, FusionNetwork, GraphInputs};
use crate::nn::params::round_f32;
use crate::nn::Graph;
use crate::prompt::{PromptEmbedding, PromptEncoder, PromptTemplate};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

macro_rules! keyed_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $key:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            #[default]
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [Self] = &[$(Self::$variant),+];

            pub fn key(self) -> &'static str {
                match self {
                    $(Self::$variant => $key),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.key() == s)
                    .ok_or_else(|| Error::Parse(format!("unknown {} `{s}`", stringify!($name))))
            }
        }

        impl core::fmt::Display for $name {
            fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
                f.write_str(self.key())
            }
        }
    };
}

keyed_enum!(
    /// Whether training uses degradation prompts and clean references, or
    /// clean inputs with a fixed prompt.
    TrainMode { DegradationAware => "degradation_aware", DegradationAgnostic => "degradation_agnostic" }
);

keyed_enum!(Ablation {
    Full => "full",
    NoSpdce => "no_spdce",
    NoJpdcf => "no_jpdcf",
    NoColorLoss => "no_color_loss",
    NoTextureLoss => "no_texture_loss",
});

keyed_enum!(Schedule { Constant => "constant", Cosine => "cosine" });

impl Ablation {
    pub fn architecture(self) -> Architecture {
        match self {
            Self::NoSpdce => Architecture::NoSpdce,
            Self::NoJpdcf => Architecture::NoJpdcf,
            _ => Architecture::Full,
        }
    }

    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Self::NoColorLoss => LossWeights { gamma: 0.0, ..base },
            Self::NoTextureLoss => LossWeights { beta: 0.0, ..base },
            _ => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    pub mode: TrainMode,
    pub ablation: Ablation,
    pub seed: u64,
    pub patch_size: usize,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-4,
            batch_size: 16,
            epochs: 1,
            loss_weights: LossWeights::default(),
            mode: TrainMode::DegradationAware,
            ablation: Ablation::Full,
            seed: 0,
            patch_size: 96,
            schedule: Schedule::Constant,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(self) -> Result<Self> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(8) {
            return Err(Error::Config(format!("patch_size must be a positive multiple of 8, got {}", self.patch_size)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm must be finite and >= 0, got {}", self.clip_norm)));
        }
        self.loss_weights.validate()?;
        Ok(self)
    }

    /// Loss weights after applying the loss ablations.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.weights(self.loss_weights)
    }

    /// Learning rate for `step` (0-based) of a run of `total_steps` steps.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + libm::cos(core::f64::consts::PI * t.min(1.0)))
            }
        }
    }

    /// Writes every key except `seed`, which belongs to the network section.
    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("learning_rate", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("alpha", self.loss_weights.alpha);
        kv.set("beta", self.loss_weights.beta);
        kv.set("gamma", self.loss_weights.gamma);
        kv.set("mode", self.mode);
        kv.set("ablation", self.ablation);
        kv.set("patch_size", self.patch_size);
        kv.set("schedule", self.schedule);
        kv.set("clip_norm", self.clip_norm);
        kv.set("checkpoint_every", self.checkpoint_every);
    }

    pub fn take_kv(kv: &mut KeyValues, seed: u64) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            loss_weights: LossWeights {
                alpha: kv.take_or("alpha", d.loss_weights.alpha)?,
                beta: kv.take_or("beta", d.loss_weights.beta)?,
                gamma: kv.take_or("gamma", d.loss_weights.gamma)?,
            },
            mode: kv.take_or("mode", d.mode)?,
            ablation: kv.take_or("ablation", d.ablation)?,
            seed,
            patch_size: kv.take_or("patch_size", d.patch_size)?,
            schedule: kv.take_or("schedule", d.schedule)?,
            clip_norm: kv.take_or("clip_norm", d.clip_norm)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
        })
    }
}

/// Network and training configuration read from one `key = value` file. The
/// single `seed` key drives both parameter initialization and data order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(network: NetworkConfig, train: TrainConfig) -> Result<Self> {
        let train = TrainConfig { seed: network.seed, ..train };
        Ok(Self { network: network.validate()?, train: train.validate()? })
    }

    pub fn take_kv(kv: &mut KeyValues) -> Result<Self> {
        let network = NetworkConfig::take_kv(kv)?;
        let train = TrainConfig::take_kv(kv, network.seed)?;
        Self::new(network, train)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::take_kv(&mut kv)?;
        kv.ensure_empty()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        self.network.write_kv(kv);
        self.train.write_kv(kv);
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        self.write_kv(&mut kv);
        kv.to_text()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.network.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn build_network(&self) -> Result<FusionNetwork> {
        FusionNetwork::new(self.network.clone(), self.train.ablation.architecture())
    }
}

/// First and second Adam moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected Adam update. Parameters and moments are rounded to
    /// f32 afterwards.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
        let c2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = round_f32(ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i]);
                v[i] = round_f32(ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i]);
                let step = lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + ADAM_EPS);
                p[i] = round_f32(p[i] - step);
            }
        }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Number of batches of `epoch` already consumed.
    pub batch_cursor: u64,
    pub network: FusionNetwork,
    pub adam: AdamState,
    /// Exponential moving average of the per-step loss reports.
    pub running: LossReport,
}

/// Smoothing factor of [`TrainState::running`].
pub const RUNNING_DECAY: f64 = 0.9;

impl TrainState {
    pub fn new(network: FusionNetwork) -> Self {
        let adam = AdamState::new(network.params().tensors());
        Self { step: 0, epoch: 0, batch_cursor: 0, network, adam, running: LossReport::default() }
    }

    /// One optimizer step on the mean loss of `batch`, with learning rate `lr`.
    pub fn train_step(&mut self, batch: &[TrainingExample], cfg: &TrainConfig, lr: f64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let weights = cfg.effective_weights();
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor> = self.network.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut reports = Vec::with_capacity(batch.len());
        for ex in batch {
            let (report, g) = example_gradients(&self.network, ex, &weights)?;
            if !report.is_finite() || g.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss { step: self.step, detail: format!("{report:?}") });
            }
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += scale * b;
                }
            }
            reports.push(report);
        }
        if cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, cfg.clip_norm);
        }
        self.adam.update(self.network.params_mut().tensors_mut(), &grads, lr);
        let report = LossReport::mean(&reports);
        self.running = if self.step == 0 {
            report
        } else {
            let mix = |old: f64, new: f64| RUNNING_DECAY * old + (1.0 - RUNNING_DECAY) * new;
            LossReport {
                intensity: mix(self.running.intensity, report.intensity),
                texture: mix(self.running.texture, report.texture),
                color: mix(self.running.color, report.color),
                total: mix(self.running.total, report.total),
            }
        };
        self.step += 1;
        Ok(report)
    }
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum());
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// A sample with its encoded prompts and precomputed loss targets.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub sample: FusionSample,
    pub prompt_ir: PromptEmbedding,
    pub prompt_vi: PromptEmbedding,
    pub targets: LossTargets,
}

impl TrainingExample {
    /// In degradation-aware mode the sample's prompts are encoded and the
    /// clean references are the targets. In degradation-agnostic mode both
    /// branches get the fixed no-degradation prompts and the inputs serve as
    /// references.
    pub fn new(sample: FusionSample, encoder: &dyn PromptEncoder, mode: TrainMode) -> Result<Self> {
        match mode {
            TrainMode::DegradationAware => {
                let prompt_ir = encoder.encode(&sample.prompt_ir)?;
                let prompt_vi = encoder.encode(&sample.prompt_vi)?;
                let targets = LossTargets::new(&sample)?;
                Ok(Self { sample, prompt_ir, prompt_vi, targets })
            }
            TrainMode::DegradationAgnostic => {
                let clean = PromptTemplate::clean();
                let prompt_ir = encoder.encode(&clean.render_ir())?;
                let prompt_vi = encoder.encode(&clean.render_vi())?;
                let as_reference = FusionSample {
                    ir_reference: sample.ir_degraded.clone(),
                    vi_reference: sample.vi_degraded.clone(),
                    ..sample.clone()
                };
                let targets = LossTargets::new(&as_reference)?;
                Ok(Self { sample, prompt_ir, prompt_vi, targets })
            }
        }
    }
}

/// Loss report and parameter gradients for one example.
pub fn example_gradients(
    net: &FusionNetwork,
    ex: &TrainingExample,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Tensor>)> {
    net.check_inputs(&ex.sample.ir_degraded, &ex.sample.vi_degraded)?;
    let mut g = Graph::with_params(net.params());
    let inputs =
        GraphInputs::new(&mut g, &ex.sample.ir_degraded, &ex.sample.vi_degraded, &ex.prompt_ir, &ex.prompt_vi)?;
    let out = net.forward_graph(&mut g, inputs.ir, inputs.vi, inputs.prompt_ir, inputs.prompt_vi)?;
    let losses = loss_graph(&mut g, out, &ex.targets, weights)?;
    let report = losses.report(&g);
    let grads = g.backward(losses.total);
    Ok((report, g.param_grads(&grads)))
}

/// Loss of one example without gradients.
pub fn example_loss(net: &FusionNetwork, ex: &TrainingExample, weights: &LossWeights) -> Result<LossReport> {
    let fused = net.forward(&ex.sample.ir_degraded, &ex.sample.vi_degraded, &ex.prompt_ir, &ex.prompt_vi)?;
    ex.targets.report(&fused, weights)
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch.{epoch}")));
    order.shuffle(&mut rng);
    order
}
