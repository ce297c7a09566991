//! Full two-branch fusion network.
//!
//! Each modality goes through a 3x3 shallow convolution and four extractor
//! levels separated by learned x2 downsampling. The fusion decoder runs from
//! the coarsest level up: the coarsest fusion stage sees only the two deepest
//! feature maps, every finer stage also receives the upsampled output of the
//! stage below. Three 3x3 convolutions reconstruct the image, which is
//! squashed by a sigmoid and read as YCbCr.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{shape_err, Error, Result};
use crate::image::{ImageTensor, YCbCrImage};
use crate::imgproc::{rgb_to_ycbcr, Downsample, Upsample};
use crate::jpdcf::JpdcfLayer;
use crate::nn::{kaiming_std, Conv2d, Graph, Init, ParamStore, Var, LEAKY_SLOPE};
use crate::prompt::{PromptEmbedding, PromptEncoder};
use crate::spdce::SpdceLayer;
use crate::tensor::Tensor;

/// Scale of the last reconstruction convolution's initial weights relative
/// to Kaiming, keeping the initial output near the middle of the sigmoid.
pub const OUTPUT_INIT_GAIN: f64 = 0.1;

/// Architecture variants used for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Full,
    /// Extractors replaced by a 3x3 conv + LeakyReLU; prompts unused there.
    NoSpdce,
    /// Fusion stages replaced by concatenation + 1x1 conv.
    NoJpdcf,
}

impl Architecture {
    pub const ALL: [Self; 3] = [Self::Full, Self::NoSpdce, Self::NoJpdcf];

    pub fn key(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoSpdce => "no_spdce",
            Self::NoJpdcf => "no_jpdcf",
        }
    }
}

impl core::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.key() == s).ok_or_else(|| Error::Parse(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub enum Extractor {
    Spdce(Box<SpdceLayer>),
    Plain(Conv2d),
}

impl Extractor {
    fn forward(&self, g: &mut Graph, x: Var, prompt: Var) -> Result<Var> {
        match self {
            Self::Spdce(layer) => layer.forward(g, x, prompt),
            Self::Plain(conv) => {
                let y = conv.forward(g, x);
                Ok(g.leaky_relu(y, LEAKY_SLOPE))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum FusionStage {
    Jpdcf(Box<JpdcfLayer>),
    Plain(Conv2d),
}

impl FusionStage {
    fn forward(&self, g: &mut Graph, previous: Option<Var>, f_ir: Var, f_vi: Var, p_ir: Var, p_vi: Var) -> Result<Var> {
        match self {
            Self::Jpdcf(layer) => layer.forward(g, previous, f_ir, f_vi, p_ir, p_vi),
            Self::Plain(conv) => {
                let parts: Vec<Var> = previous.into_iter().chain([f_ir, f_vi]).collect();
                let cat = g.concat(&parts);
                Ok(conv.forward(g, cat))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionNetwork {
    config: NetworkConfig,
    architecture: Architecture,
    params: ParamStore,
    shallow_ir: Conv2d,
    shallow_vi: Conv2d,
    enc_ir: Vec<Extractor>,
    enc_vi: Vec<Extractor>,
    ds_ir: Vec<Downsample>,
    ds_vi: Vec<Downsample>,
    stages: Vec<FusionStage>,
    us: Vec<Upsample>,
    recon: Vec<Conv2d>,
}

impl FusionNetwork {
    /// Builds a freshly initialized network. Initial values depend only on
    /// `config.seed` and parameter names, so variants share the values of the
    /// parameters they have in common.
    pub fn new(config: NetworkConfig, architecture: Architecture) -> Result<Self> {
        let config = config.validate()?;
        let mut p = ParamStore::new(config.seed);
        let levels = config.num_scales;
        let c0 = config.base_channels;

        let shallow_ir = Conv2d::new(&mut p, "shallow_ir", 1, c0, 3);
        let shallow_vi = Conv2d::new(&mut p, "shallow_vi", 3, c0, 3);

        let extractor = |p: &mut ParamStore, name: &str, c: usize| -> Result<Extractor> {
            Ok(match architecture {
                Architecture::NoSpdce => Extractor::Plain(Conv2d::new(p, name, c, c, 3)),
                _ => Extractor::Spdce(Box::new(SpdceLayer::new(
                    p,
                    name,
                    c,
                    config.prompt_dim,
                    config.transformer_depth,
                    config.attention_heads,
                    config.msconv_depth,
                )?)),
            })
        };
        let mut enc_ir = Vec::with_capacity(levels);
        let mut enc_vi = Vec::with_capacity(levels);
        for l in 0..levels {
            enc_ir.push(extractor(&mut p, &format!("enc_ir.{l}"), config.width(l))?);
            enc_vi.push(extractor(&mut p, &format!("enc_vi.{l}"), config.width(l))?);
        }
        let ds_ir = (0..levels - 1).map(|l| Downsample::new(&mut p, &format!("ds_ir.{l}"), config.width(l))).collect();
        let ds_vi = (0..levels - 1).map(|l| Downsample::new(&mut p, &format!("ds_vi.{l}"), config.width(l))).collect();

        let mut stages = Vec::with_capacity(levels);
        for l in 0..levels {
            let c = config.width(l);
            let name = format!("fuse.{l}");
            stages.push(match architecture {
                Architecture::NoJpdcf => {
                    let inputs = if l == levels - 1 { 2 } else { 3 };
                    FusionStage::Plain(Conv2d::new(&mut p, &name, inputs * c, c, 1))
                }
                _ => FusionStage::Jpdcf(Box::new(JpdcfLayer::new(
                    &mut p,
                    &name,
                    c,
                    config.prompt_dim,
                    config.transformer_depth,
                    config.attention_heads,
                    config.msconv_depth,
                )?)),
            });
        }
        let us = (0..levels - 1).map(|l| Upsample::new(&mut p, &format!("us.{l}"), config.width(l + 1))).collect();
        let recon = vec![
            Conv2d::new(&mut p, "recon.0", c0, c0, 3),
            Conv2d::new(&mut p, "recon.1", c0, c0, 3),
            Conv2d::with_init(&mut p, "recon.2", c0, 3, 3, Init::Normal(OUTPUT_INIT_GAIN * kaiming_std(c0 * 9))),
        ];

        Ok(Self {
            config,
            architecture,
            params: p,
            shallow_ir,
            shallow_vi,
            enc_ir,
            enc_vi,
            ds_ir,
            ds_vi,
            stages,
            us,
            recon,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// A network of another architecture built from the same configuration.
    pub fn ablation_variant(&self, architecture: Architecture) -> Result<Self> {
        Self::new(self.config.clone(), architecture)
    }

    /// Checks the input contract: single-channel infrared, three-channel
    /// visible, equal sizes, both dimensions multiples of 8.
    pub fn check_inputs(&self, ir: &ImageTensor, vi: &ImageTensor) -> Result<()> {
        if ir.channels() != 1 || vi.channels() != 3 {
            return Err(shape_err!(
                "expected 1-channel infrared and 3-channel visible, got {} and {}",
                ir.channels(),
                vi.channels()
            ));
        }
        if !ir.same_size(vi) {
            return Err(shape_err!(
                "infrared {}x{} and visible {}x{} differ",
                ir.height(),
                ir.width(),
                vi.height(),
                vi.width()
            ));
        }
        let factor = 1 << (self.config.num_scales - 1);
        let (h, w) = (ir.height(), ir.width());
        if h < factor || w < factor || h % factor != 0 || w % factor != 0 {
            return Err(shape_err!("image size {h}x{w} must be a positive multiple of {factor}"));
        }
        Ok(())
    }

    /// Graph-level forward pass. `vi_ycc` is the visible image already in
    /// YCbCr. Returns the `(3, H, W)` YCbCr output in `(0, 1)`.
    pub fn forward_graph(&self, g: &mut Graph, ir: Var, vi_ycc: Var, prompt_ir: Var, prompt_vi: Var) -> Result<Var> {
        let levels = self.config.num_scales;
        let mut f_ir = self.shallow_ir.forward(g, ir);
        let mut f_vi = self.shallow_vi.forward(g, vi_ycc);
        let mut feats_ir = Vec::with_capacity(levels);
        let mut feats_vi = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                f_ir = self.ds_ir[l - 1].forward(g, f_ir)?;
                f_vi = self.ds_vi[l - 1].forward(g, f_vi)?;
            }
            f_ir = self.enc_ir[l].forward(g, f_ir, prompt_ir)?;
            f_vi = self.enc_vi[l].forward(g, f_vi, prompt_vi)?;
            feats_ir.push(f_ir);
            feats_vi.push(f_vi);
        }
        let mut fused: Option<Var> = None;
        for l in (0..levels).rev() {
            let previous = match fused {
                Some(f) => Some(self.us[l].forward(g, f)?),
                None => None,
            };
            fused = Some(self.stages[l].forward(g, previous, feats_ir[l], feats_vi[l], prompt_ir, prompt_vi)?);
        }
        let mut h = fused.expect("at least one level");
        for (i, conv) in self.recon.iter().enumerate() {
            h = conv.forward(g, h);
            if i + 1 < self.recon.len() {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(g.sigmoid(h))
    }

    /// Inference on images with already-encoded prompts. The result holds
    /// Y, Cb, Cr planes.
    pub fn forward(
        &self,
        ir: &ImageTensor,
        vi: &ImageTensor,
        prompt_ir: &PromptEmbedding,
        prompt_vi: &PromptEmbedding,
    ) -> Result<ImageTensor> {
        self.check_inputs(ir, vi)?;
        for p in [prompt_ir, prompt_vi] {
            if p.dim() != self.config.prompt_dim {
                return Err(shape_err!(
                    "prompt embedding has dimension {}, network expects {}",
                    p.dim(),
                    self.config.prompt_dim
                ));
            }
        }
        let mut g = Graph::with_params(&self.params);
        let inputs = GraphInputs::new(&mut g, ir, vi, prompt_ir, prompt_vi)?;
        let out = self.forward_graph(&mut g, inputs.ir, inputs.vi, inputs.prompt_ir, inputs.prompt_vi)?;
        ImageTensor::new(g.value(out).clone())
    }

    /// Encodes the two prompt texts and runs [`Self::forward`].
    pub fn fuse(
        &self,
        ir: &ImageTensor,
        vi: &ImageTensor,
        prompt_ir: &str,
        prompt_vi: &str,
        encoder: &dyn PromptEncoder,
    ) -> Result<YCbCrImage> {
        let p_ir = encoder.encode(prompt_ir)?;
        let p_vi = encoder.encode(prompt_vi)?;
        let out = self.forward(ir, vi, &p_ir, &p_vi)?;
        YCbCrImage::from_planes(out.tensor())
    }

    /// Expected `(name, shape)` of every parameter for this configuration and architecture.
    pub fn parameter_plan(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|(n, t)| (String::from(n), t.shape().to_vec())).collect()
    }
}

/// Total number of scalar parameters.
pub fn count_parameters(net: &FusionNetwork) -> usize {
    net.params().count()
}

/// Constant leaves for one forward pass.
pub struct GraphInputs {
    pub ir: Var,
    pub vi: Var,
    pub prompt_ir: Var,
    pub prompt_vi: Var,
}

impl GraphInputs {
    pub fn new(
        g: &mut Graph,
        ir: &ImageTensor,
        vi: &ImageTensor,
        prompt_ir: &PromptEmbedding,
        prompt_vi: &PromptEmbedding,
    ) -> Result<Self> {
        let vi_ycc = rgb_to_ycbcr(vi)?.to_planes();
        Ok(Self {
            ir: g.constant(ir.tensor().clone()),
            vi: g.constant(vi_ycc),
            prompt_ir: g.constant(Tensor::new(&[prompt_ir.dim()], prompt_ir.vector.clone())?),
            prompt_vi: g.constant(Tensor::new(&[prompt_vi.dim()], prompt_vi.vector.clone())?),
        })
    }
}
