//! Per-modality prompt-guided feature extractor.
//!
//! The input features are first modulated by the modality prompt, then split
//! into a global branch (a stack of channel-attention transformer blocks) and
//! a local branch (the multi-scale conv block). The two branches are
//! concatenated, gated by channel attention and reduced back to `C` channels
//! by a 1x1 convolution.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::nn::{ChannelAttention, Conv2d, Graph, GuidanceMlp, MsConvBlock, ParamStore, TransformerBlock, Var};

#[derive(Clone, Debug)]
pub struct SpdceLayer {
    pub guidance: GuidanceMlp,
    pub transformers: Vec<TransformerBlock>,
    pub msconv: MsConvBlock,
    pub attention: ChannelAttention,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl SpdceLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        prompt_dim: usize,
        transformer_depth: usize,
        heads: usize,
        msconv_depth: usize,
    ) -> Result<Self> {
        let transformers = (0..transformer_depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.trm{i}"), channels, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            guidance: GuidanceMlp::new(store, &format!("{name}.guide"), prompt_dim, channels),
            transformers,
            msconv: MsConvBlock::new(store, &format!("{name}.msconv"), channels, msconv_depth),
            attention: ChannelAttention::new(store, &format!("{name}.ca"), 2 * channels)?,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), 2 * channels, channels, 1),
            channels,
        })
    }

    /// Prompt-guided features `F^G`.
    pub fn guided(&self, g: &mut Graph, features: Var, prompt: Var) -> Result<Var> {
        self.check(g, features, prompt)?;
        let (scale, shift) = self.guidance.forward(g, prompt);
        crate::nn::prompt_guidance(g, features, scale, shift)
    }

    pub fn forward(&self, g: &mut Graph, features: Var, prompt: Var) -> Result<Var> {
        let guided = self.guided(g, features, prompt)?;
        let global = self.transformers.iter().fold(guided, |h, t| t.forward(g, h));
        let local = self.msconv.forward(g, guided);
        let cat = g.concat(&[global, local]);
        let gated = self.attention.forward(g, cat);
        Ok(self.fuse.forward(g, gated))
    }

    fn check(&self, g: &Graph, features: Var, prompt: Var) -> Result<()> {
        match g.shape(features) {
            [c, _, _] if *c == self.channels => {}
            s => return Err(shape_err!("extractor built for {} channels, got features {:?}", self.channels, s)),
        }
        if g.shape(prompt) != [self.guidance.hidden.in_features] {
            return Err(shape_err!(
                "prompt embedding {:?} does not match dimension {}",
                g.shape(prompt),
                self.guidance.hidden.in_features
            ));
        }
        Ok(())
    }
}
