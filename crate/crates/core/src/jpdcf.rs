//! Cross-modal prompt-guided fusion stage.
//!
//! Both modality prompts are projected into one joint prompt that drives the
//! guidance of (a) the spatially attended, merged modality features and (b)
//! the fused features coming from the previous, coarser stage. The two guided
//! maps are merged through channel attention, then refined by the multi-scale
//! conv block and a transformer stack whose outputs are merged again.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::nn::{
    ChannelAttention, Conv2d, Graph, GuidanceMlp, Linear, MsConvBlock, ParamStore, SpatialAttention, TransformerBlock,
    Var,
};

#[derive(Clone, Debug)]
pub struct JpdcfLayer {
    pub proj: Linear,
    pub guidance: GuidanceMlp,
    pub sa_ir: SpatialAttention,
    pub sa_vi: SpatialAttention,
    pub merge_sources: Conv2d,
    pub attention: ChannelAttention,
    pub merge_guided: Conv2d,
    pub msconv: MsConvBlock,
    pub transformers: Vec<TransformerBlock>,
    pub merge_out: Conv2d,
    pub channels: usize,
    pub prompt_dim: usize,
}

impl JpdcfLayer {
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
            proj: Linear::new(store, &format!("{name}.proj"), 2 * prompt_dim, prompt_dim),
            guidance: GuidanceMlp::new(store, &format!("{name}.guide"), prompt_dim, channels),
            sa_ir: SpatialAttention::new(store, &format!("{name}.sa_ir")),
            sa_vi: SpatialAttention::new(store, &format!("{name}.sa_vi")),
            merge_sources: Conv2d::new(store, &format!("{name}.merge_sources"), 2 * channels, channels, 1),
            attention: ChannelAttention::new(store, &format!("{name}.ca"), 2 * channels)?,
            merge_guided: Conv2d::new(store, &format!("{name}.merge_guided"), 2 * channels, channels, 1),
            msconv: MsConvBlock::new(store, &format!("{name}.msconv"), channels, msconv_depth),
            transformers,
            merge_out: Conv2d::new(store, &format!("{name}.merge_out"), 2 * channels, channels, 1),
            channels,
            prompt_dim,
        })
    }

    /// Joint guidance `(scale, shift)` from the two modality prompts.
    pub fn fuse_prompts(&self, g: &mut Graph, prompt_ir: Var, prompt_vi: Var) -> Result<(Var, Var)> {
        for p in [prompt_ir, prompt_vi] {
            if g.shape(p) != [self.prompt_dim] {
                return Err(shape_err!(
                    "prompt embedding {:?} does not match dimension {}",
                    g.shape(p),
                    self.prompt_dim
                ));
            }
        }
        let cat = g.concat(&[prompt_ir, prompt_vi]);
        let joint = self.proj.forward(g, cat);
        Ok(self.guidance.forward(g, joint))
    }

    /// `previous` is the upsampled output of the coarser stage; the coarsest
    /// stage passes `None` and its merged source features stand in for it.
    pub fn forward(
        &self,
        g: &mut Graph,
        previous: Option<Var>,
        f_ir: Var,
        f_vi: Var,
        prompt_ir: Var,
        prompt_vi: Var,
    ) -> Result<Var> {
        let shape = g.shape(f_ir).to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(shape_err!("fusion stage built for {} channels, got {:?}", self.channels, shape));
        }
        if g.shape(f_vi) != shape.as_slice() {
            return Err(shape_err!("infrared {:?} and visible {:?} features differ", shape, g.shape(f_vi)));
        }
        if let Some(p) = previous {
            if g.shape(p) != shape.as_slice() {
                return Err(shape_err!("previous fused features {:?} do not match {:?}", g.shape(p), shape));
            }
        }
        let (scale, shift) = self.fuse_prompts(g, prompt_ir, prompt_vi)?;

        let a_ir = self.sa_ir.forward(g, f_ir);
        let a_vi = self.sa_vi.forward(g, f_vi);
        let cat = g.concat(&[a_ir, a_vi]);
        let merged = self.merge_sources.forward(g, cat);
        let guided_sources = g.guide(merged, scale, shift);
        let guided_previous = g.guide(previous.unwrap_or(merged), scale, shift);

        let cat = g.concat(&[guided_sources, guided_previous]);
        let gated = self.attention.forward(g, cat);
        let fused = self.merge_guided.forward(g, gated);

        let local = self.msconv.forward(g, fused);
        let global = self.transformers.iter().fold(fused, |h, t| t.forward(g, h));
        let cat = g.concat(&[local, global]);
        Ok(self.merge_out.forward(g, cat))
    }
}
