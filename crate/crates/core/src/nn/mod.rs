//! Autodiff engine, parameter storage and the reusable learned blocks.

pub mod graph;
pub mod params;

use alloc::format;
use alloc::vec::Vec;

pub use graph::{ActiveSet, Gradients, Graph, Var};
pub use params::{kaiming_std, Init, ParamId, ParamStore};

use crate::config::MSCONV_KERNELS;
use crate::error::{shape_err, Result};

/// Negative slope of every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Bottleneck reduction of channel attention.
pub const CA_REDUCTION: usize = 8;
/// Hidden expansion of the gated feed-forward (before gating doubles it).
pub const FFN_EXPANSION: usize = 2;
/// Spatial-attention kernel size.
pub const SA_KERNEL: usize = 7;

/// Group count for group normalization: 8, or the largest divisor of
/// `channels` not above 8 (so `channels` itself when it is below 8).
pub fn gn_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Stride-1 dense convolution with bias.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::build(store, name, cin, cout, kernel, 1, 1, true)
    }

    /// Stride-1 dense convolution with bias whose weight starts from `init`
    /// instead of Kaiming normal.
    pub fn with_init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, init: Init) -> Self {
        Self::build_with(store, name, cin, cout, kernel, 1, 1, true, Some(init))
    }

    pub fn strided(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self::build(store, name, cin, cout, kernel, stride, 1, true)
    }

    /// Depthwise (one filter per channel) convolution without bias.
    pub fn depthwise(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Self {
        Self::build(store, name, channels, channels, kernel, 1, channels, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        Self::build_with(store, name, cin, cout, kernel, stride, groups, bias, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_with(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        init: Option<Init>,
    ) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            &[cout, cin / groups, kernel, kernel],
            init.unwrap_or(Init::Kaiming { fan_in }),
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[cout], Init::Constant(0.0)));
        Self { weight, bias, in_channels: cin, out_channels: cout, kernel, stride, groups }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Self::with_init(store, name, input, output, Init::Kaiming { fan_in: input })
    }

    /// Weight and bias both start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Self::with_init(store, name, input, output, Init::Constant(0.0))
    }

    fn with_init(store: &mut ParamStore, name: &str, input: usize, output: usize, init: Init) -> Self {
        let weight = store.add(&format!("{name}.weight"), &[output, input], init);
        let bias = store.add(&format!("{name}.bias"), &[output], Init::Constant(0.0));
        Self { weight, bias, in_features: input, out_features: output }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, b)
    }
}

/// Two-layer MLP mapping a prompt embedding to per-channel guidance
/// `(scale, shift)`. The output layer starts at zero so that guidance is the
/// identity at initialization.
#[derive(Clone, Debug)]
pub struct GuidanceMlp {
    pub hidden: Linear,
    pub output: Linear,
    pub channels: usize,
}

impl GuidanceMlp {
    pub fn new(store: &mut ParamStore, name: &str, prompt_dim: usize, channels: usize) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), prompt_dim, prompt_dim),
            output: Linear::zeroed(store, &format!("{name}.fc2"), prompt_dim, 2 * channels),
            channels,
        }
    }

    /// Returns the `(scale, shift)` vectors, each of length `channels`.
    pub fn forward(&self, g: &mut Graph, prompt: Var) -> (Var, Var) {
        let h = self.hidden.forward(g, prompt);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let out = self.output.forward(g, h);
        (g.narrow(out, 0, self.channels), g.narrow(out, self.channels, self.channels))
    }
}

/// `f * BC(scale) + BC(shift) + f`.
pub fn prompt_guidance(g: &mut Graph, features: Var, scale: Var, shift: Var) -> Result<Var> {
    let c = g.shape(features)[0];
    if g.shape(scale) != [c] || g.shape(shift) != [c] {
        return Err(shape_err!("guidance vectors {:?}/{:?} do not match {c} channels", g.shape(scale), g.shape(shift)));
    }
    Ok(g.guide(features, scale, shift))
}

/// Parallel kernel-1/3/5 branches of `depth` conv+LeakyReLU layers, 1x1
/// reduction, residual, group norm and LeakyReLU.
#[derive(Clone, Debug)]
pub struct MsConvBlock {
    pub branches: Vec<Vec<Conv2d>>,
    pub reduce: Conv2d,
    pub gn_gamma: ParamId,
    pub gn_beta: ParamId,
    pub groups: usize,
}

impl MsConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, depth: usize) -> Self {
        let branches = MSCONV_KERNELS
            .iter()
            .map(|&k| {
                (0..depth).map(|l| Conv2d::new(store, &format!("{name}.k{k}.{l}"), channels, channels, k)).collect()
            })
            .collect();
        let n = MSCONV_KERNELS.len();
        Self {
            branches,
            reduce: Conv2d::new(store, &format!("{name}.reduce"), n * channels, channels, 1),
            gn_gamma: store.add(&format!("{name}.gn.gamma"), &[channels], Init::Constant(1.0)),
            gn_beta: store.add(&format!("{name}.gn.beta"), &[channels], Init::Constant(0.0)),
            groups: gn_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let outs: Vec<Var> = self
            .branches
            .iter()
            .map(|branch| {
                branch.iter().fold(x, |h, conv| {
                    let h = conv.forward(g, h);
                    g.leaky_relu(h, LEAKY_SLOPE)
                })
            })
            .collect();
        let cat = g.concat(&outs);
        let reduced = self.reduce.forward(g, cat);
        let res = g.add(reduced, x);
        let (gamma, beta) = (g.param(self.gn_gamma), g.param(self.gn_beta));
        let normed = g.group_norm(res, gamma, beta, self.groups);
        g.leaky_relu(normed, LEAKY_SLOPE)
    }
}

/// Transformer block attending across channels: tokens are channels and each
/// token's features are the flattened spatial positions, so the attention
/// matrix per head is `(C/heads) x (C/heads)`. Pre-norm attention with
/// residual, then a pre-norm gated depthwise-conv feed-forward with residual.
/// Both output projections start at zero, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub ffn_in: Conv2d,
    pub ffn_dw: Conv2d,
    pub ffn_out: Conv2d,
    pub channels: usize,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(shape_err!("{heads} attention heads do not divide {channels} channels"));
        }
        let hidden = FFN_EXPANSION * channels;
        Ok(Self {
            norm1_gamma: store.add(&format!("{name}.norm1.gamma"), &[channels], Init::Constant(1.0)),
            norm1_beta: store.add(&format!("{name}.norm1.beta"), &[channels], Init::Constant(0.0)),
            qkv: Conv2d::new(store, &format!("{name}.qkv"), channels, 3 * channels, 1),
            proj: Conv2d::with_init(store, &format!("{name}.proj"), channels, channels, 1, Init::Constant(0.0)),
            norm2_gamma: store.add(&format!("{name}.norm2.gamma"), &[channels], Init::Constant(1.0)),
            norm2_beta: store.add(&format!("{name}.norm2.beta"), &[channels], Init::Constant(0.0)),
            ffn_in: Conv2d::new(store, &format!("{name}.ffn_in"), channels, 2 * hidden, 1),
            ffn_dw: Conv2d::depthwise(store, &format!("{name}.ffn_dw"), 2 * hidden, 3),
            ffn_out: Conv2d::with_init(store, &format!("{name}.ffn_out"), hidden, channels, 1, Init::Constant(0.0)),
            channels,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let [c, h, w] = g.shape(x)[..] else { panic!("transformer block expects (C, H, W)") };
        let hw = h * w;
        let d = c / self.heads;

        let (g1, b1) = (g.param(self.norm1_gamma), g.param(self.norm1_beta));
        let y = g.layer_norm_channels(x, g1, b1);
        let qkv = self.qkv.forward(g, y);
        let qkv = g.reshape(qkv, &[3 * c, hw]);
        let inv_sqrt = 1.0 / libm::sqrt(hw as f64);
        let heads: Vec<Var> = (0..self.heads)
            .map(|head| {
                let q = g.narrow(qkv, head * d, d);
                let k = g.narrow(qkv, c + head * d, d);
                let v = g.narrow(qkv, 2 * c + head * d, d);
                let scores = g.matmul_nt(q, k);
                let scores = g.scale(scores, inv_sqrt);
                let attn = g.softmax_rows(scores);
                g.matmul(attn, v)
            })
            .collect();
        let attended = g.concat(&heads);
        let attended = g.reshape(attended, &[c, h, w]);
        let attended = self.proj.forward(g, attended);
        let x1 = g.add(x, attended);

        let (g2, b2) = (g.param(self.norm2_gamma), g.param(self.norm2_beta));
        let z = g.layer_norm_channels(x1, g2, b2);
        let z = self.ffn_in.forward(g, z);
        let z = self.ffn_dw.forward(g, z);
        let hidden = FFN_EXPANSION * c;
        let gate = g.narrow(z, 0, hidden);
        let gate = g.gelu(gate);
        let value = g.narrow(z, hidden, hidden);
        let gated = g.mul(gate, value);
        let out = self.ffn_out.forward(g, gated);
        g.add(x1, out)
    }
}

/// Squeeze-and-excitation channel gating.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        if channels < CA_REDUCTION {
            return Err(shape_err!("channel attention needs at least {CA_REDUCTION} channels, got {channels}"));
        }
        let hidden = channels / CA_REDUCTION;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let pooled = g.avg_pool(x);
        let h = self.fc1.forward(g, pooled);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.fc2.forward(g, h);
        let gate = g.sigmoid(h);
        g.channel_gate(x, gate)
    }
}

/// Mask from stacked channel-mean/channel-max maps through a 7x7 conv and sigmoid.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Self { conv: Conv2d::new(store, &format!("{name}.conv"), 2, 1, SA_KERNEL) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let stats = g.channel_mean_max(x);
        let logits = self.conv.forward(g, stats);
        let mask = g.sigmoid(logits);
        g.spatial_gate(x, mask)
    }
}
