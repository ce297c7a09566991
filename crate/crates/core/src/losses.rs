//! Intensity, texture and color losses and their weighted sum.
//!
//! Intensity and texture compare the fused luminance with the elementwise
//! maximum of the clean references (pixel values and Sobel magnitudes
//! respectively); color compares fused chroma with the clean visible chroma.
//! Every term is a per-pixel mean absolute error.

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{shape_err, Result};
use crate::image::{FusionSample, ImageTensor, YCbCrImage};
use crate::imgproc::{elementwise_max, rgb_to_ycbcr, sobel_gradient};
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub intensity: f64,
    pub texture: f64,
    pub color: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_components(intensity: f64, texture: f64, color: f64, w: &LossWeights) -> Self {
        let total = w.alpha * intensity + w.beta * texture + w.gamma * color;
        Self { intensity, texture, color, total }
    }

    pub fn is_finite(&self) -> bool {
        self.intensity.is_finite() && self.texture.is_finite() && self.color.is_finite() && self.total.is_finite()
    }

    /// Componentwise mean of several reports.
    pub fn mean<'a>(reports: impl IntoIterator<Item = &'a LossReport>) -> Self {
        let mut acc = Self::default();
        let mut n = 0usize;
        for r in reports {
            acc.intensity += r.intensity;
            acc.texture += r.texture;
            acc.color += r.color;
            acc.total += r.total;
            n += 1;
        }
        let n = n.max(1) as f64;
        Self { intensity: acc.intensity / n, texture: acc.texture / n, color: acc.color / n, total: acc.total / n }
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum::<f64>() / a.len() as f64
}

fn check_luma(a: &ImageTensor, b: &ImageTensor, c: &ImageTensor) -> Result<()> {
    for img in [a, b, c] {
        if img.channels() != 1 || !img.same_size(a) {
            return Err(shape_err!("loss inputs must be single-channel images of one size"));
        }
    }
    Ok(())
}

pub fn intensity_loss(fused_y: &ImageTensor, ir_ref: &ImageTensor, vi_ref_y: &ImageTensor) -> Result<f64> {
    check_luma(fused_y, ir_ref, vi_ref_y)?;
    let target = elementwise_max(ir_ref.data(), vi_ref_y.data());
    Ok(mean_abs_diff(fused_y.data(), &target))
}

pub fn texture_loss(fused_y: &ImageTensor, ir_ref: &ImageTensor, vi_ref_y: &ImageTensor) -> Result<f64> {
    check_luma(fused_y, ir_ref, vi_ref_y)?;
    let target = elementwise_max(sobel_gradient(ir_ref)?.data(), sobel_gradient(vi_ref_y)?.data());
    Ok(mean_abs_diff(sobel_gradient(fused_y)?.data(), &target))
}

pub fn color_loss(fused: &YCbCrImage, vi_ref: &YCbCrImage) -> Result<f64> {
    if fused.height != vi_ref.height || fused.width != vi_ref.width {
        return Err(shape_err!("color loss on {}x{} vs {}x{}", fused.height, fused.width, vi_ref.height, vi_ref.width));
    }
    Ok(mean_abs_diff(&fused.cb, &vi_ref.cb) + mean_abs_diff(&fused.cr, &vi_ref.cr))
}

/// Loss of a fused output (Y, Cb, Cr planes) against the clean references of `sample`.
pub fn total_loss(sample: &FusionSample, fused: &ImageTensor, w: &LossWeights) -> Result<LossReport> {
    let targets = LossTargets::new(sample)?;
    targets.report(fused, w)
}

/// Constant loss targets derived from the clean references of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    /// `max(ir_ref, vi_ref_y)`
    pub intensity: Tensor,
    /// `max(sobel(ir_ref), sobel(vi_ref_y))`
    pub texture: Tensor,
    pub cb: Tensor,
    pub cr: Tensor,
}

impl LossTargets {
    pub fn new(sample: &FusionSample) -> Result<Self> {
        let (h, w) = (sample.height(), sample.width());
        let vi = rgb_to_ycbcr(&sample.vi_reference)?;
        let vi_y = vi.luma_image()?;
        let ir = &sample.ir_reference;
        let shape = [1, h, w];
        Ok(Self {
            intensity: Tensor::new(&shape, elementwise_max(ir.data(), vi_y.data()))?,
            texture: Tensor::new(&shape, elementwise_max(sobel_gradient(ir)?.data(), sobel_gradient(&vi_y)?.data()))?,
            cb: Tensor::new(&shape, vi.cb)?,
            cr: Tensor::new(&shape, vi.cr)?,
        })
    }

    pub fn report(&self, fused: &ImageTensor, w: &LossWeights) -> Result<LossReport> {
        let [3, h, wd] = fused.tensor().shape()[..] else {
            return Err(shape_err!("fused output must be (3, H, W), got {:?}", fused.tensor().shape()));
        };
        if self.intensity.shape() != [1, h, wd] {
            return Err(shape_err!("fused output {h}x{wd} does not match the references"));
        }
        let y = fused.channel_image(0);
        let grad = sobel_gradient(&y)?;
        let intensity = mean_abs_diff(y.data(), self.intensity.data());
        let texture = mean_abs_diff(grad.data(), self.texture.data());
        let color = mean_abs_diff(fused.plane(1), self.cb.data()) + mean_abs_diff(fused.plane(2), self.cr.data());
        Ok(LossReport::from_components(intensity, texture, color, w))
    }
}

/// Loss nodes appended to a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub intensity: Var,
    pub texture: Var,
    pub color: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Var| g.value(x).data()[0];
        LossReport {
            intensity: v(self.intensity),
            texture: v(self.texture),
            color: v(self.color),
            total: v(self.total),
        }
    }
}

/// Appends the three losses and their weighted sum for a `(3, H, W)` YCbCr
/// output node. Terms with zero weight are reported but left out of the total.
pub fn loss_graph(g: &mut Graph, fused: Var, targets: &LossTargets, w: &LossWeights) -> Result<LossVars> {
    let [3, h, wd] = g.shape(fused)[..] else {
        return Err(shape_err!("fused output must be (3, H, W), got {:?}", g.shape(fused)));
    };
    if targets.intensity.shape() != [1, h, wd] {
        return Err(shape_err!("fused output {h}x{wd} does not match the references"));
    }
    let y = g.narrow(fused, 0, 1);
    let cb = g.narrow(fused, 1, 1);
    let cr = g.narrow(fused, 2, 1);
    let intensity = g.l1_mean(y, targets.intensity.clone());
    let grad = g.sobel(y);
    let texture = g.l1_mean(grad, targets.texture.clone());
    let cb_l = g.l1_mean(cb, targets.cb.clone());
    let cr_l = g.l1_mean(cr, targets.cr.clone());
    let color = g.add(cb_l, cr_l);

    let mut total: Option<Var> = None;
    for (term, weight) in [(intensity, w.alpha), (texture, w.beta), (color, w.gamma)] {
        if weight == 0.0 {
            continue;
        }
        let scaled = g.scale(term, weight);
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(LossVars { intensity, texture, color, total })
}
