//! Image-processing primitives shared by the losses, the metrics and the network.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::image::{ImageTensor, YCbCrImage};
use crate::nn::{Conv2d, Graph, ParamStore, Var};
use crate::tensor::Tensor;

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;
/// `2 (1 - KB)` and `2 (1 - KR)`.
const CB_SCALE: f64 = 1.772;
const CR_SCALE: f64 = 1.402;

/// Default histogram resolution for 8-bit-equivalent data.
pub const HIST_BINS: usize = 256;

/// Full-range BT.601 conversion of an RGB image.
pub fn rgb_to_ycbcr(img: &ImageTensor) -> Result<YCbCrImage> {
    if img.channels() != 3 {
        return Err(shape_err!("rgb_to_ycbcr needs 3 channels, got {}", img.channels()));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let n = r.len();
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let luma = KR * r[i] + KG * g[i] + KB * b[i];
        y.push(luma);
        cb.push((b[i] - luma) / CB_SCALE + 0.5);
        cr.push((r[i] - luma) / CR_SCALE + 0.5);
    }
    YCbCrImage::new(img.height(), img.width(), y, cb, cr)
}

/// Exact algebraic inverse of [`rgb_to_ycbcr`], without clamping. Returns the
/// `(3, H, W)` RGB planes.
pub fn ycbcr_to_rgb_unclamped(img: &YCbCrImage) -> Tensor {
    let n = img.y.len();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let r = img.y[i] + CR_SCALE * (img.cr[i] - 0.5);
        let b = img.y[i] + CB_SCALE * (img.cb[i] - 0.5);
        let g = (img.y[i] - KR * r - KB * b) / KG;
        out[i] = r;
        out[n + i] = g;
        out[2 * n + i] = b;
    }
    Tensor::new(&[3, img.height, img.width], out).expect("plane sizes")
}

/// Inverse color transform clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &YCbCrImage) -> ImageTensor {
    ImageTensor::from_clamped(ycbcr_to_rgb_unclamped(img)).expect("clamped RGB is a valid image")
}

/// Luminance (Y) of an image: identity for one channel, BT.601 for three.
pub fn luminance(img: &ImageTensor) -> ImageTensor {
    match img.channels() {
        1 => img.clone(),
        _ => {
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            let y = (0..r.len()).map(|i| (KR * r[i] + KG * g[i] + KB * b[i]).clamp(0.0, 1.0)).collect();
            ImageTensor::from_vec(1, img.height(), img.width(), y).expect("luma in range")
        }
    }
}

/// Raw Sobel responses `(G_x, G_y)` of an `h x w` plane with replicate padding.
///
/// `G_x` uses `[[-1,0,1],[-2,0,2],[-1,0,1]]`, `G_y` its transpose, both applied
/// as cross-correlation.
pub fn sobel_components(data: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        data[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = y as usize * w + x as usize;
            gx[p] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[p] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// `|G_x| + |G_y|` of a single-channel image. The result is a plain `(1, H, W)`
/// tensor: gradient magnitudes can exceed 1.
pub fn sobel_gradient(img: &ImageTensor) -> Result<Tensor> {
    if img.channels() != 1 {
        return Err(shape_err!("sobel_gradient needs 1 channel, got {}", img.channels()));
    }
    let (gx, gy) = sobel_components(img.data(), img.height(), img.width());
    let mag = gx.iter().zip(&gy).map(|(a, b)| libm::fabs(*a) + libm::fabs(*b)).collect();
    Tensor::new(&[1, img.height(), img.width()], mag)
}

/// Elementwise maximum of two equally shaped slices.
pub fn elementwise_max(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| if y > x { *y } else { *x }).collect()
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// `bins x bins` co-occurrence counts, row index from `a`, column from `b`.
/// Bins are uniform over `[0, 1]`; the value 1.0 falls in the last bin.
pub fn joint_histogram(a: &ImageTensor, b: &ImageTensor, bins: usize) -> Result<Vec<u64>> {
    if a.channels() != 1 || b.channels() != 1 || !a.same_size(b) {
        return Err(shape_err!(
            "joint_histogram needs two single-channel images of equal size, got {:?} and {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        ));
    }
    if bins < 2 {
        return Err(crate::Error::Config(format!("joint_histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0u64; bins * bins];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        counts[bin_of(x, bins) * bins + bin_of(y, bins)] += 1;
    }
    Ok(counts)
}

/// Marginal histogram of a single-channel image.
pub fn histogram(a: &ImageTensor, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &x in a.data() {
        counts[bin_of(x, bins)] += 1;
    }
    counts
}

/// Learned x2 downsampling: 3x3 stride-2 convolution doubling the channels.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self { conv: Conv2d::strided(store, name, channels, 2 * channels, 3, 2) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [c, h, w] = g.shape(x)[..] else { return Err(shape_err!("downsample expects (C, H, W)")) };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("downsample needs even dimensions, got {h}x{w}"));
        }
        if c != self.conv.in_channels {
            return Err(shape_err!("downsample built for {} channels, got {c}", self.conv.in_channels));
        }
        Ok(self.conv.forward(g, x))
    }
}

/// Learned x2 upsampling: nearest-neighbour x2 then a 3x3 convolution halving the channels.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl Upsample {
    /// # Panics
    ///
    /// Panics if `channels` is odd.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        assert!(channels.is_multiple_of(2), "upsample needs an even channel count");
        Self { conv: Conv2d::new(store, name, channels, channels / 2, 3) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [c, _, _] = g.shape(x)[..] else { return Err(shape_err!("upsample expects (C, H, W)")) };
        if c % 2 != 0 || c != self.conv.in_channels {
            return Err(shape_err!("upsample built for {} channels, got {c}", self.conv.in_channels));
        }
        let up = g.upsample2(x);
        Ok(self.conv.forward(g, up))
    }
}
