//! Image-role value types.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// A `(C, H, W)` image with `C` in {1, 3} and every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let [c, h, w] = tensor.shape()[..] else {
            return Err(shape_err!("image must be rank 3, got {:?}", tensor.shape()));
        };
        if c != 1 && c != 3 {
            return Err(shape_err!("image must have 1 or 3 channels, got {c}"));
        }
        if h == 0 || w == 0 {
            return Err(shape_err!("image has an empty dimension: {h}x{w}"));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { tensor })
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[channels, height, width], data)?)
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_vec(channels, height, width, data)
    }

    /// Clamps every value into `[0, 1]`; NaN maps to 0.
    pub fn from_clamped(tensor: Tensor) -> Result<Self> {
        Self::new(tensor.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[channels, height, width], value))
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        self.tensor.plane(c)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Single-channel image holding plane `c`.
    pub fn channel_image(&self, c: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        Self { tensor: Tensor::new(&[1, h, w], self.plane(c).to_vec()).expect("plane size") }
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }

    /// Crops the `size_h x size_w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Self> {
        if top + size_h > self.height() || left + size_w > self.width() {
            return Err(shape_err!(
                "crop {}x{} at ({top}, {left}) exceeds {}x{}",
                size_h,
                size_w,
                self.height(),
                self.width()
            ));
        }
        Self::from_fn(self.channels(), size_h, size_w, |c, y, x| self.get(c, top + y, left + x))
    }
}

/// Full-range BT.601 luminance/chrominance planes. Chroma is offset so that
/// neutral gray sits at 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct YCbCrImage {
    pub height: usize,
    pub width: usize,
    pub y: Vec<f64>,
    pub cb: Vec<f64>,
    pub cr: Vec<f64>,
}

impl YCbCrImage {
    pub fn new(height: usize, width: usize, y: Vec<f64>, cb: Vec<f64>, cr: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if y.len() != n || cb.len() != n || cr.len() != n {
            return Err(shape_err!("YCbCr planes must all hold {height}x{width} values"));
        }
        Ok(Self { height, width, y, cb, cr })
    }

    /// Reads a 3-channel tensor whose channels are already Y, Cb, Cr.
    pub fn from_planes(t: &Tensor) -> Result<Self> {
        let [3, h, w] = t.shape()[..] else {
            return Err(shape_err!("YCbCr tensor must be (3, H, W), got {:?}", t.shape()));
        };
        Self::new(h, w, t.plane(0).to_vec(), t.plane(1).to_vec(), t.plane(2).to_vec())
    }

    pub fn to_planes(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.y.len());
        data.extend_from_slice(&self.y);
        data.extend_from_slice(&self.cb);
        data.extend_from_slice(&self.cr);
        Tensor::new(&[3, self.height, self.width], data).expect("plane sizes checked at construction")
    }

    pub fn luma_image(&self) -> Result<ImageTensor> {
        ImageTensor::from_vec(1, self.height, self.width, self.y.clone())
    }
}

/// One training or evaluation example: degraded inputs, clean references and
/// the prompt texts describing the degradations.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSample {
    pub ir_degraded: ImageTensor,
    pub vi_degraded: ImageTensor,
    pub ir_reference: ImageTensor,
    pub vi_reference: ImageTensor,
    pub prompt_ir: String,
    pub prompt_vi: String,
}

impl FusionSample {
    pub fn new(
        ir_degraded: ImageTensor,
        vi_degraded: ImageTensor,
        ir_reference: ImageTensor,
        vi_reference: ImageTensor,
        prompt_ir: String,
        prompt_vi: String,
    ) -> Result<Self> {
        if ir_degraded.channels() != 1 || ir_reference.channels() != 1 {
            return Err(shape_err!("infrared images must have 1 channel"));
        }
        if vi_degraded.channels() != 3 || vi_reference.channels() != 3 {
            return Err(shape_err!("visible images must have 3 channels"));
        }
        let all_same = [&vi_degraded, &ir_reference, &vi_reference].iter().all(|img| img.same_size(&ir_degraded));
        if !all_same {
            return Err(shape_err!("all four images of a sample must share height and width"));
        }
        Ok(Self { ir_degraded, vi_degraded, ir_reference, vi_reference, prompt_ir, prompt_vi })
    }

    pub fn height(&self) -> usize {
        self.ir_degraded.height()
    }

    pub fn width(&self) -> usize {
        self.ir_degraded.width()
    }

    /// Same crop window applied to all four images.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        Ok(Self {
            ir_degraded: self.ir_degraded.crop(top, left, size, size)?,
            vi_degraded: self.vi_degraded.crop(top, left, size, size)?,
            ir_reference: self.ir_reference.crop(top, left, size, size)?,
            vi_reference: self.vi_reference.crop(top, left, size, size)?,
            prompt_ir: self.prompt_ir.clone(),
            prompt_vi: self.prompt_vi.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(matches!(ImageTensor::from_vec(1, 1, 2, vec![0.5, 1.5]), Err(Error::Range(_))));
        assert!(matches!(ImageTensor::from_vec(1, 1, 1, vec![f64::NAN]), Err(Error::Range(_))));
        assert!(matches!(ImageTensor::from_vec(2, 1, 1, vec![0.0, 0.0]), Err(Error::Shape(_))));
        assert!(ImageTensor::from_vec(1, 1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn sample_requires_matching_sizes() {
        let ir = ImageTensor::constant(1, 8, 8, 0.2).unwrap();
        let vi = ImageTensor::constant(3, 8, 8, 0.4).unwrap();
        let small = ImageTensor::constant(3, 8, 16, 0.4).unwrap();
        assert!(FusionSample::new(ir.clone(), vi.clone(), ir.clone(), vi.clone(), "a".into(), "b".into()).is_ok());
        assert!(FusionSample::new(ir.clone(), small, ir.clone(), vi.clone(), "a".into(), "b".into()).is_err());
        assert!(FusionSample::new(vi.clone(), vi.clone(), ir, vi, "a".into(), "b".into()).is_err());
    }
}
