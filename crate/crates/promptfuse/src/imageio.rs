//! 8-bit PNG/JPEG decoding and PNG encoding of [`ImageTensor`]s.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use promptfuse_core::imgproc::luminance;
use promptfuse_core::ImageTensor;

use crate::error::{Error, Result};

/// Decodes an 8-bit PNG or JPEG. Grayscale files give one channel, colour
/// files three; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let img_err = |source| Error::Image { path: path.to_path_buf(), source };
    let format = image::guess_format(&bytes).map_err(img_err)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(img_err(image::ImageError::Unsupported(image::error::ImageFormatHint::Exact(format).into())));
    }
    let img = image::load_from_memory_with_format(&bytes, format).map_err(img_err)?;
    Ok(from_dynamic(&img)?)
}

/// Converts a decoded image to unit-interval intensities.
pub fn from_dynamic(img: &DynamicImage) -> promptfuse_core::Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = f64::from(px[c]) / 255.0;
            }
        }
        ImageTensor::from_vec(3, h, w, data)
    } else {
        let data = img.to_luma8().pixels().map(|p| f64::from(p[0]) / 255.0).collect();
        ImageTensor::from_vec(1, h, w, data)
    }
}

/// Nearest 8-bit level of a unit-interval value.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantizes to 8 bits: one channel gives a grayscale image, three an RGB image.
pub fn to_dynamic(img: &ImageTensor) -> DynamicImage {
    let (w, h) = (img.width(), img.height());
    match img.channels() {
        1 => {
            let buf = img.data().iter().map(|&v| quantize(v)).collect();
            DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches size"))
        }
        _ => {
            let mut buf = Vec::with_capacity(3 * w * h);
            for i in 0..w * h {
                for c in 0..3 {
                    buf.push(quantize(img.plane(c)[i]));
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches size"))
        }
    }
}

/// Writes an 8-bit PNG, creating parent directories.
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    to_dynamic(img)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Rounds every value to its 8-bit level, as a save/load round trip would.
pub fn quantized(img: &ImageTensor) -> ImageTensor {
    let data = img.data().iter().map(|&v| f64::from(quantize(v)) / 255.0).collect();
    ImageTensor::from_vec(img.channels(), img.height(), img.width(), data).expect("quantized values are in range")
}

/// Forces `img` to one channel (luminance) or three (gray replicated).
pub fn with_channels(img: &ImageTensor, channels: usize) -> ImageTensor {
    match (img.channels(), channels) {
        (a, b) if a == b => img.clone(),
        (_, 1) => luminance(img),
        _ => {
            let plane = img.plane(0);
            let data = [plane, plane, plane].concat();
            ImageTensor::from_vec(3, img.height(), img.width(), data).expect("replicated plane is in range")
        }
    }
}
