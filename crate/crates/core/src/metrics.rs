//! Fusion quality metrics.
//!
//! No-reference: average gradient (AG), edge intensity (EI), standard
//! deviation (SD), spatial frequency (SF). Reference-based: mutual information
//! (MI) and the Xydeas-Petrovic edge transfer index (Q_abf). All functions take
//! single-channel images; [`evaluate`] converts colour inputs to luminance.
//!
//! Definitions used here:
//! - AG: mean over the `(H-1)(W-1)` top-left pixels of `sqrt((dx^2 + dy^2) / 2)`
//!   with forward differences.
//! - EI: mean over all pixels of `sqrt(Sx^2 + Sy^2)` (replicate-padded Sobel).
//! - SD: population standard deviation.
//! - SF: `sqrt(RF^2 + CF^2)`, RF and CF the RMS of horizontal and vertical
//!   first differences over the `H(W-1)` and `(H-1)W` available pairs.
//! - MI: `MI(F, A) + MI(F, B)` in bits from 256-bin joint histograms.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, LN_2};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::ImageTensor;
use crate::imgproc::{histogram, joint_histogram, luminance, sobel_components, HIST_BINS};

fn check_gray(img: &ImageTensor, min: usize) -> Result<()> {
    if img.channels() != 1 {
        return Err(shape_err!("metric needs a single-channel image, got {} channels", img.channels()));
    }
    if img.height() < min || img.width() < min {
        return Err(shape_err!("metric needs at least {min}x{min}, got {}x{}", img.height(), img.width()));
    }
    Ok(())
}

fn check_triple(fused: &ImageTensor, a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    for img in [fused, a, b] {
        check_gray(img, 1)?;
        if !img.same_size(fused) {
            return Err(shape_err!("metric inputs differ in size"));
        }
    }
    Ok(())
}

pub fn avg_gradient(img: &ImageTensor) -> Result<f64> {
    check_gray(img, 2)?;
    let (h, w, d) = (img.height(), img.width(), img.data());
    let mut acc = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let p = d[y * w + x];
            let dx = d[y * w + x + 1] - p;
            let dy = d[(y + 1) * w + x] - p;
            acc += libm::sqrt((dx * dx + dy * dy) / 2.0);
        }
    }
    Ok(acc / ((h - 1) * (w - 1)) as f64)
}

pub fn edge_intensity(img: &ImageTensor) -> Result<f64> {
    check_gray(img, 1)?;
    let (gx, gy) = sobel_components(img.data(), img.height(), img.width());
    let sum: f64 = gx.iter().zip(&gy).map(|(a, b)| libm::sqrt(a * a + b * b)).sum();
    Ok(sum / gx.len() as f64)
}

pub fn std_dev(img: &ImageTensor) -> Result<f64> {
    check_gray(img, 1)?;
    let d = img.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(libm::sqrt(var))
}

pub fn spatial_frequency(img: &ImageTensor) -> Result<f64> {
    check_gray(img, 2)?;
    let (h, w, d) = (img.height(), img.width(), img.data());
    let mut rf = 0.0;
    for y in 0..h {
        for x in 1..w {
            let v = d[y * w + x] - d[y * w + x - 1];
            rf += v * v;
        }
    }
    let mut cf = 0.0;
    for y in 1..h {
        for x in 0..w {
            let v = d[y * w + x] - d[(y - 1) * w + x];
            cf += v * v;
        }
    }
    rf /= (h * (w - 1)) as f64;
    cf /= ((h - 1) * w) as f64;
    Ok(libm::sqrt(rf + cf))
}

fn entropy_bits(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * libm::log(p)
        })
        .sum::<f64>()
        / LN_2
}

/// Histogram entropy of a single-channel image in bits (256 bins).
pub fn entropy(img: &ImageTensor) -> Result<f64> {
    check_gray(img, 1)?;
    Ok(entropy_bits(&histogram(img, HIST_BINS), img.data().len() as f64))
}

fn pair_mi(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let n = a.data().len() as f64;
    let joint = joint_histogram(a, b, HIST_BINS)?;
    let ha = entropy_bits(&histogram(a, HIST_BINS), n);
    let hb = entropy_bits(&histogram(b, HIST_BINS), n);
    let hab = entropy_bits(&joint, n);
    Ok((ha + hb - hab).max(0.0))
}

pub fn mutual_information(fused: &ImageTensor, ir: &ImageTensor, vi: &ImageTensor) -> Result<f64> {
    check_triple(fused, ir, vi)?;
    Ok(pair_mi(fused, ir)? + pair_mi(fused, vi)?)
}

/// Sigmoid constants of Q_abf. `gamma_*` are derived so that a perfectly
/// preserved edge (relative strength 1, orientation agreement 1) scores 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QabfParams {
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    /// Exponent applied to source edge strength for the weights.
    pub weight_exponent: f64,
}

impl Default for QabfParams {
    fn default() -> Self {
        Self { kappa_g: -10.0, sigma_g: 0.5, kappa_a: -20.0, sigma_a: 0.75, weight_exponent: 1.0 }
    }
}

impl QabfParams {
    pub fn gamma_g(&self) -> f64 {
        1.0 + libm::exp(self.kappa_g * (1.0 - self.sigma_g))
    }

    pub fn gamma_a(&self) -> f64 {
        1.0 + libm::exp(self.kappa_a * (1.0 - self.sigma_a))
    }
}

struct Edges {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn edges(img: &ImageTensor) -> Edges {
    let (gx, gy) = sobel_components(img.data(), img.height(), img.width());
    let strength = gx.iter().zip(&gy).map(|(a, b)| libm::sqrt(a * a + b * b)).collect();
    let orientation = gx.iter().zip(&gy).map(|(&a, &b)| if a == 0.0 { FRAC_PI_2 } else { libm::atan(b / a) }).collect();
    Edges { strength, orientation }
}

/// Per-pixel edge preservation `Q^{SF}` of source `s` in fused `f`.
fn preservation(s: &Edges, f: &Edges, q: &QabfParams) -> Vec<f64> {
    let (gg, ga) = (q.gamma_g(), q.gamma_a());
    (0..s.strength.len())
        .map(|i| {
            let (gs, gf) = (s.strength[i], f.strength[i]);
            let rel = if gs == 0.0 && gf == 0.0 {
                0.0
            } else if gs > gf {
                gf / gs
            } else {
                gs / gf
            };
            let agree = 1.0 - libm::fabs(s.orientation[i] - f.orientation[i]) / FRAC_PI_2;
            let qg = gg / (1.0 + libm::exp(q.kappa_g * (rel - q.sigma_g)));
            let qa = ga / (1.0 + libm::exp(q.kappa_a * (agree - q.sigma_a)));
            qg * qa
        })
        .collect()
}

pub fn qabf_with(fused: &ImageTensor, ir: &ImageTensor, vi: &ImageTensor, q: &QabfParams) -> Result<f64> {
    check_triple(fused, ir, vi)?;
    let (ef, ea, eb) = (edges(fused), edges(ir), edges(vi));
    let qa = preservation(&ea, &ef, q);
    let qb = preservation(&eb, &ef, q);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..qa.len() {
        let wa = libm::pow(ea.strength[i], q.weight_exponent);
        let wb = libm::pow(eb.strength[i], q.weight_exponent);
        num += qa[i] * wa + qb[i] * wb;
        den += wa + wb;
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

pub fn qabf(fused: &ImageTensor, ir: &ImageTensor, vi: &ImageTensor) -> Result<f64> {
    qabf_with(fused, ir, vi, &QabfParams::default())
}

/// The six metric values of one fused image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ag: f64,
    pub ei: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub qabf: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 6] = ["AG", "EI", "SD", "SF", "MI", "Qabf"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.ag, self.ei, self.sd, self.sf, self.mi, self.qabf]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| n.eq_ignore_ascii_case(name)).map(|i| self.as_array()[i])
    }
}

/// Computes all six metrics. Colour images are reduced to luminance first.
pub fn evaluate(fused: &ImageTensor, ir: &ImageTensor, vi: &ImageTensor) -> Result<MetricValues> {
    let (f, a, b) = (luminance(fused), luminance(ir), luminance(vi));
    check_triple(&f, &a, &b)?;
    Ok(MetricValues {
        ag: avg_gradient(&f)?,
        ei: edge_intensity(&f)?,
        sd: std_dev(&f)?,
        sf: spatial_frequency(&f)?,
        mi: mutual_information(&f, &a, &b)?,
        qabf: qabf(&f, &a, &b)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

/// Per-image metric values and their mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub aggregate: MetricValues,
}

impl MetricReport {
    pub fn new(images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("metric report needs at least one image".into()));
        }
        let n = images.len() as f64;
        let mut sum = [0.0; 6];
        for img in &images {
            for (s, v) in sum.iter_mut().zip(img.values.as_array()) {
                *s += v;
            }
        }
        let [ag, ei, sd, sf, mi, qabf] = sum.map(|s| s / n);
        Ok(Self { images, aggregate: MetricValues { ag, ei, sd, sf, mi, qabf } })
    }

    /// CSV with a header, one row per image and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image");
        for n in MetricValues::NAMES {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        let rows = self.images.iter().map(|m| (m.name.as_str(), &m.values));
        for (name, values) in rows.chain([("mean", &self.aggregate)]) {
            out.push_str(&csv_field(name));
            for v in values.as_array() {
                out.push_str(&format!(",{v:.9}"));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        String::from(s)
    }
}
