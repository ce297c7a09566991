//! Loop-based reference implementations of the fusion quality metrics.

use std::f64::consts::FRAC_PI_2;

use promptfuse_core::ImageTensor;

use super::oracle::random_map;

pub type Rows = Vec<Vec<f64>>;

pub fn img(rows: &Rows) -> ImageTensor {
    ImageTensor::from_fn(1, rows.len(), rows[0].len(), |_, y, x| rows[y][x]).unwrap()
}

pub fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Rows {
    (0..h).map(|y| (0..w).map(|x| f(y, x)).collect()).collect()
}

pub fn random_rows(h: usize, w: usize, seed: u64) -> Rows {
    let m = random_map(1, h, w, seed);
    m[0].iter().map(|r| r.iter().map(|v| (v + 1.0) / 2.0).collect()).collect()
}

pub fn sobel_xy(r: &Rows) -> (Rows, Rows) {
    let (h, w) = (r.len() as isize, r[0].len() as isize);
    let at = |y: isize, x: isize| r[y.clamp(0, h - 1) as usize][x.clamp(0, w - 1) as usize];
    let gx = grid(h as usize, w as usize, |y, x| {
        let (y, x) = (y as isize, x as isize);
        (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1))
    });
    let gy = grid(h as usize, w as usize, |y, x| {
        let (y, x) = (y as isize, x as isize);
        (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1))
    });
    (gx, gy)
}

pub fn ag_oracle(r: &Rows) -> f64 {
    let (h, w) = (r.len(), r[0].len());
    let mut s = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = r[y][x + 1] - r[y][x];
            let dy = r[y + 1][x] - r[y][x];
            s += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    s / ((h - 1) * (w - 1)) as f64
}

pub fn ei_oracle(r: &Rows) -> f64 {
    let (gx, gy) = sobel_xy(r);
    let n = (r.len() * r[0].len()) as f64;
    gx.iter().flatten().zip(gy.iter().flatten()).map(|(a, b)| a.hypot(*b)).sum::<f64>() / n
}

pub fn sd_oracle(r: &Rows) -> f64 {
    let v: Vec<f64> = r.iter().flatten().copied().collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn sf_oracle(r: &Rows) -> f64 {
    let (h, w) = (r.len(), r[0].len());
    let mut rf = Vec::new();
    let mut cf = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                rf.push((r[y][x] - r[y][x - 1]).powi(2));
            }
            if y > 0 {
                cf.push((r[y][x] - r[y - 1][x]).powi(2));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&rf) + mean(&cf)).sqrt()
}

pub fn bin(v: f64) -> usize {
    ((v * 256.0).floor() as usize).min(255)
}

/// `sum p(a,b) log2(p(a,b) / (p(a) p(b)))` by direct enumeration.
pub fn pair_mi_oracle(a: &Rows, b: &Rows) -> f64 {
    let n = (a.len() * a[0].len()) as f64;
    let pa: Vec<usize> = a.iter().flatten().map(|&v| bin(v)).collect();
    let pb: Vec<usize> = b.iter().flatten().map(|&v| bin(v)).collect();
    let count = |f: &dyn Fn(usize) -> bool| (0..pa.len()).filter(|&i| f(i)).count() as f64;
    let mut seen = Vec::new();
    let mut mi = 0.0;
    for i in 0..pa.len() {
        let key = (pa[i], pb[i]);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let pab = count(&|j| pa[j] == key.0 && pb[j] == key.1) / n;
        let p1 = count(&|j| pa[j] == key.0) / n;
        let p2 = count(&|j| pb[j] == key.1) / n;
        mi += pab * (pab / (p1 * p2)).log2();
    }
    mi
}

/// Edge transfer index computed step by step from the textbook definition.
pub fn qabf_oracle(f: &Rows, a: &Rows, b: &Rows) -> f64 {
    let (kg, sg, ka, sa): (f64, f64, f64, f64) = (-10.0, 0.5, -20.0, 0.75);
    let gamma_g = 1.0 + (kg * (1.0 - sg)).exp();
    let gamma_a = 1.0 + (ka * (1.0 - sa)).exp();
    let strength_angle = |r: &Rows| {
        let (gx, gy) = sobel_xy(r);
        let g = grid(r.len(), r[0].len(), |y, x| (gx[y][x].powi(2) + gy[y][x].powi(2)).sqrt());
        let al =
            grid(r.len(), r[0].len(), |y, x| if gx[y][x] == 0.0 { FRAC_PI_2 } else { (gy[y][x] / gx[y][x]).atan() });
        (g, al)
    };
    let (gf, af) = strength_angle(f);
    let mut num = 0.0;
    let mut den = 0.0;
    for src in [a, b] {
        let (gs, as_) = strength_angle(src);
        for y in 0..f.len() {
            for x in 0..f[0].len() {
                let g_rel = if gs[y][x] == 0.0 && gf[y][x] == 0.0 {
                    0.0
                } else {
                    gs[y][x].min(gf[y][x]) / gs[y][x].max(gf[y][x])
                };
                let a_rel = 1.0 - (as_[y][x] - af[y][x]).abs() / FRAC_PI_2;
                let qg = gamma_g / (1.0 + (kg * (g_rel - sg)).exp());
                let qa = gamma_a / (1.0 + (ka * (a_rel - sa)).exp());
                num += qg * qa * gs[y][x];
                den += gs[y][x];
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}
