//! Seeded synthetic infrared/visible scenes.
//!
//! The visible image holds a sky gradient, textured ground and coloured
//! blocks; the infrared image holds a cool background, warm blocks and hot
//! blobs that are barely visible in the visible image.

use promptfuse_core::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Block {
    top: f64,
    left: f64,
    bottom: f64,
    right: f64,
    color: [f64; 3],
    heat: f64,
}

struct Blob {
    y: f64,
    x: f64,
    radius: f64,
}

/// A `size x size` pair: infrared `(1, size, size)`, visible `(3, size, size)`.
pub fn synthetic_pair(size: usize, seed: u64) -> (ImageTensor, ImageTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(0.35..0.55);
    let stripe = rng.random_range(6.0..14.0);
    let tint: [f64; 3] = [rng.random_range(0.3..0.6), rng.random_range(0.35..0.6), rng.random_range(0.2..0.45)];
    let blocks: Vec<Block> = (0..rng.random_range(2..5))
        .map(|_| {
            let left = rng.random_range(0.0..0.8);
            let top = rng.random_range(0.15..horizon);
            Block {
                top,
                left,
                bottom: horizon + rng.random_range(0.0..0.1),
                right: left + rng.random_range(0.08..0.2),
                color: [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)],
                heat: rng.random_range(0.35..0.6),
            }
        })
        .collect();
    let blobs: Vec<Blob> = (0..rng.random_range(1..4))
        .map(|_| Blob {
            y: rng.random_range(horizon..0.9),
            x: rng.random_range(0.1..0.9),
            radius: rng.random_range(0.03..0.08),
        })
        .collect();

    let n = size as f64;
    let mut ir = vec![0.0; size * size];
    let mut vi = vec![0.0; 3 * size * size];
    for py in 0..size {
        for px in 0..size {
            let (y, x) = ((py as f64 + 0.5) / n, (px as f64 + 0.5) / n);
            let mut rgb = if y < horizon {
                let t = y / horizon;
                [0.45 + 0.25 * t, 0.6 + 0.2 * t, 0.9 - 0.1 * t]
            } else {
                let texture = 0.08 * ((x * stripe * 6.0).sin() * (y * stripe * 4.0).cos());
                tint.map(|c| c + texture)
            };
            let mut heat = if y < horizon { 0.15 } else { 0.25 + 0.1 * (y - horizon) };
            for b in &blocks {
                if (b.top..b.bottom).contains(&y) && (b.left..b.right).contains(&x) {
                    let window = ((y * 40.0).floor() as i64 + (x * 40.0).floor() as i64) % 3 == 0;
                    rgb = b.color.map(|c| if window { c * 0.6 } else { c });
                    heat = b.heat;
                }
            }
            for b in &blobs {
                let d2 = ((y - b.y).powi(2) + (x - b.x).powi(2)) / (b.radius * b.radius);
                let w = (-d2).exp();
                heat = heat * (1.0 - w) + 0.95 * w;
                rgb = rgb.map(|c| c * (1.0 - 0.15 * w));
            }
            ir[py * size + px] = heat.clamp(0.0, 1.0);
            for c in 0..3 {
                vi[c * size * size + py * size + px] = rgb[c].clamp(0.0, 1.0);
            }
        }
    }
    (
        ImageTensor::from_vec(1, size, size, ir).expect("clamped"),
        ImageTensor::from_vec(3, size, size, vi).expect("clamped"),
    )
}
