#![allow(clippy::needless_range_loop)]

mod common;

use common::oracle::random_map;
use promptfuse_core::imgproc::{rgb_to_ycbcr, sobel_gradient};
use promptfuse_core::losses::{
    color_loss, intensity_loss, loss_graph, texture_loss, total_loss, LossReport, LossTargets,
};
use promptfuse_core::nn::Graph;
use promptfuse_core::{FusionSample, ImageTensor, LossWeights, Tensor, YCbCrImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gray(h: usize, w: usize, data: Vec<f64>) -> ImageTensor {
    ImageTensor::from_vec(1, h, w, data).unwrap()
}

fn unit_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
    let m = random_map(c, h, w, seed);
    ImageTensor::from_fn(c, h, w, |c, y, x| (m[c][y][x] + 1.0) / 2.0).unwrap()
}

fn random_sample(h: usize, w: usize, seed: u64) -> FusionSample {
    FusionSample::new(
        unit_image(1, h, w, seed),
        unit_image(3, h, w, seed + 1),
        unit_image(1, h, w, seed + 2),
        unit_image(3, h, w, seed + 3),
        String::new(),
        String::new(),
    )
    .unwrap()
}

#[test]
fn intensity_examples() {
    let ir = gray(2, 2, vec![0.2, 0.8, 0.5, 0.1]);
    let vi = gray(2, 2, vec![0.6, 0.3, 0.4, 0.9]);
    let fused = gray(2, 2, vec![0.5; 4]);
    let expect = [0.6f64, 0.8, 0.5, 0.9].iter().map(|m| (0.5 - m).abs()).sum::<f64>() / 4.0;
    assert!((expect - 0.2).abs() < 1e-12);
    assert!((intensity_loss(&fused, &ir, &vi).unwrap() - expect).abs() < 1e-12);

    let max = gray(2, 2, vec![0.6, 0.8, 0.5, 0.9]);
    assert_eq!(intensity_loss(&max, &ir, &vi).unwrap(), 0.0);
    let ones = gray(2, 2, vec![1.0; 4]);
    let zeros = gray(2, 2, vec![0.0; 4]);
    assert_eq!(intensity_loss(&zeros, &ones, &zeros).unwrap(), 1.0);
    assert!(intensity_loss(&zeros, &ones, &gray(2, 1, vec![0.0; 2])).is_err());
}

#[test]
fn texture_examples() {
    let c = |v| gray(4, 4, vec![v; 16]);
    assert_eq!(texture_loss(&c(0.1), &c(0.5), &c(0.9)).unwrap(), 0.0);

    let a = unit_image(1, 5, 5, 11);
    let b = unit_image(1, 5, 5, 12);
    let f = unit_image(1, 5, 5, 13);
    let (ga, gb, gf) = (sobel_gradient(&a).unwrap(), sobel_gradient(&b).unwrap(), sobel_gradient(&f).unwrap());
    let mut sum = 0.0;
    for i in 0..25 {
        sum += (gf.data()[i] - ga.data()[i].max(gb.data()[i])).abs();
    }
    assert!((texture_loss(&f, &a, &b).unwrap() - sum / 25.0).abs() <= 1e-9);

    let stronger = ImageTensor::new(a.tensor().map(|v| v * 0.5)).unwrap();
    assert_eq!(texture_loss(&a, &a, &stronger).unwrap(), 0.0);
}

#[test]
fn color_examples() {
    let ycc = |cb: f64, cr: f64| YCbCrImage::new(3, 3, vec![0.4; 9], vec![cb; 9], vec![cr; 9]).unwrap();
    assert_eq!(color_loss(&ycc(0.3, 0.6), &ycc(0.3, 0.6)).unwrap(), 0.0);
    assert!((color_loss(&ycc(0.4, 0.6), &ycc(0.3, 0.6)).unwrap() - 0.1).abs() < 1e-12);

    let p = random_map(4, 3, 3, 21);
    let plane = |i: usize| p[i].iter().flatten().map(|v| (v + 1.0) / 2.0).collect::<Vec<_>>();
    let f = YCbCrImage::new(3, 3, vec![0.0; 9], plane(0), plane(1)).unwrap();
    let r = YCbCrImage::new(3, 3, vec![1.0; 9], plane(2), plane(3)).unwrap();
    let mut sum = 0.0;
    for i in 0..9 {
        sum += (f.cb[i] - r.cb[i]).abs() + (f.cr[i] - r.cr[i]).abs();
    }
    assert!((color_loss(&f, &r).unwrap() - sum / 9.0).abs() <= 1e-12);
    let small = YCbCrImage::new(1, 1, vec![0.0], vec![0.0], vec![0.0]).unwrap();
    assert!(color_loss(&f, &small).is_err());
}

#[test]
fn weighted_sum_examples() {
    let w = LossWeights::default();
    assert_eq!((w.alpha, w.beta, w.gamma), (10.0, 12.0, 10.0));
    assert_eq!(LossReport::from_components(0.0, 0.0, 0.0, &w).total, 0.0);
    assert_eq!(LossReport::from_components(1.0, 1.0, 1.0, &w).total, 32.0);

    let sample = random_sample(8, 8, 30);
    let fused = unit_image(3, 8, 8, 40);
    let r = total_loss(&sample, &fused, &w).unwrap();
    assert!((r.total - (10.0 * r.intensity + 12.0 * r.texture + 10.0 * r.color)).abs() <= 1e-9);

    let vi = rgb_to_ycbcr(&sample.vi_reference).unwrap();
    let vi_y = vi.luma_image().unwrap();
    let fy = fused.channel_image(0);
    let fycc = YCbCrImage::from_planes(fused.tensor()).unwrap();
    assert_eq!(r.intensity, intensity_loss(&fy, &sample.ir_reference, &vi_y).unwrap());
    assert_eq!(r.texture, texture_loss(&fy, &sample.ir_reference, &vi_y).unwrap());
    assert_eq!(r.color, color_loss(&fycc, &vi).unwrap());
}

#[test]
fn total_loss_is_zero_on_the_forced_output() {
    let ir = gray(8, 8, vec![0.3; 64]);
    let vi = ImageTensor::constant(3, 8, 8, 0.6).unwrap();
    let sample = FusionSample::new(ir.clone(), vi.clone(), ir, vi.clone(), String::new(), String::new()).unwrap();
    let fused = rgb_to_ycbcr(&vi).unwrap().to_planes();
    let r = total_loss(&sample, &ImageTensor::new(fused).unwrap(), &LossWeights::default()).unwrap();
    assert!(r.total.abs() < 1e-12, "{r:?}");
}

#[test]
fn graph_losses_match_the_plain_functions() {
    let sample = random_sample(8, 8, 50);
    let fused = unit_image(3, 8, 8, 51);
    let w = LossWeights::default();
    let targets = LossTargets::new(&sample).unwrap();
    let mut g = Graph::new();
    let f = g.constant(fused.tensor().clone());
    let vars = loss_graph(&mut g, f, &targets, &w).unwrap();
    let a = vars.report(&g);
    let b = total_loss(&sample, &fused, &w).unwrap();
    for (x, y) in [(a.intensity, b.intensity), (a.texture, b.texture), (a.color, b.color), (a.total, b.total)] {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn subgradient_matches_finite_differences() {
    let sample = random_sample(8, 8, 60);
    let fused = unit_image(3, 8, 8, 61);
    let w = LossWeights::default();
    let targets = LossTargets::new(&sample).unwrap();
    let eval = |t: &Tensor| {
        let mut g = Graph::new();
        let f = g.constant(t.clone());
        let vars = loss_graph(&mut g, f, &targets, &w).unwrap();
        (g.value(vars.total).data()[0], g.active_set())
    };
    let mut g = Graph::new();
    let f = g.constant(fused.tensor().clone());
    let vars = loss_graph(&mut g, f, &targets, &w).unwrap();
    let base_set = g.active_set();
    let grads = g.backward(vars.total);
    let analytic = grads.wrt(f).unwrap().to_vec();

    let h = 1e-6;
    let mut checked = 0;
    for i in 0..fused.data().len() {
        let mut plus = fused.tensor().clone();
        plus.data_mut()[i] += h;
        let mut minus = fused.tensor().clone();
        minus.data_mut()[i] -= h;
        let ((lp, sp), (lm, sm)) = (eval(&plus), eval(&minus));
        if sp != base_set || sm != base_set {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        assert!(rel <= 1e-3, "pixel {i}: analytic {} numeric {numeric}", analytic[i]);
        checked += 1;
    }
    assert!(checked >= 150, "only {checked} pixels away from kinks");
}

#[test]
fn disabled_terms_do_not_reach_the_total() {
    let sample = random_sample(8, 8, 70);
    let targets = LossTargets::new(&sample).unwrap();
    let fused = unit_image(3, 8, 8, 71).tensor().clone();
    let grad = |w: LossWeights| {
        let mut g = Graph::new();
        let f = g.constant(fused.clone());
        let vars = loss_graph(&mut g, f, &targets, &w).unwrap();
        let r = vars.report(&g);
        (r, g.backward(vars.total).wrt(f).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; 192]))
    };
    let (full, gf) = grad(LossWeights::default());
    let (no_color, gn) = grad(LossWeights { gamma: 0.0, ..LossWeights::default() });
    assert_eq!(full.color, no_color.color);
    assert!((no_color.total - 10.0 * full.intensity - 12.0 * full.texture).abs() < 1e-9);
    assert_eq!(&gf[..64], &gn[..64]);
    assert!(gn[64..].iter().all(|&v| v == 0.0));

    let (none, gz) = grad(LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 });
    assert_eq!(none.total, 0.0);
    assert!(gz.iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn components_are_nonnegative_and_scale_with_weights(seed in 0u64..1000, a in 0.0f64..20.0) {
        let sample = random_sample(8, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fused = ImageTensor::from_fn(3, 8, 8, |_, _, _| rng.random::<f64>()).unwrap();
        let w = LossWeights { alpha: a, ..LossWeights::default() };
        let r = total_loss(&sample, &fused, &w).unwrap();
        prop_assert!(r.intensity >= 0.0 && r.texture >= 0.0 && r.color >= 0.0);
        let doubled = total_loss(&sample, &fused, &LossWeights { alpha: 2.0 * a, ..w }).unwrap();
        prop_assert!((doubled.total - r.total - a * r.intensity).abs() <= 1e-9);
    }
}
