//! Naive reference implementations of every learned block, written with
//! nested vectors and explicit loops. They read parameters by name from a
//! `ParamStore` and never touch the autodiff graph.

#![allow(dead_code, clippy::needless_range_loop)]

use promptfuse_core::nn::ParamStore;
use promptfuse_core::Tensor;

/// `[channel][row][col]`
pub type Map = Vec<Vec<Vec<f64>>>;

pub const SLOPE: f64 = 0.2;
pub const EPS: f64 = 1e-5;

pub fn from_tensor(t: &Tensor) -> Map {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    (0..c).map(|ch| (0..h).map(|y| (0..w).map(|x| t.data()[(ch * h + y) * w + x]).collect()).collect()).collect()
}

pub fn to_tensor(m: &Map) -> Tensor {
    let (c, h, w) = (m.len(), m[0].len(), m[0][0].len());
    let data = m.iter().flat_map(|p| p.iter().flat_map(|r| r.iter().copied())).collect();
    Tensor::new(&[c, h, w], data).unwrap()
}

pub fn max_diff(a: &Map, b: &Map) -> f64 {
    let mut worst: f64 = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        for (ra, rb) in pa.iter().zip(pb) {
            for (x, y) in ra.iter().zip(rb) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(store.find(name).unwrap_or_else(|| panic!("missing parameter {name}")))
}

pub fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        SLOPE * v
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()))
}

pub fn map_each(m: &Map, f: impl Fn(f64) -> f64) -> Map {
    m.iter().map(|p| p.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()).collect()
}

pub fn add(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(pa, pb)| pa.iter().zip(pb).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

pub fn cat(parts: &[&Map]) -> Map {
    parts.iter().flat_map(|m| m.iter().cloned()).collect()
}

/// Cross-correlation with replicate padding `k / 2`, weights `(Cout, Cin/groups, k, k)`.
pub fn conv(x: &Map, w: &Tensor, b: Option<&Tensor>, stride: usize, groups: usize) -> Map {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let (cout, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(cpg * groups, cin);
    let pad = (k / 2) as isize;
    let oh = (h - 1) / stride + 1;
    let ow = (wd - 1) / stride + 1;
    let opg = cout / groups;
    let mut out = vec![vec![vec![0.0; ow]; oh]; cout];
    for o in 0..cout {
        let grp = o / opg;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for ci in 0..cpg {
                    let c = grp * cpg + ci;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = ((oy * stride) as isize + ky as isize - pad).clamp(0, h as isize - 1) as usize;
                            let ix = ((ox * stride) as isize + kx as isize - pad).clamp(0, wd as isize - 1) as usize;
                            acc += w.data()[((o * cpg + ci) * k + ky) * k + kx] * x[c][iy][ix];
                        }
                    }
                }
                out[o][oy][ox] = acc;
            }
        }
    }
    out
}

pub fn conv_named(store: &ParamStore, name: &str, x: &Map, stride: usize, groups: usize) -> Map {
    let bias = store.find(&format!("{name}.bias")).map(|id| store.get(id));
    conv(x, p(store, &format!("{name}.weight")), bias, stride, groups)
}

pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = p(store, &format!("{name}.weight"));
    let b = p(store, &format!("{name}.bias"));
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| {
            let mut acc = b.data()[r];
            for c in 0..i {
                acc += w.data()[r * i + c] * x[c];
            }
            acc
        })
        .collect()
}

pub fn guide(x: &Map, scale: &[f64], shift: &[f64]) -> Map {
    x.iter()
        .enumerate()
        .map(|(c, plane)| plane.iter().map(|r| r.iter().map(|&v| v * scale[c] + shift[c] + v).collect()).collect())
        .collect()
}

pub fn guidance_mlp(store: &ParamStore, name: &str, prompt: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = linear(store, &format!("{name}.fc1"), prompt).into_iter().map(lrelu).collect();
    let out = linear(store, &format!("{name}.fc2"), &h);
    (out[..channels].to_vec(), out[channels..2 * channels].to_vec())
}

pub fn group_norm(x: &Map, gamma: &[f64], beta: &[f64], groups: usize) -> Map {
    let c = x.len();
    let per = c / groups;
    let mut out = x.clone();
    for g in 0..groups {
        let vals: Vec<f64> = (g * per..(g + 1) * per).flat_map(|ch| x[ch].iter().flatten().copied()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for ch in g * per..(g + 1) * per {
            for (orow, row) in out[ch].iter_mut().zip(&x[ch]) {
                for (o, v) in orow.iter_mut().zip(row) {
                    *o = (v - mean) / (var + EPS).sqrt() * gamma[ch] + beta[ch];
                }
            }
        }
    }
    out
}

pub fn layer_norm_channels(x: &Map, gamma: &[f64], beta: &[f64]) -> Map {
    let (c, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let mut out = x.clone();
    for y in 0..h {
        for xx in 0..w {
            let mean = (0..c).map(|ch| x[ch][y][xx]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (x[ch][y][xx] - mean).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                out[ch][y][xx] = (x[ch][y][xx] - mean) / (var + EPS).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

pub fn msconv(store: &ParamStore, name: &str, x: &Map, depth: usize) -> Map {
    let mut branches = Vec::new();
    for k in [1, 3, 5] {
        let mut h = x.clone();
        for l in 0..depth {
            h = map_each(&conv_named(store, &format!("{name}.k{k}.{l}"), &h, 1, 1), lrelu);
        }
        branches.push(h);
    }
    let c = cat(&[&branches[0], &branches[1], &branches[2]]);
    let reduced = conv_named(store, &format!("{name}.reduce"), &c, 1, 1);
    let res = add(&reduced, x);
    let channels = x.len();
    let groups = (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap();
    let gamma = p(store, &format!("{name}.gn.gamma")).data();
    let beta = p(store, &format!("{name}.gn.beta")).data();
    map_each(&group_norm(&res, gamma, beta, groups), lrelu)
}

pub fn transformer(store: &ParamStore, name: &str, x: &Map, heads: usize) -> Map {
    let (c, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let n = h * w;
    let d = c / heads;
    let y = layer_norm_channels(
        x,
        p(store, &format!("{name}.norm1.gamma")).data(),
        p(store, &format!("{name}.norm1.beta")).data(),
    );
    let qkv = conv_named(store, &format!("{name}.qkv"), &y, 1, 1);
    let flat = |ch: usize| -> Vec<f64> { qkv[ch].iter().flatten().copied().collect() };
    let mut attended: Vec<Vec<f64>> = vec![vec![0.0; n]; c];
    for head in 0..heads {
        for i in 0..d {
            let q = flat(head * d + i);
            let scores: Vec<f64> = (0..d)
                .map(|j| {
                    let k = flat(c + head * d + j);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (n as f64).sqrt()
                })
                .collect();
            let m = scores.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..d {
                let v = flat(2 * c + head * d + j);
                for t in 0..n {
                    attended[head * d + i][t] += e[j] / z * v[t];
                }
            }
        }
    }
    let att_map: Map = attended.iter().map(|row| row.chunks(w).map(|r| r.to_vec()).collect()).collect();
    let x1 = add(x, &conv_named(store, &format!("{name}.proj"), &att_map, 1, 1));
    let z = layer_norm_channels(
        &x1,
        p(store, &format!("{name}.norm2.gamma")).data(),
        p(store, &format!("{name}.norm2.beta")).data(),
    );
    let z = conv_named(store, &format!("{name}.ffn_in"), &z, 1, 1);
    let z = conv_named(store, &format!("{name}.ffn_dw"), &z, 1, z.len());
    let hidden = z.len() / 2;
    let gated: Map = (0..hidden)
        .map(|ch| {
            z[ch]
                .iter()
                .zip(&z[hidden + ch])
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(a, b)| gelu(*a) * b).collect())
                .collect()
        })
        .collect();
    add(&x1, &conv_named(store, &format!("{name}.ffn_out"), &gated, 1, 1))
}

pub fn channel_attention(store: &ParamStore, name: &str, x: &Map) -> Map {
    let pooled: Vec<f64> =
        x.iter().map(|plane| plane.iter().flatten().sum::<f64>() / (plane.len() * plane[0].len()) as f64).collect();
    let hdn: Vec<f64> = linear(store, &format!("{name}.fc1"), &pooled).into_iter().map(lrelu).collect();
    let gate: Vec<f64> = linear(store, &format!("{name}.fc2"), &hdn).into_iter().map(sigmoid).collect();
    x.iter()
        .enumerate()
        .map(|(c, plane)| plane.iter().map(|r| r.iter().map(|v| v * gate[c]).collect()).collect())
        .collect()
}

pub fn spatial_attention(store: &ParamStore, name: &str, x: &Map) -> Map {
    let (c, h, w) = (x.len(), x[0].len(), x[0][0].len());
    let mut stats = vec![vec![vec![0.0; w]; h]; 2];
    for y in 0..h {
        for xx in 0..w {
            let vals: Vec<f64> = (0..c).map(|ch| x[ch][y][xx]).collect();
            stats[0][y][xx] = vals.iter().sum::<f64>() / c as f64;
            stats[1][y][xx] = vals.iter().copied().fold(f64::MIN, f64::max);
        }
    }
    let mask = map_each(&conv_named(store, &format!("{name}.conv"), &stats, 1, 1), sigmoid);
    x.iter()
        .map(|plane| {
            plane
                .iter()
                .enumerate()
                .map(|(y, r)| r.iter().enumerate().map(|(xx, v)| v * mask[0][y][xx]).collect())
                .collect()
        })
        .collect()
}

pub fn spdce(store: &ParamStore, name: &str, x: &Map, prompt: &[f64], depth: usize, heads: usize) -> Map {
    let (s, b) = guidance_mlp(store, &format!("{name}.guide"), prompt, x.len());
    let guided = guide(x, &s, &b);
    let mut global = guided.clone();
    for i in 0..depth {
        global = transformer(store, &format!("{name}.trm{i}"), &global, heads);
    }
    let local = msconv(store, &format!("{name}.msconv"), &guided, 3);
    let gated = channel_attention(store, &format!("{name}.ca"), &cat(&[&global, &local]));
    conv_named(store, &format!("{name}.fuse"), &gated, 1, 1)
}

#[allow(clippy::too_many_arguments)]
pub fn jpdcf(
    store: &ParamStore,
    name: &str,
    previous: Option<&Map>,
    f_ir: &Map,
    f_vi: &Map,
    p_ir: &[f64],
    p_vi: &[f64],
    depth: usize,
    heads: usize,
) -> Map {
    let joint_in: Vec<f64> = p_ir.iter().chain(p_vi).copied().collect();
    let joint = linear(store, &format!("{name}.proj"), &joint_in);
    let (s, b) = guidance_mlp(store, &format!("{name}.guide"), &joint, f_ir.len());
    let a_ir = spatial_attention(store, &format!("{name}.sa_ir"), f_ir);
    let a_vi = spatial_attention(store, &format!("{name}.sa_vi"), f_vi);
    let merged = conv_named(store, &format!("{name}.merge_sources"), &cat(&[&a_ir, &a_vi]), 1, 1);
    let g_src = guide(&merged, &s, &b);
    let g_prev = guide(previous.unwrap_or(&merged), &s, &b);
    let gated = channel_attention(store, &format!("{name}.ca"), &cat(&[&g_src, &g_prev]));
    let fused = conv_named(store, &format!("{name}.merge_guided"), &gated, 1, 1);
    let local = msconv(store, &format!("{name}.msconv"), &fused, 3);
    let mut global = fused.clone();
    for i in 0..depth {
        global = transformer(store, &format!("{name}.trm{i}"), &global, heads);
    }
    conv_named(store, &format!("{name}.merge_out"), &cat(&[&local, &global]), 1, 1)
}

/// Adds seeded uniform noise in `[-amp/2, amp/2)` to every parameter so that
/// zero-initialized layers (guidance outputs, biases) are exercised.
pub fn perturb(store: &mut ParamStore, seed: u64, amp: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += amp * (rng.random::<f64>() - 0.5);
        }
    }
}

pub fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Map {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..c).map(|_| (0..h).map(|_| (0..w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect()).collect()
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}
