//! Straight-line f64 reference ViT, written independently of the library's
//! kernels. It only reads raw tensors out of `Weights` by name.

#![allow(dead_code)]

use std::path::Path;

use image::{Rgb, RgbImage};
use statrs::function::erf::erf;
use vitrc::rng::SplitMix64;
use vitrc::{synth_toy_model, ImageTensor, ModelConfig, Vit, Weights};

pub type Rows = Vec<Vec<f64>>;

fn t<'a>(w: &'a Weights, name: &str) -> &'a [f32] {
    &w.get(name).unwrap().data
}

fn ln(x: &[f64], g: &[f32], b: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + 1e-6).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / denom * g[i] as f64 + b[i] as f64)
        .collect()
}

/// `y = W x + b` with `W` stored `[out, in]`.
fn dense(x: &[f64], w: &[f32], b: &[f32]) -> Vec<f64> {
    let out = b.len();
    let inp = x.len();
    (0..out)
        .map(|o| {
            let mut acc = b[o] as f64;
            for i in 0..inp {
                acc += w[o * inp + i] as f64 * x[i];
            }
            acc
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn patch_embed(cfg: &ModelConfig, w: &Weights, img: &ImageTensor) -> Rows {
    let ps = cfg.patch_size;
    let p = cfg.grid();
    let d = cfg.embed_dim;
    let s = cfg.image_size;
    let pw = t(w, "patch_embed.weight");
    let pb = t(w, "patch_embed.bias");
    let cls = t(w, "cls_token");
    let pos = t(w, "pos_embed");
    let px = img.data();
    let mut rows = vec![(0..d).map(|j| cls[j] as f64 + pos[j] as f64).collect::<Vec<_>>()];
    for gy in 0..p {
        for gx in 0..p {
            let k = gy * p + gx;
            let mut row = vec![0.0; d];
            for (o, r) in row.iter_mut().enumerate() {
                let mut acc = pb[o] as f64;
                for c in 0..3 {
                    for i in 0..ps {
                        for j in 0..ps {
                            let wv = pw[((o * 3 + c) * ps + i) * ps + j] as f64;
                            let xv = px[(c * s + gy * ps + i) * s + gx * ps + j] as f64;
                            acc += wv * xv;
                        }
                    }
                }
                *r = acc + pos[(k + 1) * d + o] as f64;
            }
            rows.push(row);
        }
    }
    rows
}

fn mha(cfg: &ModelConfig, w: &Weights, i: usize, x: &Rows) -> Rows {
    let d = cfg.embed_dim;
    let h = cfg.num_heads;
    let dh = d / h;
    let pre = format!("blocks.{i}.attn");
    let qkv: Rows = x
        .iter()
        .map(|r| dense(r, t(w, &format!("{pre}.qkv.weight")), t(w, &format!("{pre}.qkv.bias"))))
        .collect();
    let n = x.len();
    let mut ctx = vec![vec![0.0; d]; n];
    for head in 0..h {
        for q in 0..n {
            let mut scores: Vec<f64> = (0..n)
                .map(|k| {
                    (0..dh)
                        .map(|e| qkv[q][head * dh + e] * qkv[k][d + head * dh + e])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for s in scores.iter_mut() {
                *s = (*s - m).exp() / z;
            }
            for e in 0..dh {
                ctx[q][head * dh + e] = (0..n).map(|k| scores[k] * qkv[k][2 * d + head * dh + e]).sum();
            }
        }
    }
    ctx.iter()
        .map(|r| dense(r, t(w, &format!("{pre}.proj.weight")), t(w, &format!("{pre}.proj.bias"))))
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn mlp_residual(cfg: &ModelConfig, w: &Weights, i: usize, x: &Rows) -> Rows {
    let _ = cfg;
    let p = |s: &str| format!("blocks.{i}.{s}");
    let m: Rows = x
        .iter()
        .map(|r| {
            let n = ln(r, t(w, &p("ln2.weight")), t(w, &p("ln2.bias")));
            let hdn: Vec<f64> = dense(&n, t(w, &p("mlp.fc1.weight")), t(w, &p("mlp.fc1.bias")))
                .into_iter()
                .map(gelu)
                .collect();
            dense(&hdn, t(w, &p("mlp.fc2.weight")), t(w, &p("mlp.fc2.bias")))
        })
        .collect();
    add(x, &m)
}

pub fn ln1(w: &Weights, i: usize, x: &Rows) -> Rows {
    x.iter()
        .map(|r| {
            ln(
                r,
                t(w, &format!("blocks.{i}.ln1.weight")),
                t(w, &format!("blocks.{i}.ln1.bias")),
            )
        })
        .collect()
}

pub fn block(cfg: &ModelConfig, w: &Weights, i: usize, x: &Rows) -> Rows {
    let a = mha(cfg, w, i, &ln1(w, i, x));
    mlp_residual(cfg, w, i, &add(x, &a))
}

/// Split-block tail starting from an LN1 output: `x′ = f + MHA(f)` then MLP.
pub fn ln_split_tail(cfg: &ModelConfig, w: &Weights, i: usize, f: &Rows) -> Rows {
    let a = mha(cfg, w, i, f);
    mlp_residual(cfg, w, i, &add(f, &a))
}

pub fn head(w: &Weights, x: &Rows) -> Vec<f64> {
    let n = ln(&x[0], t(w, "norm.weight"), t(w, "norm.bias"));
    dense(&n, t(w, "head.weight"), t(w, "head.bias"))
}

pub fn forward_full(cfg: &ModelConfig, w: &Weights, img: &ImageTensor) -> Vec<f64> {
    let mut x = patch_embed(cfg, w, img);
    for i in 0..cfg.depth {
        x = block(cfg, w, i, &x);
    }
    head(w, &x)
}

/// Input of block `idx`.
pub fn block_input(cfg: &ModelConfig, w: &Weights, img: &ImageTensor, idx: usize) -> Rows {
    let mut x = patch_embed(cfg, w, img);
    for i in 0..idx {
        x = block(cfg, w, i, &x);
    }
    x
}

pub fn suffix_from_block(cfg: &ModelConfig, w: &Weights, mut x: Rows, idx: usize) -> Vec<f64> {
    for i in idx..cfg.depth {
        x = block(cfg, w, i, &x);
    }
    head(w, &x)
}

pub fn suffix_from_ln(cfg: &ModelConfig, w: &Weights, f: &Rows, idx: usize) -> Vec<f64> {
    let x = ln_split_tail(cfg, w, idx, f);
    suffix_from_block(cfg, w, x, idx + 1)
}

pub fn to_rows(m: &vitrc::Matrix) -> Rows {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// `max |a − r| / max |r|`.
pub fn rel_err(actual: &[f32], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    actual
        .iter()
        .zip(reference)
        .map(|(a, r)| (*a as f64 - r).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn rel_err_rows(actual: &vitrc::Matrix, reference: &Rows) -> f64 {
    let flat: Vec<f64> = reference.iter().flatten().copied().collect();
    rel_err(actual.data(), &flat)
}

/// Seeded toy configurations spanning P = 2..4, D = 8..32, depth 2..4.
pub fn toy_configs() -> Vec<(u64, ModelConfig)> {
    (0..20u64)
        .map(|s| {
            let i = s as usize;
            let grid = 2 + i % 3;
            let dim = [8, 16, 24, 32][i % 4];
            let heads = [2, 4, 3, 2][i % 4];
            let depth = 2 + (i / 3) % 3;
            let patch = 2 + i % 2;
            let classes = 5 + i % 6;
            (1000 + s, ModelConfig::toy(grid, patch, dim, heads, depth, classes))
        })
        .collect()
}

pub fn toy_model(seed: u64, cfg: &ModelConfig) -> (Weights, Vit) {
    let w = synth_toy_model(seed, cfg).unwrap();
    let vit = Vit::new(*cfg, &w).unwrap();
    (w, vit)
}

pub fn toy_image(seed: u64, size: usize) -> ImageTensor {
    let mut rng = SplitMix64::new(seed ^ 0xA5A5_5A5A);
    let data = (0..3 * size * size).map(|_| rng.next_signed() * 2.0).collect();
    ImageTensor::new(size, size, data, true).unwrap()
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Smooth colour gradients with a seed-dependent bright square.
pub fn write_images(dir: &Path, count: usize, size: u32) {
    for i in 0..count {
        let k = i as u32;
        let img = RgbImage::from_fn(size, size, |x, y| {
            let inside = (x / 64 + y / 64) % 4 == k % 4;
            let base = [(x * 255 / size) as u8, (y * 255 / size) as u8, (40 * k % 255) as u8];
            if inside {
                Rgb([255, 255 - base[0] / 2, base[2]])
            } else {
                Rgb(base)
            }
        });
        img.save(dir.join(format!("img_{i:02}.png"))).unwrap();
    }
}
