#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use burstm::graph::{Graph, Var};
use burstm::nn::{Bound, ParamSet};
use burstm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus")
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_tensor_f32(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Scalar bilinear warp: pixel (y, x) samples at (y + fy·H/2, x + fx·W/2),
/// clamped to the pixel-center range.
pub fn warp_oracle(img: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = img.dims3();
    let mut out = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let uy = (y as f64 + flow.at3(0, y, x) * h as f64 / 2.0).clamp(0.0, (h - 1) as f64);
            let ux = (x as f64 + flow.at3(1, y, x) * w as f64 / 2.0).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (uy.floor() as usize, ux.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (uy - y0 as f64, ux - x0 as f64);
            for ch in 0..c {
                let v = img.at3(ch, y0, x0) * (1.0 - ty) * (1.0 - tx)
                    + img.at3(ch, y0, x1) * (1.0 - ty) * tx
                    + img.at3(ch, y1, x0) * ty * (1.0 - tx)
                    + img.at3(ch, y1, x1) * ty * tx;
                out.set3(ch, y, x, v);
            }
        }
    }
    out
}

/// Index of the pixel center closest to `v` by exhaustive search; ties go
/// to the smaller index.
pub fn nearest_index_oracle(v: f64, n: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..n {
        let c = -1.0 + (2 * i + 1) as f64 / n as f64;
        let d = (c - v).abs();
        if d < best_d - 1e-12 {
            best = i;
            best_d = d;
        }
    }
    best
}

pub fn nearest_oracle(features: &Tensor<f64>, coords: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = features.dims3();
    let (_, oh, ow) = coords.dims3();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            let (iy, ix) = (nearest_index_oracle(coords.at3(0, y, x), h), nearest_index_oracle(coords.at3(1, y, x), w));
            for ch in 0..c {
                out.set3(ch, y, x, features.at3(ch, iy, ix));
            }
        }
    }
    out
}

/// Amplitude-weighted cosine / sine pairs, one pixel at a time.
pub fn fourier_oracle(amp: &Tensor<f64>, freq: &Tensor<f64>, phase: &Tensor<f64>, delta: &Tensor<f64>) -> Tensor<f64> {
    let (c2, h, w) = amp.dims3();
    let k = c2 / 2;
    let mut out = Tensor::zeros(&[c2, h, w]);
    for y in 0..h {
        for x in 0..w {
            for j in 0..k {
                let theta = PI
                    * (freq.at3(2 * j, y, x) * delta.at3(0, y, x)
                        + freq.at3(2 * j + 1, y, x) * delta.at3(1, y, x)
                        + phase.at3(j, y, x));
                out.set3(j, y, x, amp.at3(j, y, x) * theta.cos());
                out.set3(k + j, y, x, amp.at3(k + j, y, x) * theta.sin());
            }
        }
    }
    out
}

/// Worst per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// over sampled entries of every parameter and input, for the scalar
/// `⟨build(...), r⟩` with a fixed random `r`. Central differences, step `eps`.
pub fn check_gradients(
    params: &ParamSet<f64>,
    inputs: &[Tensor<f64>],
    per_tensor: usize,
    eps: f64,
    build: &dyn Fn(&Graph<f64>, &Bound, &[Var]) -> Var,
) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&g, &p, &xs);
        random_tensor(g.value(y).shape(), -1.0, 1.0, &mut rng)
    };
    let eval = |params: &ParamSet<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&g, &p, &xs);
        g.value(g.dot_const(y, &probe)).data()[0]
    };

    let g = Graph::new();
    let p = params.bind(&g);
    let xs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&g, &p, &xs);
    let grads = g.backward(g.dot_const(y, &probe));

    let mut worst = (0.0, String::new());
    let mut record = |name: String, analytic: Vec<f64>, numeric: Vec<f64>| {
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-10 { diff } else { diff / scale };
        if rel > worst.0 {
            worst = (rel, name);
        }
    };

    for (name, var) in p.iter() {
        let g_full = grads.get_or_zeros(var);
        let n = g_full.len();
        let picks: Vec<usize> = (0..per_tensor.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &picks {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            numeric.push((eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * eps));
            analytic.push(g_full.data()[i]);
        }
        record(name.to_string(), analytic, numeric);
    }
    for (k, &var) in xs.iter().enumerate() {
        let g_full = grads.get_or_zeros(var);
        let n = g_full.len();
        let picks: Vec<usize> = (0..per_tensor.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &picks {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            numeric.push((eval(params, &plus) - eval(params, &minus)) / (2.0 * eps));
            analytic.push(g_full.data()[i]);
        }
        record(format!("input{k}"), analytic, numeric);
    }
    worst
}

use burstm::raw_pipeline::{resize_bicubic, synthesize_with_motions, BurstSet, Motion, SrgbImage, SynthesisConfig};

/// A bundled photograph reduced to `size×size` (smooth at that scale).
pub fn corpus_scene(name: &str, size: usize) -> SrgbImage {
    let img = burstm::io::read_image(&corpus_dir().join(name)).unwrap();
    let (h, w) = img.dims();
    let side = h.min(w);
    let square = img.crop((h - side) / 2, (w - side) / 2, side, side).unwrap();
    SrgbImage::new(resize_bicubic(&square.data, size, size).map(|v| v.clamp(0.0, 1.0))).unwrap()
}

/// Low-detail version of a bundled photograph: reduced to 16×16 and
/// enlarged back to `size×size`.
pub fn smooth_scene(name: &str, size: usize) -> SrgbImage {
    let small = corpus_scene(name, 16);
    SrgbImage::new(resize_bicubic(&small.data, size, size).map(|v| v.clamp(0.0, 1.0))).unwrap()
}

/// Burst whose non-reference frames are pure translations of up to
/// `max_lr_px` LR pixels.
pub fn translation_burst(gt: &SrgbImage, n: usize, scale: usize, seed: u64, max_lr_px: f64, cfg: &SynthesisConfig) -> BurstSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = (2 * scale) as f64;
    let motions: Vec<Motion> = (0..n)
        .map(|i| {
            if i == 0 {
                Motion::IDENTITY
            } else {
                Motion {
                    rotation: 0.0,
                    dx: rng.gen_range(-max_lr_px..=max_lr_px) * f,
                    dy: rng.gen_range(-max_lr_px..=max_lr_px) * f,
                }
            }
        })
        .collect();
    synthesize_with_motions(gt, scale, seed, cfg, &motions, &mut rng).unwrap()
}
