//! Randomized invariants over the public API.

mod common;

use burstm::evaluation::{frame_histogram, psnr, ssim, spectrum_analysis};
use burstm::flow_net::{estimate_flow, init_fnet, FNetConfig};
use burstm::geometry::{bilinear_warp, make_grid, nearest_sample, upsample_coords, FlowField};
use burstm::graph::{pixel_shuffle2, space_to_depth2};
use burstm::losses::{aligned_l1_loss, photometric_flow_loss, sr_l1_loss, IdentityProvider};
use burstm::neural_warp::{apply_mapping, fourier_map, FourierFeatures, Mapping};
use burstm::raw_pipeline::{synthesize_burst, RggbFrame, SrgbImage, SynthesisConfig};
use burstm::reconstruction::SrImage;
use burstm::tensor::Tensor;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn warp_matches_scalar_oracle(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, c in 1usize..4) {
        let mut r = rng(seed);
        let img = random_tensor(&[c, h, w], -1.0, 1.0, &mut r);
        let flow = random_tensor(&[2, h, w], -1.5, 1.5, &mut r);
        let out = bilinear_warp(&img, &FlowField(flow.clone())).unwrap();
        prop_assert!(out.max_abs_diff(&warp_oracle(&img, &flow)) < 1e-10);
    }

    #[test]
    fn warp_identity_and_constants(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, v in -3.0f64..3.0) {
        let mut r = rng(seed);
        let img = random_tensor(&[2, h, w], 0.0, 1.0, &mut r);
        prop_assert_eq!(bilinear_warp(&img, &FlowField::zeros(h, w)).unwrap(), img);
        let flow = FlowField(random_tensor(&[2, h, w], -4.0, 4.0, &mut r));
        let constant = Tensor::full(&[3, h, w], v);
        let out = bilinear_warp(&constant, &flow).unwrap();
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn nearest_matches_exhaustive_search(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, oh in 1usize..10, ow in 1usize..10) {
        let mut r = rng(seed);
        let feats = random_tensor(&[3, h, w], -1.0, 1.0, &mut r);
        let coords = random_tensor(&[2, oh, ow], -1.3, 1.3, &mut r);
        prop_assert_eq!(nearest_sample(&feats, &coords).unwrap(), nearest_oracle(&feats, &coords));
    }

    #[test]
    fn nearest_breaks_exact_ties_low(p in 1u32..5, i in 0usize..15) {
        let n = 1usize << p;
        prop_assume!(i + 1 < n);
        let mid = -1.0 + (2 * i + 2) as f64 / n as f64;
        let feats = Tensor::from_fn(&[1, 1, n], |k| k as f64);
        let coords = Tensor::from_vec(&[2, 1, 1], vec![0.0, mid]).unwrap();
        prop_assert_eq!(nearest_sample(&feats, &coords).unwrap().data()[0], i as f64);
    }

    #[test]
    fn upsampled_grid_is_the_fine_grid(h in 1usize..10, w in 1usize..10, s in 1usize..5) {
        let up = upsample_coords(make_grid::<f64>(h, w).tensor(), s as f64).unwrap();
        prop_assert!(up.max_abs_diff(make_grid::<f64>(s * h, s * w).tensor()) < 1e-12);
    }

    #[test]
    fn fourier_map_matches_oracle(seed in any::<u64>(), k in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let amp = random_tensor(&[2 * k, h, w], -2.0, 2.0, &mut r);
        let freq = random_tensor(&[2 * k, h, w], -8.0, 8.0, &mut r);
        let phase = random_tensor(&[k, h, w], -1.0, 1.0, &mut r);
        let delta = random_tensor(&[2, h, w], -0.5, 0.5, &mut r);
        let m = fourier_map(&amp, &freq, &phase, &delta).unwrap();
        prop_assert!(m.max_abs_diff(&fourier_oracle(&amp, &freq, &phase, &delta)) < 1e-12);
        for (mv, av) in m.data().iter().zip(amp.data()) {
            prop_assert!(mv.abs() <= av.abs() + 1e-15);
        }
        let unit = Tensor::full(&[2 * k, h, w], 1.0);
        let u = fourier_map(&unit, &freq, &phase, &delta).unwrap();
        let p = h * w;
        for j in 0..k {
            for i in 0..p {
                let (c, s) = (u.data()[j * p + i], u.data()[(k + j) * p + i]);
                prop_assert!((c * c + s * s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_map_amplitude_gates(seed in any::<u64>(), k in 1usize..4) {
        let mut r = rng(seed);
        let amp = random_tensor(&[2 * k, 3, 3], -1.0, 1.0, &mut r);
        let freq = random_tensor(&[2 * k, 3, 3], -1.0, 1.0, &mut r);
        let phase = Tensor::zeros(&[k, 3, 3]);
        let delta = Tensor::zeros(&[2, 3, 3]);
        let m = apply_mapping(Mapping::Linear, &amp, &freq, &phase, &delta).unwrap();
        let p = 9;
        prop_assert_eq!(&m.data()[..k * p], &amp.data()[..k * p]);
        prop_assert!(m.data()[k * p..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shuffle_is_a_bijection(seed in any::<u64>(), c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let x = random_tensor(&[4 * c, h, w], -1.0, 1.0, &mut r);
        let y = pixel_shuffle2(&x);
        prop_assert_eq!(y.shape(), &[c, 2 * h, 2 * w][..]);
        prop_assert_eq!(space_to_depth2(&y), x);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_equal_inputs(seed in any::<u64>()) {
        let mut r = rng(seed);
        let gt = SrgbImage::new(random_tensor_f32(&[3, 6, 6], 0.0, 1.0, &mut r)).unwrap();
        let pred = SrImage { data: random_tensor_f32(&[3, 6, 6], -0.2, 1.2, &mut r) };
        let l = sr_l1_loss(&pred, &gt).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(aligned_l1_loss(&pred, &gt, &IdentityProvider).unwrap(), l);
        prop_assert_eq!(sr_l1_loss(&SrImage { data: gt.data.clone() }, &gt).unwrap(), 0.0);
        let frames: Vec<RggbFrame> = (0..3).map(|_| RggbFrame::new(random_tensor_f32(&[4, 5, 5], 0.0, 1.0, &mut r)).unwrap()).collect();
        let flows: Vec<FlowField<f32>> = (0..3).map(|_| FlowField(random_tensor_f32(&[2, 5, 5], -0.3, 0.3, &mut r))).collect();
        prop_assert!(photometric_flow_loss(&frames, &flows).unwrap() >= 0.0);
        let same = vec![frames[0].clone(); 3];
        prop_assert_eq!(photometric_flow_loss(&same, &vec![FlowField::zeros(5, 5); 3]).unwrap(), 0.0);
    }

    #[test]
    fn psnr_matches_formula(seed in any::<u64>(), peak in 0.5f64..2.0) {
        let mut r = rng(seed);
        let a = random_tensor_f32(&[3, 5, 7], 0.0, 1.0, &mut r);
        let b = random_tensor_f32(&[3, 5, 7], 0.0, 1.0, &mut r);
        let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
        prop_assert!((psnr(&a, &b, peak).unwrap() - 10.0 * (peak * peak / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_separable_reference(seed in any::<u64>(), h in 11usize..18, w in 11usize..18) {
        let mut r = rng(seed);
        let a = random_tensor_f32(&[3, h, w], 0.0, 1.0, &mut r);
        let noise = random_tensor_f32(&[3, h, w], -0.2, 0.2, &mut r);
        let b = a.zip_map(&noise, |v, e| (v + e).clamp(0.0, 1.0));
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim_reference(&a, &b)).abs() < 1e-4);
    }

    #[test]
    fn spectrum_deposits_conserve_amplitude(seed in any::<u64>(), k in 1usize..5, n in 1usize..4) {
        let mut r = rng(seed);
        let features: Vec<FourierFeatures> = (0..n).map(|_| FourierFeatures {
            amplitude: random_tensor_f32(&[2 * k, 4, 5], -1.0, 1.0, &mut r),
            frequency: random_tensor_f32(&[2 * k, 4, 5], -6.0, 6.0, &mut r),
            phase: random_tensor_f32(&[k, 4, 5], -1.0, 1.0, &mut r),
        }).collect();
        let report = spectrum_analysis(&features, None).unwrap();
        let direct: f64 = features.iter().flat_map(|f| f.amplitude.data().iter().map(|v| v.abs() as f64)).sum();
        prop_assert!((report.accumulated.total() - direct).abs() <= 1e-4 * direct);
        prop_assert!(report.accumulated_support() >= report.max_frame_support());
        let single = frame_histogram(&features[0], report.accumulated.f_max, 64).unwrap();
        prop_assert_eq!(single.mass, report.per_frame[0].mass.clone());
    }

    #[test]
    fn flow_respects_displacement_bound(seed in any::<u64>(), px in 0.5f64..6.0) {
        let cfg = FNetConfig { base_channels: 4, levels: 2, max_displacement_px: px, ..FNetConfig::default() };
        let p = init_fnet::<f32, _>(&cfg, &mut rng(seed)).unwrap();
        let mut r = rng(seed ^ 1);
        let a = RggbFrame::new(random_tensor_f32(&[4, 8, 8], 0.0, 1.0, &mut r)).unwrap();
        let b = RggbFrame::new(random_tensor_f32(&[4, 8, 8], 0.0, 1.0, &mut r)).unwrap();
        let f = estimate_flow(&p, &cfg, &a, &b).unwrap();
        let bound = (px * 2.0 / 8.0) as f32 + 1e-6;
        prop_assert!(f.tensor().max_abs() <= bound);
        prop_assert_eq!(estimate_flow(&p, &cfg, &a, &b).unwrap(), f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn synthesis_is_pure_and_shaped(seed in any::<u64>(), s in 2usize..5, n in 1usize..4) {
        let mut r = rng(seed);
        let side = 24;
        let gt = SrgbImage::new(random_tensor_f32(&[3, side, side], 0.0, 1.0, &mut r)).unwrap();
        let cfg = SynthesisConfig { trans_max_px: 3.0, ..SynthesisConfig::default() };
        let a = synthesize_burst(&gt, n, s, seed, &cfg).unwrap();
        prop_assert_eq!(&a, &synthesize_burst(&gt, n, s, seed, &cfg).unwrap());
        prop_assert_eq!(a.frames.len(), n);
        for f in &a.frames {
            prop_assert_eq!(f.data.shape(), &[4, side / (2 * s), side / (2 * s)][..]);
            prop_assert!(f.data.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        prop_assert!(a.motions[0].rotation == 0.0 && a.motions[0].dx == 0.0 && a.motions[0].dy == 0.0);
        let clean = synthesize_burst(&gt, n, s, seed, &SynthesisConfig::clean()).unwrap();
        prop_assert!(clean.frames.iter().all(|f| f == &clean.frames[0]));
    }
}

/// SSIM from separably filtered local moments.
fn ssim_reference(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (c, h, w) = a.dims3();
    let gray = |t: &Tensor<f32>| -> Vec<f64> {
        (0..h * w).map(|i| (0..c).map(|ch| t.data()[ch * h * w + i] as f64).sum::<f64>() / c as f64).collect()
    };
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let sum: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / sum).collect();
    let filter = |img: &[f64]| -> Vec<f64> {
        let ow = w - 10;
        let oh = h - 10;
        let rows: Vec<f64> = (0..h)
            .flat_map(|y| (0..ow).map(move |x| (y, x)))
            .map(|(y, x)| (0..11).map(|k| g[k] * img[y * w + x + k]).sum())
            .collect();
        (0..oh).flat_map(|y| (0..ow).map(move |x| (y, x))).map(|(y, x)| (0..11).map(|k| g[k] * rows[(y + k) * ow + x]).sum()).collect()
    };
    let (x, y) = (gray(a), gray(b));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, my, sxx, syy, sxy) = (filter(&x), filter(&y), filter(&xx), filter(&yy), filter(&xy));
    let (c1, c2) = (1e-4, 9e-4);
    let n = mx.len();
    (0..n)
        .map(|i| {
            let (vx, vy, cv) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            ((2.0 * mx[i] * my[i] + c1) * (2.0 * cv + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
        })
        .sum::<f64>()
        / n as f64
}
