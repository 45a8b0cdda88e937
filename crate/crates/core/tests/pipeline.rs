//! End-to-end behaviour of synthesis, alignment, losses and evaluation.

mod common;

use burstm::evaluation::{alignment_residuals, bicubic_baseline, evaluate, psnr};
use burstm::geometry::{bilinear_warp, FlowField};
use burstm::graph::Graph;
use burstm::io::NamedBurst;
use burstm::losses::{aligned_l1_graph, aligned_l1_loss, photometric_flow_loss, photometric_graph, FixedProvider};
use burstm::nn::ParamSet;
use burstm::raw_pipeline::{synthesize_burst, NoiseParams, RggbFrame, SrgbImage, SynthesisConfig};
use burstm::reconstruction::{init_model, SrImage};
use burstm::tensor::Tensor;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn still() -> SynthesisConfig {
    SynthesisConfig {
        rot_max_deg: 0.0,
        trans_max_px: 0.0,
        noise: Some(NoiseParams { shot: 0.0, read: 0.0 }),
        ..SynthesisConfig::default()
    }
}

#[test]
fn single_frame_round_trip_exceeds_25_db() {
    for name in ["astronaut.png", "coffee.png"] {
        let gt = smooth_scene(name, 96);
        let b = synthesize_burst(&gt, 1, 2, 7, &still()).unwrap();
        let p = psnr(&bicubic_baseline(&b), &gt.data, 1.0).unwrap();
        assert!(p > 25.0, "{name}: {p:.2} dB");
    }
}

#[test]
fn fourteen_frame_x4_burst_shapes() {
    let gt = corpus_scene("chelsea.png", 192);
    let b = synthesize_burst(&gt, 14, 4, 1, &SynthesisConfig::default()).unwrap();
    assert_eq!(b.frames.len(), 14);
    assert!(b.frames.iter().all(|f| f.data.shape() == [4, 24, 24]));
    assert_eq!(bicubic_baseline(&b).shape(), &[3, 192, 192]);
}

#[test]
fn constant_gray_burst_gives_constant_baseline() {
    let gt = SrgbImage::new(Tensor::full(&[3, 48, 48], 0.4)).unwrap();
    let b = synthesize_burst(&gt, 3, 3, 2, &still()).unwrap();
    let base = bicubic_baseline(&b);
    assert!(base.data().iter().all(|&v| (v - 0.4).abs() < 1e-4));
}

#[test]
fn oracle_flows_reduce_translation_residuals() {
    let gt = corpus_scene("rocket.png", 96);
    let b = translation_burst(&gt, 6, 2, 11, 3.0, &SynthesisConfig::clean());
    let flows: Vec<FlowField<f32>> = (0..b.len()).map(|i| b.true_flow(i)).collect();
    let r = alignment_residuals(&b.frames, &flows).unwrap();
    assert_eq!(r.before.len(), 5);
    assert!(r.mean_after < r.mean_before, "{} vs {}", r.mean_after, r.mean_before);

    let still_burst = synthesize_burst(&gt, 4, 2, 3, &SynthesisConfig::clean()).unwrap();
    let zero = vec![FlowField::zeros(24, 24); 4];
    let r = alignment_residuals(&still_burst.frames, &zero).unwrap();
    assert_eq!((r.mean_before, r.mean_after), (0.0, 0.0));
}

#[test]
fn photometric_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = random_tensor_f32(&[4, 10, 10], 0.0, 1.0, &mut rng);
    // second frame shows the scene moved one pixel right
    let moved = Tensor::from_fn(&[4, 10, 10], |i| {
        let (c, y, x) = (i / 100, (i / 10) % 10, i % 10);
        base.at3(c, y, x.saturating_sub(1))
    });
    let flow = FlowField::uniform_pixels(10, 10, 0.0, 1.0);
    let warped = bilinear_warp(&moved, &flow).unwrap();
    let mut worst = 0.0f64;
    for c in 0..4 {
        for y in 0..10 {
            for x in 1..9 {
                worst = worst.max((warped.at3(c, y, x) - base.at3(c, y, x)).abs() as f64);
            }
        }
    }
    assert!(worst < 1e-6);

    let frames = vec![RggbFrame::new(base.clone()).unwrap(), RggbFrame::new(moved.clone()).unwrap()];
    let zero = vec![FlowField::zeros(10, 10); 2];
    let direct = base.data().iter().zip(moved.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / 400.0;
    assert!((photometric_flow_loss(&frames, &zero).unwrap() - direct).abs() < 1e-9);
}

#[test]
fn photometric_loss_gradient_with_respect_to_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![
        random_tensor(&[4, 7, 7], 0.0, 1.0, &mut rng),
        random_tensor(&[4, 7, 7], 0.0, 1.0, &mut rng),
        random_tensor(&[2, 7, 7], -0.2, 0.2, &mut rng),
    ];
    let (err, at) = check_gradients(&ParamSet::new(), &inputs, 20, 1e-6, &|g, _, xs| {
        let zero = g.constant(Tensor::zeros(&[2, 7, 7]));
        photometric_graph(g, &xs[..2], &[zero, xs[2]])
    });
    assert!(err < 1e-3, "{err} at {at}");
}

#[test]
fn aligned_loss_with_exact_inverse_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt = random_tensor_f32(&[3, 12, 12], 0.0, 1.0, &mut rng);
    let pred = Tensor::from_fn(&[3, 12, 12], |i| {
        let (c, y, x) = (i / 144, (i / 12) % 12, i % 12);
        gt.at3(c, y.saturating_sub(1), x)
    });
    let provider = FixedProvider(FlowField::uniform_pixels(12, 12, 1.0, 0.0));
    let g = Graph::<f32>::new();
    let l = aligned_l1_graph(&g, g.constant(pred.clone()), g.constant(gt.clone()), &provider, true).unwrap();
    let _ = l;
    let warped = bilinear_warp(&pred, &provider.0).unwrap();
    let mut interior = 0.0f64;
    for c in 0..3 {
        for y in 0..11 {
            for x in 0..12 {
                interior += (warped.at3(c, y, x) - gt.at3(c, y, x)).abs() as f64;
            }
        }
    }
    assert!(interior / (3.0 * 11.0 * 12.0) < 1e-6);
    let full = aligned_l1_loss(&SrImage { data: pred }, &SrgbImage::new(gt).unwrap(), &provider).unwrap();
    assert!(full > 0.0);

    let inputs = vec![random_tensor(&[3, 6, 6], 0.0, 1.0, &mut rng)];
    let target = random_tensor(&[3, 6, 6], 0.0, 1.0, &mut rng);
    let flow = FlowField(random_tensor(&[2, 6, 6], -0.3, 0.3, &mut rng));
    let (err, at) = check_gradients(&ParamSet::new(), &inputs, 30, 1e-6, &|g, _, xs| {
        aligned_l1_graph(g, xs[0], g.constant(target.clone()), &FixedProvider(flow.clone()), true).unwrap()
    });
    assert!(err < 1e-3, "{err} at {at}");
}

#[test]
fn evaluation_covers_requested_pairs() {
    let cfg = burstm::cli::ExperimentConfig::toy().model;
    let params = init_model::<f32>(&cfg, 0).unwrap();
    let bursts: Vec<NamedBurst> = [("a", 4), ("b", 3)]
        .iter()
        .map(|&(id, s)| NamedBurst { id: id.into(), burst: synthesize_burst(&corpus_scene("coffee.png", 48), 2, s, 1, &still()).unwrap() })
        .collect();
    let report = evaluate(&params, &cfg, &bursts, Some(&[2, 3, 4]), 0).unwrap();
    let pairs: Vec<(String, usize)> = report.entries.iter().map(|e| (e.burst.clone(), e.scale)).collect();
    let expected: Vec<(String, usize)> = vec![("a".into(), 2), ("a".into(), 3), ("a".into(), 4), ("b".into(), 2), ("b".into(), 3)];
    assert_eq!(pairs, expected);
    assert!(report.entries.iter().all(|e| e.runtime_ms > 0.0 && e.psnr.is_finite() && (-1.0..=1.0).contains(&e.ssim)));
    assert_eq!(report.scales(), vec![2, 3, 4]);
    assert!(evaluate(&params, &cfg, &[], None, 0).is_err());
}
