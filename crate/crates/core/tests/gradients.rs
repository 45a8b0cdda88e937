//! Analytic gradients against central differences in double precision.

mod common;

use burstm::flow_net::{flow_graph, FNetConfig};
use burstm::neural_warp::{encode, warp_frame_graph, WarpConfig};
use burstm::nn::ParamSet;
use burstm::reconstruction::{forward_graph, init_model, skip_upsample, MergeMode, ModelConfig};
use common::{check_gradients, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        fnet: FNetConfig { base_channels: 4, levels: 2, pad_to_multiple: true, ..FNetConfig::default() },
        warp: WarpConfig { k: 4, encoder_blocks: 1, ..WarpConfig::default() },
        blender_blocks: 1,
        merge: MergeMode::Mean,
        merge_frames: 2,
        decoder_layers: 2,
        decoder_channels: 8,
    }
}

fn params(cfg: &ModelConfig, prefix: &str) -> ParamSet<f64> {
    init_model::<f64>(cfg, 3).unwrap().subset(prefix)
}

#[test]
fn flow_net_on_8x8() {
    let cfg = FNetConfig { base_channels: 4, levels: 3, ..FNetConfig::default() };
    let model = ModelConfig { fnet: cfg.clone(), ..tiny_model() };
    let p = params(&model, "fnet.");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random_tensor(&[4, 8, 8], 0.0, 1.0, &mut rng), random_tensor(&[4, 8, 8], 0.0, 1.0, &mut rng)];
    let (err, at) = check_gradients(&p, &inputs, 6, 1e-6, &|g, p, xs| flow_graph(g, p, &cfg, xs[0], xs[1]).unwrap());
    assert!(err < 1e-4, "relative error {err} at {at}");
}

#[test]
fn encoder() {
    let cfg = tiny_model();
    let p = params(&cfg, "encoder.");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random_tensor(&[4, 6, 6], 0.0, 1.0, &mut rng)];
    let (err, at) = check_gradients(&p, &inputs, 6, 1e-6, &|g, p, xs| encode(g, p, &cfg.warp, xs[0]));
    assert!(err < 1e-3, "relative error {err} at {at}");
}

#[test]
fn neural_warp_frame_graph() {
    let cfg = tiny_model();
    let all = init_model::<f64>(&cfg, 3).unwrap();
    let mut p = all.subset("encoder.");
    for prefix in ["amplitude", "frequency", "phase"] {
        p.extend(all.subset(prefix));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random_tensor(&[4, 6, 6], 0.0, 1.0, &mut rng), random_tensor(&[2, 6, 6], -0.2, 0.2, &mut rng)];
    let (err, at) = check_gradients(&p, &inputs, 6, 1e-6, &|g, p, xs| {
        warp_frame_graph(g, p, &cfg.warp, xs[0], xs[1], 9, 9).unwrap().mapped
    });
    assert!(err < 1e-3, "relative error {err} at {at}");
}

#[test]
fn skip_path() {
    let cfg = tiny_model();
    let p = params(&cfg, "skip.");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random_tensor(&[4, 6, 6], 0.0, 1.0, &mut rng)];
    let (err, at) = check_gradients(&p, &inputs, 6, 1e-6, &|g, p, xs| skip_upsample(g, p, xs[0], 12, 12));
    assert!(err < 1e-3, "relative error {err} at {at}");
}

#[test]
fn full_model_6x6_two_frames() {
    let cfg = tiny_model();
    let p = init_model::<f64>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![random_tensor(&[4, 6, 6], 0.0, 1.0, &mut rng), random_tensor(&[4, 6, 6], 0.0, 1.0, &mut rng)];
    let (err, at) =
        check_gradients(&p, &inputs, 4, 1e-6, &|g, p, xs| forward_graph(g, p, &cfg, xs, 12, 12).unwrap().sr);
    assert!(err < 1e-3, "relative error {err} at {at}");
}
