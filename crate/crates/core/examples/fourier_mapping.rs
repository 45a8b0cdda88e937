//! The per-pixel sinusoid mapping on a hand-made example, then the learned
//! features of a real burst.
//!
//! ```text
//! cargo run --release --example fourier_mapping
//! ```

use burstm::cli::ExperimentConfig;
use burstm::io::read_image;
use burstm::neural_warp::{apply_mapping, fourier_map, Mapping};
use burstm::raw_pipeline::{resize_bicubic, synthesize_burst, SrgbImage, SynthesisConfig};
use burstm::reconstruction::burstm_forward;
use burstm::tensor::Tensor;
use burstm::training::ModelState;

fn main() -> burstm::error::Result<()> {
    // one frequency pair on a 1×4 strip, local offsets sweeping half a pixel
    let amp = Tensor::<f64>::full(&[2, 1, 4], 0.5);
    let freq = Tensor::from_vec(&[2, 1, 4], vec![0.0; 4].into_iter().chain(vec![2.0; 4]).collect())?;
    let phase = Tensor::zeros(&[1, 1, 4]);
    let delta = Tensor::from_vec(&[2, 1, 4], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.125, 0.25, 0.5])?;
    let m = fourier_map(&amp, &freq, &phase, &delta)?;
    println!("cos terms {:?}", &m.data()[..4]);
    println!("sin terms {:?}", &m.data()[4..]);
    let lin = apply_mapping(Mapping::Linear, &amp, &freq, &phase, &delta)?;
    println!("linear    {:?}", lin.data());

    let cfg = ExperimentConfig::toy();
    let state = ModelState::new(cfg.model, 1)?;
    let img = read_image(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus/coffee.png").as_ref())?;
    let (h, w) = img.dims();
    let gt = SrgbImage::new(resize_bicubic(&img.crop(0, (w - h) / 2, h, h)?.data, 48, 48).map(|v| v.clamp(0.0, 1.0)))?;
    let burst = synthesize_burst(&gt, 4, 2, 5, &SynthesisConfig::default())?;
    let o = burstm_forward(&state.params, &state.config, &burst.frames, 2.0)?;
    for (i, f) in o.features.iter().enumerate() {
        println!(
            "frame {i}: amplitude max {:.3}, frequency max {:.3}, on {:?}",
            f.amplitude.max_abs(),
            f.frequency.max_abs(),
            &f.amplitude.shape()[1..]
        );
    }
    Ok(())
}
