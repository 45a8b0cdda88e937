//! A handful of optimizer steps on one burst with the cosine schedule,
//! printing both loss terms.
//!
//! ```text
//! cargo run --release --example training_steps -- [steps]
//! ```

use burstm::cli::ExperimentConfig;
use burstm::io::read_image;
use burstm::raw_pipeline::{resize_bicubic, synthesize_burst, SrgbImage, SynthesisConfig};
use burstm::training::{cosine_lr, train_step, ModelState};

fn main() -> burstm::error::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("step count"));
    let cfg = ExperimentConfig::toy();
    let img = read_image(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus/coffee.png").as_ref())?;
    let (h, w) = img.dims();
    let gt = SrgbImage::new(resize_bicubic(&img.crop(0, (w - h) / 2, h, h)?.data, 48, 48).map(|v| v.clamp(0.0, 1.0)))?;
    let burst = synthesize_burst(&gt, 4, 2, 2, &SynthesisConfig::default())?;

    let mut state = ModelState::new(cfg.model, cfg.train.seed)?;
    for step in 0..steps {
        let lr = cosine_lr(step, steps, cfg.train.lr_max, cfg.train.lr_min)?;
        let r = train_step(&mut state, std::slice::from_ref(&burst), &cfg.train, lr)?;
        println!("step {step:>3} lr {lr:.2e}  l_sr {:.4}  l_of {:.5}", r.l_sr, r.l_of);
    }
    Ok(())
}
