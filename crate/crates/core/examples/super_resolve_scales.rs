//! One model, several output scales, including a non-integer one.
//!
//! ```text
//! cargo run --release --example super_resolve_scales -- [checkpoint.npz] [out_dir]
//! ```
//! Without a checkpoint the toy model is randomly initialized.

use std::path::PathBuf;
use std::time::Instant;

use burstm::checkpoint::load_checkpoint;
use burstm::cli::ExperimentConfig;
use burstm::io::{read_image, write_png};
use burstm::raw_pipeline::{resize_bicubic, synthesize_burst, SrgbImage, SynthesisConfig};
use burstm::reconstruction::burstm_forward;
use burstm::training::ModelState;

fn main() -> burstm::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let state = match args.next() {
        Some(p) => load_checkpoint(p.as_ref())?.state,
        None => ModelState::new(ExperimentConfig::toy().model, 0)?,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example_scales".into()));

    let img = read_image(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus/rocket.png").as_ref())?;
    let (h, w) = img.dims();
    let gt = SrgbImage::new(resize_bicubic(&img.crop(0, (w - h) / 2, h, h)?.data, 96, 96).map(|v| v.clamp(0.0, 1.0)))?;
    let burst = synthesize_burst(&gt, 8, 2, 3, &SynthesisConfig::default())?;

    for s in [2.0, 3.0, 3.5, 4.0] {
        let t = Instant::now();
        let o = burstm_forward(&state.params, &state.config, &burst.frames, s)?;
        println!("x{s}: {:?} in {:.0} ms", o.sr.data.shape(), t.elapsed().as_secs_f64() * 1e3);
        write_png(&out.join(format!("sr_x{s}.png")), &o.sr.data)?;
    }
    Ok(())
}
