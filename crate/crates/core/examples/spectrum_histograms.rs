//! Frequency histograms of the per-frame Fourier features and their sum,
//! next to the ground-truth DFT.
//!
//! ```text
//! cargo run --release --example spectrum_histograms -- [checkpoint.npz] [out_dir]
//! ```

use std::path::PathBuf;

use burstm::checkpoint::load_checkpoint;
use burstm::cli::ExperimentConfig;
use burstm::evaluation::{render_spectrum, spectrum_analysis, SUPPORT_FRACTION};
use burstm::io::read_image;
use burstm::raw_pipeline::{resize_bicubic, synthesize_burst, SrgbImage, SynthesisConfig};
use burstm::reconstruction::burstm_forward;
use burstm::training::ModelState;

fn main() -> burstm::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let state = match args.next() {
        Some(p) => load_checkpoint(p.as_ref())?.state,
        None => ModelState::new(ExperimentConfig::toy().model, 0)?,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example_spectrum".into()));

    let img = read_image(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus/chelsea.png").as_ref())?;
    let (h, w) = img.dims();
    let gt = SrgbImage::new(resize_bicubic(&img.crop(0, (w - h) / 2, h, h)?.data, 96, 96).map(|v| v.clamp(0.0, 1.0)))?;
    let burst = synthesize_burst(&gt, 8, 2, 11, &SynthesisConfig::default())?;
    let o = burstm_forward(&state.params, &state.config, &burst.frames, 2.0)?;

    let report = spectrum_analysis(&o.features, Some(&gt.data))?;
    for (i, hist) in report.per_frame.iter().enumerate() {
        println!("frame {i}: support {:.3}", hist.support(SUPPORT_FRACTION));
    }
    println!(
        "accumulated support {:.3} (widest frame {:.3}), |f| up to {:.2}",
        report.accumulated_support(),
        report.max_frame_support(),
        report.accumulated.f_max
    );
    let files = render_spectrum(&report, &out)?;
    println!("wrote {} images to {}", files.len(), out.display());
    Ok(())
}
