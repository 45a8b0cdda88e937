//! Turns one bundled photograph into a RAW burst and writes it to disk.
//!
//! ```text
//! cargo run --release --example synthesize_burst -- [out_dir] [scale] [frames]
//! ```

use std::path::PathBuf;

use burstm::evaluation::{bicubic_baseline, psnr};
use burstm::io::{read_image, write_burst, write_png};
use burstm::raw_pipeline::{resize_bicubic, synthesize_burst, SrgbImage, SynthesisConfig};

fn main() -> burstm::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example_burst".into()));
    let scale: usize = args.next().map_or(2, |s| s.parse().expect("scale"));
    let frames: usize = args.next().map_or(8, |s| s.parse().expect("frame count"));

    let img = read_image(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus/chelsea.png").as_ref())?;
    let (h, w) = img.dims();
    let side = h.min(w);
    let square = img.crop((h - side) / 2, (w - side) / 2, side, side)?;
    let gt_side = 24 * 2 * scale;
    let gt = SrgbImage::new(resize_bicubic(&square.data, gt_side, gt_side).map(|v| v.clamp(0.0, 1.0)))?;

    let burst = synthesize_burst(&gt, frames, scale, 7, &SynthesisConfig::default())?;
    println!("gt {gt_side}x{gt_side}, {} RGGB frames of {:?}", burst.len(), burst.frames[0].data.shape());
    println!("noise shot {:.2e} read {:.2e}, gains {:?}", burst.noise.shot, burst.noise.read, burst.isp.gains);
    for (i, m) in burst.motions.iter().enumerate() {
        println!("frame {i}: dx {:+.2} dy {:+.2} rot {:+.3} deg", m.dx, m.dy, m.rotation.to_degrees());
    }
    let base = bicubic_baseline(&burst);
    println!("bicubic from frame 0: {:.2} dB", psnr(&base, &gt.data, 1.0)?);

    write_burst(&out, &burst)?;
    write_png(&out.join("bicubic.png"), &base)?;
    write_png(&out.join("gt.png"), &gt.data)?;
    println!("wrote {}", out.display());
    Ok(())
}
