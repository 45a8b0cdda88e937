//! PSNR / SSIM of the single-frame bicubic baseline at every scale.
//!
//! ```text
//! cargo run --release --example metrics_and_baseline
//! ```

use burstm::evaluation::{bicubic_baseline, psnr, psnr_cropped, ssim};
use burstm::io::read_image;
use burstm::raw_pipeline::{resize_bicubic, synthesize_burst, SrgbImage, SynthesisConfig};

fn main() -> burstm::error::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus");
    for name in ["astronaut", "chelsea", "coffee", "rocket"] {
        let img = read_image(format!("{dir}/{name}.png").as_ref())?;
        let (h, w) = img.dims();
        let side = h.min(w);
        let gt = SrgbImage::new(
            resize_bicubic(&img.crop((h - side) / 2, (w - side) / 2, side, side)?.data, 96, 96).map(|v| v.clamp(0.0, 1.0)),
        )?;
        let mut line = format!("{name:<10}");
        for s in [2, 3, 4] {
            let b = synthesize_burst(&gt, 1, s, 3, &SynthesisConfig::default())?;
            let up = bicubic_baseline(&b);
            line += &format!(
                "  x{s}: {:.2} dB ({:.2} cropped) ssim {:.3}",
                psnr(&up, &gt.data, 1.0)?,
                psnr_cropped(&up, &gt.data, 1.0, 4)?,
                ssim(&up, &gt.data)?
            );
        }
        println!("{line}");
    }
    Ok(())
}
