//! Residual maps of a translated burst before and after warping each frame
//! onto the reference, with the true motions or a trained flow network.
//!
//! ```text
//! cargo run --release --example alignment_residuals -- [checkpoint.npz] [out_dir]
//! ```

use std::path::PathBuf;

use burstm::checkpoint::load_checkpoint;
use burstm::evaluation::{alignment_residuals, render_alignment};
use burstm::flow_net::estimate_burst_flows;
use burstm::geometry::FlowField;
use burstm::io::read_image;
use burstm::raw_pipeline::{resize_bicubic, synthesize_with_motions, Motion, SrgbImage, SynthesisConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> burstm::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let checkpoint = args.next();
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example_alignment".into()));

    let img = read_image(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus/astronaut.png").as_ref())?;
    let gt = SrgbImage::new(resize_bicubic(&img.data, 96, 96).map(|v| v.clamp(0.0, 1.0)))?;
    // shifts in ground-truth pixels; one frame pixel is 4 of them at x2
    let motions: Vec<Motion> = [(0.0, 0.0), (4.0, 0.0), (-6.0, 3.0), (2.0, -8.0), (10.0, 5.0)]
        .into_iter()
        .map(|(dx, dy)| Motion { rotation: 0.0, dx, dy })
        .collect();
    let burst = synthesize_with_motions(&gt, 2, 1, &SynthesisConfig::default(), &motions, &mut ChaCha8Rng::seed_from_u64(1))?;

    let flows: Vec<FlowField<f32>> = match checkpoint {
        Some(p) => {
            let state = load_checkpoint(p.as_ref())?.state;
            estimate_burst_flows(&state.params, &state.config.fnet, &burst)?
        }
        None => (0..burst.len()).map(|i| burst.true_flow(i)).collect(),
    };
    let report = alignment_residuals(&burst.frames, &flows)?;
    for (i, (b, a)) in report.before.iter().zip(&report.after).enumerate() {
        println!("frame {}: before {:.5} after {:.5}", i + 1, b.max_abs(), a.max_abs());
    }
    println!("mean residual before {:.5} after {:.5}", report.mean_before, report.mean_after);
    let files = render_alignment(&report, &out)?;
    println!("wrote {} maps to {}", files.len(), out.display());
    Ok(())
}
