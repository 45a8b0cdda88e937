//! Synthesizes a small dataset from the bundled images, trains the toy model
//! and compares its ×2 train-set PSNR with the bicubic reference.
//!
//! ```text
//! cargo run --release --example train_toy -- [out_dir] [config.toml]
//! ```

use std::path::PathBuf;

use burstm::cli::{cmd_synthesize, cmd_train, ExperimentConfig};
use burstm::evaluation::evaluate;
use burstm::io::load_split;

fn main() -> burstm::error::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/toy".into()));
    let mut cfg = match args.next() {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::toy(),
    };
    cfg.data.source_dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus").into();
    println!("config_hash={}", cfg.hash());

    let data = out.join("data");
    let s = cmd_synthesize(&cfg, &data)?;
    println!("{} bursts", s.bursts);

    let run = cmd_train(&cfg, &data, &out.join("run"), None)?;
    println!("trained {} steps -> {}", run.state.step, run.checkpoint.display());

    let x2: Vec<_> = load_split(&data, "train")?.into_iter().filter(|b| b.burst.scale == 2).collect();
    let report = evaluate(&run.state.params, &run.state.config, &x2, None, 0)?;
    let (psnr, ssim, bicubic, ms) = report.means(Some(2));
    println!("x2 train: psnr {psnr:.2} dB  ssim {ssim:.4}  bicubic {bicubic:.2} dB  {ms:.0} ms/burst");
    Ok(())
}
