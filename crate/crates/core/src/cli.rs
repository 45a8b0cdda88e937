//! Experiment configuration and the command-line entry points.
//!
//! Every command resolves an [`ExperimentConfig`] (defaults < file < flags),
//! prints its hash and seed, and writes it as `config.toml` into its output
//! directory. Output directories default to
//! `$BURSTM_CACHE/<command>/<hash prefix>`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{
    alignment_residuals, evaluate, render_alignment, render_spectrum, spectrum_analysis, EvalReport, SUPPORT_FRACTION,
};
use crate::flow_net::estimate_burst_flows;
use crate::io::{create_dir, load_split, read_burst, read_image, write_burst, write_npy, write_png, write_text, Record};
use crate::raw_pipeline::{synthesize_burst, SrgbImage, SynthesisConfig};
use crate::reconstruction::{burstm_forward, ModelConfig};
use crate::training::{train, RunOptions, TrainConfig, TrainData, TrainOutcome};

/// Environment variable naming the experiment cache root.
pub const CACHE_ENV: &str = "BURSTM_CACHE";
pub const DEFAULT_CACHE: &str = ".burstm";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of sRGB images (png / jpeg).
    pub source_dir: PathBuf,
    pub n_frames: usize,
    /// Every scene is synthesized once per scale.
    pub scales: Vec<usize>,
    /// Square ground-truth crop size; 0 keeps the largest centered crop whose
    /// sides divide every `2s`.
    pub gt_size: usize,
    /// Number of random crops cycled over the images; 0 = one centered crop per image.
    pub scenes: usize,
    /// Trailing scenes written to the `val` split instead of `train`.
    pub val_scenes: usize,
    pub seed: u64,
    pub synthesis: SynthesisConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_dir: PathBuf::from("images"),
            n_frames: 14,
            scales: vec![2, 3, 4],
            gt_size: 0,
            scenes: 0,
            val_scenes: 0,
            seed: 0,
            synthesis: SynthesisConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Output scales; empty evaluates each burst at its synthesis scale.
    pub scales: Vec<usize>,
    /// Pixels ignored at each image border in PSNR.
    pub border_crop: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

impl ExperimentConfig {
    /// Desk-scale setup: 8-frame bursts of 96×96 scenes, K = 32, shallow
    /// encoder and blender, 16-channel flow net, 2000 single-burst steps.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.data.n_frames = 8;
        cfg.data.gt_size = 96;
        cfg.data.scenes = 50;
        cfg.model.warp.k = 32;
        cfg.model.warp.encoder_blocks = 4;
        cfg.model.blender_blocks = 2;
        cfg.model.merge_frames = 8;
        cfg.model.decoder_channels = 64;
        cfg.model.fnet.base_channels = 16;
        cfg.model.fnet.pad_to_multiple = true;
        cfg.train.steps = Some(2000);
        cfg.train.batch_size = 1;
        cfg.train.burst_size = 8;
        cfg.train.lr_max = 1e-4;
        cfg.train.lr_min = 1e-6;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    /// Sets both the synthesis and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    /// Side multiple every ground truth must have.
    pub fn gt_multiple(&self) -> usize {
        self.data.scales.iter().fold(1, |m, &s| lcm(m, 2 * s))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.data.n_frames == 0 {
            return Err(Error::Config("data.n_frames must be >= 1".into()));
        }
        if self.data.scales.is_empty() || self.data.scales.contains(&0) {
            return Err(Error::Config("data.scales must be non-empty and positive".into()));
        }
        let m = self.gt_multiple();
        if self.data.gt_size % m != 0 {
            return Err(Error::Config(format!("data.gt_size {} is not a multiple of {m}", self.data.gt_size)));
        }
        if self.eval.scales.contains(&0) {
            return Err(Error::Config("eval.scales must be positive".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_text(&dir.join(CONFIG_FILE), &self.to_toml())
    }
}

/// `$BURSTM_CACHE`, or `.burstm` in the working directory.
pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE))
}

pub fn default_out(command: &str, cfg: &ExperimentConfig) -> PathBuf {
    cache_root().join(command).join(cfg.short_hash())
}

/// Seed of the burst synthesized from scene `scene` at scale `scale`.
pub fn burst_seed(seed: u64, scene: usize, scale: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((scene as u64) << 8 | scale as u64);
    rng.gen()
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Ground-truth scenes cut from the source images, with their names.
pub fn prepare_scenes(images: &[(String, SrgbImage)], cfg: &ExperimentConfig) -> Result<Vec<(String, SrgbImage)>> {
    let m = cfg.gt_multiple();
    let size_of = |img: &SrgbImage| {
        let (h, w) = img.dims();
        if cfg.data.gt_size > 0 {
            (h >= cfg.data.gt_size && w >= cfg.data.gt_size).then_some((cfg.data.gt_size, cfg.data.gt_size))
        } else {
            (h >= m && w >= m).then_some((h - h % m, w - w % m))
        }
    };
    let usable: Vec<&(String, SrgbImage)> = images
        .iter()
        .filter(|(name, img)| {
            let ok = size_of(img).is_some();
            if !ok {
                warn!("{name}: {:?} too small for the configured crop", img.dims());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Config("no source image is large enough".into()));
    }
    if cfg.data.scenes == 0 {
        return usable
            .iter()
            .map(|(name, img)| {
                let (ch, cw) = size_of(img).unwrap();
                let (h, w) = img.dims();
                Ok((name.clone(), img.crop((h - ch) / 2, (w - cw) / 2, ch, cw)?))
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    rng.set_stream(u64::MAX);
    (0..cfg.data.scenes)
        .map(|j| {
            let (name, img) = usable[j % usable.len()];
            let (ch, cw) = size_of(img).unwrap();
            let (h, w) = img.dims();
            let (y, x) = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
            Ok((format!("{name}_{j:04}"), img.crop(y, x, ch, cw)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisSummary {
    pub bursts: usize,
    pub failed_inputs: Vec<PathBuf>,
}

/// Synthesizes `<out>/{train,val}/<scene>_x<s>/` for every scene and scale.
pub fn cmd_synthesize(cfg: &ExperimentConfig, out: &Path) -> Result<SynthesisSummary> {
    let dir = &cfg.data.source_dir;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
    paths.sort();
    let mut images = Vec::new();
    let mut failed = Vec::new();
    for p in paths {
        match read_image(&p) {
            Ok(img) => {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                images.push((stem, img));
            }
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                failed.push(p);
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Config(format!("no readable images in {}", dir.display())));
    }
    let scenes = prepare_scenes(&images, cfg)?;
    if cfg.data.val_scenes >= scenes.len() && cfg.data.val_scenes > 0 {
        return Err(Error::Config(format!("{} val scenes leave no training scenes", cfg.data.val_scenes)));
    }
    let n_train = scenes.len() - cfg.data.val_scenes;
    cfg.write_to(out)?;
    let mut count = 0;
    for (j, (name, gt)) in scenes.iter().enumerate() {
        let split = if j < n_train { "train" } else { "val" };
        for &s in &cfg.data.scales {
            let b = synthesize_burst(gt, cfg.data.n_frames, s, burst_seed(cfg.data.seed, j, s), &cfg.data.synthesis)?;
            write_burst(&out.join(split).join(format!("{name}_x{s}")), &b)?;
            count += 1;
        }
    }
    info!("wrote {count} bursts to {}", out.display());
    Ok(SynthesisSummary { bursts: count, failed_inputs: failed })
}

/// Trains on `<dataset>/train` (validating on `<dataset>/val` when present).
pub fn cmd_train(cfg: &ExperimentConfig, dataset: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let train_set = load_split(dataset, "train")?;
    if train_set.is_empty() {
        return Err(Error::Config(format!("no training bursts under {}", dataset.join("train").display())));
    }
    let val = if dataset.join("val").is_dir() { load_split(dataset, "val")? } else { Vec::new() };
    cfg.write_to(out)?;
    let data = TrainData::new(train_set.into_iter().map(|b| b.burst).collect());
    let opts = RunOptions {
        out_dir: out.to_path_buf(),
        config_hash: cfg.hash(),
        experiment: cfg.to_toml(),
        resume: resume.map(Path::to_path_buf),
        stop_after: None,
    };
    train(&cfg.train, &cfg.model, &data, &val.into_iter().map(|b| b.burst).collect::<Vec<_>>(), &opts)
}

/// Evaluates a checkpoint on `<dataset>/<split>` and writes `report.txt`.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    split: &str,
    scales: &[usize],
    border_crop: usize,
    out: &Path,
) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let bursts = if dataset.join(split).is_dir() { load_split(dataset, split)? } else { Vec::new() };
    if bursts.is_empty() {
        return Err(Error::Config(format!("no bursts under {}", dataset.join(split).display())));
    }
    let scales = (!scales.is_empty()).then_some(scales);
    let report = evaluate(&ck.state.params, &ck.state.config, &bursts, scales, border_crop)?;
    create_dir(out)?;
    write_text(&out.join(REPORT_FILE), &report.to_text())?;
    Ok(report)
}

fn scale_label(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{}", s as i64)
    } else {
        format!("{s}")
    }
}

/// Writes `sr_x<s>.png` and `sr_x<s>.npy` for every requested scale.
pub fn cmd_infer(checkpoint: &Path, burst_dir: &Path, scales: &[f64], out: &Path) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(checkpoint)?;
    let burst = read_burst(burst_dir)?;
    create_dir(out)?;
    let mut written = Vec::new();
    for &s in scales {
        let o = burstm_forward(&ck.state.params, &ck.state.config, &burst.frames, s)?;
        let label = scale_label(s);
        let png = out.join(format!("sr_x{label}.png"));
        write_png(&png, &o.sr.data)?;
        write_npy(&out.join(format!("sr_x{label}.npy")), &o.sr.data)?;
        written.push(png);
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnalysisMode {
    Spectrum,
    Alignment,
}

/// Renders the frequency histograms or the alignment residual maps of one burst.
pub fn cmd_analyze(checkpoint: &Path, burst_dir: &Path, mode: AnalysisMode, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(checkpoint)?;
    let burst = read_burst(burst_dir)?;
    let (params, config) = (&ck.state.params, &ck.state.config);
    match mode {
        AnalysisMode::Spectrum => {
            let o = burstm_forward(params, config, &burst.frames, burst.scale as f64)?;
            let report = spectrum_analysis(&o.features, Some(&burst.gt.data))?;
            let files = render_spectrum(&report, out)?;
            let rec = Record::new()
                .with("mass_fraction", SUPPORT_FRACTION)
                .with("accumulated_support", report.accumulated_support())
                .with("max_frame_support", report.max_frame_support())
                .with("f_max", report.accumulated.f_max);
            write_text(&out.join("spectrum.txt"), &rec.to_text())?;
            Ok(files)
        }
        AnalysisMode::Alignment => {
            let flows = estimate_burst_flows(params, &config.fnet, &burst)?;
            let report = alignment_residuals(&burst.frames, &flows)?;
            let files = render_alignment(&report, out)?;
            let rec = Record::new().with("mean_before", report.mean_before).with("mean_after", report.mean_after);
            write_text(&out.join("alignment.txt"), &rec.to_text())?;
            Ok(files)
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "burstm", about = "Multi-frame RAW burst super-resolution", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $BURSTM_CACHE/<command>/<config hash>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Scale factor; repeat for several.
    #[arg(long, global = true)]
    pub scale: Vec<f64>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic burst dataset from a directory of sRGB images.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Image directory (overrides data.source_dir).
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train a model on a synthesized dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Super-resolve one burst directory.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        burst: PathBuf,
    },
    /// Render spectrum or alignment diagnostics for one burst.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        burst: PathBuf,
        #[arg(long, value_enum, default_value = "spectrum")]
        mode: AnalysisMode,
    },
}

fn integer_scales(scales: &[f64]) -> Result<Vec<usize>> {
    scales
        .iter()
        .map(|&s| {
            if s >= 1.0 && s.fract() == 0.0 {
                Ok(s as usize)
            } else {
                Err(Error::Config(format!("scale {s} must be a positive integer here")))
            }
        })
        .collect()
}

/// Defaults, then the configuration file (or the one stored in the
/// checkpoint), then flags.
fn resolve(common: &Common, fallback: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(text)) if !text.trim().is_empty() => ExperimentConfig::from_toml(text)?,
        _ => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn announce(cfg: &ExperimentConfig, seed: u64) {
    println!("config_hash={} seed={seed}", cfg.hash());
}

fn require_checkpoint(common: &Common) -> Result<&Path> {
    common.checkpoint.as_deref().ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn stored_experiment(common: &Common) -> Result<String> {
    Ok(load_checkpoint(require_checkpoint(common)?)?.experiment)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize { common, images } => {
            let mut cfg = resolve(&common, None)?;
            if let Some(dir) = images {
                cfg.data.source_dir = dir;
            }
            if !common.scale.is_empty() {
                cfg.data.scales = integer_scales(&common.scale)?;
            }
            cfg.validate()?;
            announce(&cfg, cfg.data.seed);
            let out = common.out.clone().unwrap_or_else(|| default_out("synthesize", &cfg));
            let summary = cmd_synthesize(&cfg, &out)?;
            println!("bursts={} failed_inputs={} out={}", summary.bursts, summary.failed_inputs.len(), out.display());
        }
        Command::Train { common, data, resume } => {
            let mut cfg = resolve(&common, None)?;
            if !common.scale.is_empty() {
                cfg.train.scales = integer_scales(&common.scale)?;
            }
            cfg.validate()?;
            announce(&cfg, cfg.train.seed);
            let out = common.out.clone().unwrap_or_else(|| default_out("train", &cfg));
            let o = cmd_train(&cfg, &data, &out, resume.as_deref())?;
            println!(
                "checkpoint={} metrics={} steps={} skipped={}",
                o.checkpoint.display(),
                o.metrics_log.display(),
                o.state.step,
                o.skipped_steps
            );
        }
        Command::Eval { common, data, split } => {
            let mut cfg = resolve(&common, Some(&stored_experiment(&common)?))?;
            if !common.scale.is_empty() {
                cfg.eval.scales = integer_scales(&common.scale)?;
            }
            announce(&cfg, cfg.train.seed);
            let out = common.out.clone().unwrap_or_else(|| default_out("eval", &cfg));
            cfg.write_to(&out)?;
            let report = cmd_eval(require_checkpoint(&common)?, &data, &split, &cfg.eval.scales, cfg.eval.border_crop, &out)?;
            print!("{}", report.to_text());
        }
        Command::Infer { common, burst } => {
            let cfg = resolve(&common, Some(&stored_experiment(&common)?))?;
            announce(&cfg, cfg.train.seed);
            let scales = if common.scale.is_empty() { vec![read_burst(&burst)?.scale as f64] } else { common.scale.clone() };
            let out = common.out.clone().unwrap_or_else(|| default_out("infer", &cfg));
            cfg.write_to(&out)?;
            for p in cmd_infer(require_checkpoint(&common)?, &burst, &scales, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Analyze { common, burst, mode } => {
            let cfg = resolve(&common, Some(&stored_experiment(&common)?))?;
            announce(&cfg, cfg.train.seed);
            let out = common.out.clone().unwrap_or_else(|| default_out("analyze", &cfg));
            cfg.write_to(&out)?;
            let files = cmd_analyze(require_checkpoint(&common)?, &burst, mode, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod dump {
    #[test]
    #[ignore]
    fn dump_toy() {
        std::fs::write("configs/toy.toml", super::ExperimentConfig::toy().to_toml()).unwrap();
    }
}
