//! Optimization: cosine-annealed AdamW with gradient clipping and a NaN guard,
//! multi-scale batch sampling, metrics logging, checkpointing and resume.
//!
//! Every random choice of step `t` comes from a ChaCha stream keyed by
//! `(seed, t)`, so a resumed run replays exactly what an uninterrupted one does.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::evaluation::psnr;
use crate::graph::{Graph, Var};
use crate::io::Record;
use crate::losses::{aligned_l1_graph, photometric_terms, FnetProvider, LossReport, LossWeights};
use crate::nn::ParamSet;
use crate::raw_pipeline::BurstSet;
use crate::reconstruction::{burstm_forward, feature_dims, forward_graph, frame_vars, init_model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `L_SR + L_OF` against exactly aligned ground truth.
    #[default]
    Synthetic,
    /// Aligned L1 (flow-net provider) + `L_OF`.
    Real,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleSampling {
    #[default]
    Uniform,
    RoundRobin,
}

/// Which side of the pair the configured patch sizes describe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchUnits {
    /// LR frame size; the GT patch is `2s` times larger.
    #[default]
    Lr,
    /// GT size; must be divisible by `2s`.
    Gt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSizes {
    pub units: PatchUnits,
    pub x2: usize,
    pub x3: usize,
    pub x4: usize,
}

impl Default for PatchSizes {
    fn default() -> Self {
        Self { units: PatchUnits::Lr, x2: 96, x3: 64, x4: 48 }
    }
}

impl PatchSizes {
    /// LR patch side for scale `s`.
    pub fn lr_patch(&self, s: usize) -> Result<usize> {
        let size = match s {
            2 => self.x2,
            3 => self.x3,
            4 => self.x4,
            _ => return Err(Error::Config(format!("no patch size for scale {s}"))),
        };
        match self.units {
            PatchUnits::Lr => Ok(size),
            PatchUnits::Gt if size % (2 * s) == 0 => Ok(size / (2 * s)),
            PatchUnits::Gt => Err(Error::Config(format!("GT patch {size} is not divisible by {}", 2 * s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub scales: Vec<usize>,
    pub scale_sampling: ScaleSampling,
    pub patch: PatchSizes,
    /// Frames used per burst (leading frames of longer bursts).
    pub burst_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub loss_weights: LossWeights,
    /// Treat the aligned-loss flow as a constant.
    pub detach_alignment: bool,
    /// Validation bursts evaluated at each epoch end (0 = all).
    pub val_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            steps: None,
            batch_size: 4,
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 5.0,
            scales: vec![2, 3, 4],
            scale_sampling: ScaleSampling::Uniform,
            patch: PatchSizes::default(),
            burst_size: 14,
            seed: 0,
            loss_mode: LossMode::Synthetic,
            loss_weights: LossWeights::default(),
            detach_alignment: true,
            val_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Config(format!("need lr_max >= lr_min > 0, got {} / {}", self.lr_max, self.lr_min)));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("scales must not be empty".into()));
        }
        for &s in &self.scales {
            self.patch.lr_patch(s)?;
        }
        if self.batch_size == 0 || self.burst_size == 0 {
            return Err(Error::Config("batch_size and burst_size must be >= 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½ (lr_max − lr_min)(1 + cos(π t / T))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Parameter("total_steps must be > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Parameter(format!("step {step} beyond {total_steps}")));
    }
    if step == 0 {
        return Ok(lr_max);
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Parameters, AdamW moments and the number of committed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub adam_m: ParamSet<f32>,
    pub adam_v: ParamSet<f32>,
    pub step: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_model(&config, seed)?;
        let adam_m = params.zeros_like();
        let adam_v = params.zeros_like();
        Ok(Self { config, params, adam_m, adam_v, step: 0 })
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.adam_m.is_finite() && self.adam_v.is_finite()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay }
    }

    /// Applies update number `t` (1-based) to copies of the state tensors.
    pub fn apply(
        &self,
        params: &ParamSet<f32>,
        m: &ParamSet<f32>,
        v: &ParamSet<f32>,
        grads: &ParamSet<f32>,
        lr: f64,
        t: u64,
    ) -> (ParamSet<f32>, ParamSet<f32>, ParamSet<f32>) {
        let (mut p2, mut m2, mut v2) = (params.clone(), m.clone(), v.clone());
        let bc1 = 1.0 - self.beta1.powf(t as f64);
        let bc2 = 1.0 - self.beta2.powf(t as f64);
        for (name, p) in p2.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let mt = m2.get_mut(name).unwrap().data_mut();
            let vt = v2.get_mut(name).unwrap().data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] as f64;
                let mi = self.beta1 * mt[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * vt[i] as f64 + (1.0 - self.beta2) * gi * gi;
                mt[i] = mi as f32;
                vt[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let wv = *w as f64;
                *w = (wv - lr * (update + self.weight_decay * wv)) as f32;
            }
        }
        (p2, m2, v2)
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &ParamSet<f32>) -> f64 {
    grads.iter().flat_map(|(_, t)| t.data().iter()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut ParamSet<f32>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let f = (max_norm / (norm + 1e-12)) as f32;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}

/// Loss of one burst on graph `g`; returns (total, l_sr, l_of, per-frame l_of).
fn burst_loss(
    g: &Graph<f32>,
    bound: &crate::nn::Bound,
    state: &ModelState,
    burst: &BurstSet,
    cfg: &TrainConfig,
) -> Result<(Var, Var, Var, Vec<Var>)> {
    let frames = frame_vars(g, &burst.frames)?;
    let (h, w) = burst.lr_dims();
    let (oh, ow) = feature_dims(h, w, burst.scale as f64)?;
    let nodes = forward_graph(g, bound, &state.config, &frames, oh, ow)?;
    let gt = g.constant(burst.gt.data.clone());
    if g.shape(nodes.sr) != g.shape(gt) {
        return Err(Error::Dimension(format!("prediction {:?} vs ground truth {:?}", g.shape(nodes.sr), g.shape(gt))));
    }
    let l_sr = match cfg.loss_mode {
        LossMode::Synthetic => g.l1(nodes.sr, gt),
        LossMode::Real => {
            let provider = FnetProvider { params: state.params.subset("fnet."), config: state.config.fnet.clone() };
            aligned_l1_graph(g, nodes.sr, gt, &provider, cfg.detach_alignment)?
        }
    };
    let terms = photometric_terms(g, &frames, &nodes.flows);
    let l_of = if terms.is_empty() { g.constant(Tensor::scalar(0.0)) } else { g.sum_of(&terms) };
    let w = cfg.loss_weights;
    let total = g.add(g.scale(l_sr, w.sr as f32), g.scale(l_of, w.flow as f32));
    Ok((total, l_sr, l_of, terms))
}

/// Loss report and batch-mean gradients without touching the state.
pub fn batch_gradients(state: &ModelState, batch: &[BurstSet], cfg: &TrainConfig) -> Result<(LossReport, ParamSet<f32>)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    if batch.iter().any(|b| b.scale != batch[0].scale) {
        return Err(Error::Parameter("all bursts of a batch must share a scale".into()));
    }
    let mut grads = state.params.zeros_like();
    let mut report = LossReport::default();
    let inv = 1.0 / batch.len() as f64;
    for burst in batch {
        let g = Graph::<f32>::new();
        let bound = state.params.bind(&g);
        let (total, l_sr, l_of, terms) = burst_loss(&g, &bound, state, burst, cfg)?;
        let gr = g.backward(total);
        for (name, var) in bound.iter() {
            if let Some(t) = gr.get(var) {
                let acc = grads.get_mut(name).unwrap();
                for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += b * inv as f32;
                }
            }
        }
        report.l_sr += g.scalar(l_sr) as f64 * inv;
        report.l_of += g.scalar(l_of) as f64 * inv;
        report.total += g.scalar(total) as f64 * inv;
        if report.per_frame.len() < terms.len() {
            report.per_frame.resize(terms.len(), 0.0);
        }
        for (acc, &t) in report.per_frame.iter_mut().zip(&terms) {
            *acc += g.scalar(t) as f64 * inv;
        }
    }
    Ok((report, grads))
}

/// One AdamW step at learning rate `lr`. On a non-finite loss, gradient or
/// update the state is left untouched and a `NonFinite` error is returned.
pub fn train_step(state: &mut ModelState, batch: &[BurstSet], cfg: &TrainConfig, lr: f64) -> Result<LossReport> {
    let (report, mut grads) = batch_gradients(state, batch, cfg)?;
    if !report.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!("loss {} at step {}", report.total, state.step)));
    }
    clip_grad_norm(&mut grads, cfg.grad_clip);
    let t = state.step + 1;
    let (p, m, v) = AdamW::from_config(cfg).apply(&state.params, &state.adam_m, &state.adam_v, &grads, lr, t);
    if !(p.is_finite() && m.is_finite() && v.is_finite()) {
        return Err(Error::NonFinite(format!("parameter update at step {}", state.step)));
    }
    state.params = p;
    state.adam_m = m;
    state.adam_v = v;
    state.step = t;
    Ok(report)
}

/// Training bursts grouped by their synthesis scale.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub by_scale: BTreeMap<usize, Vec<BurstSet>>,
}

impl TrainData {
    pub fn new(bursts: Vec<BurstSet>) -> Self {
        let mut by_scale: BTreeMap<usize, Vec<BurstSet>> = BTreeMap::new();
        for b in bursts {
            by_scale.entry(b.scale).or_default().push(b);
        }
        Self { by_scale }
    }

    pub fn len(&self) -> usize {
        self.by_scale.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// RNG owning all random choices of step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Scale used at `step`.
pub fn sample_scale(cfg: &TrainConfig, step: u64, rng: &mut ChaCha8Rng) -> usize {
    match cfg.scale_sampling {
        ScaleSampling::Uniform => cfg.scales[rng.gen_range(0..cfg.scales.len())],
        ScaleSampling::RoundRobin => cfg.scales[(step as usize) % cfg.scales.len()],
    }
}

/// Batch of step `step`: scale, burst picks, aligned random crops, frame limit.
pub fn sample_batch(data: &TrainData, cfg: &TrainConfig, step: u64) -> Result<Vec<BurstSet>> {
    let mut rng = step_rng(cfg.seed, step);
    let s = sample_scale(cfg, step, &mut rng);
    let pool = data
        .by_scale
        .get(&s)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Config(format!("no training bursts at scale {s}")))?;
    let patch = cfg.patch.lr_patch(s)?;
    (0..cfg.batch_size)
        .map(|_| {
            let b = &pool[rng.gen_range(0..pool.len())];
            let (h, w) = b.lr_dims();
            let (ph, pw) = (patch.min(h), patch.min(w));
            let (y, x) = (rng.gen_range(0..=h - ph), rng.gen_range(0..=w - pw));
            let mut c = if (ph, pw) == (h, w) { b.clone() } else { b.crop(y, x, ph, pw)? };
            let n = cfg.burst_size.min(c.frames.len());
            c.frames.truncate(n);
            c.motions.truncate(n);
            Ok(c)
        })
        .collect()
}

/// Mean PSNR of the model over `bursts` at their own scales.
pub fn mean_psnr(state: &ModelState, bursts: &[BurstSet]) -> Result<f64> {
    let mut total = 0.0;
    for b in bursts {
        let out = burstm_forward(&state.params, &state.config, &b.frames, b.scale as f64)?;
        total += psnr(&out.sr.data, &b.gt.data, 1.0)?;
    }
    Ok(total / bursts.len().max(1) as f64)
}

/// Where a run writes, and what it stamps into its outputs.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub config_hash: String,
    /// Experiment configuration text copied into checkpoints.
    pub experiment: String,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation (the schedule still spans the full run).
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub skipped_steps: usize,
}

pub const METRICS_LOG: &str = "metrics.log";
pub const CHECKPOINT: &str = "checkpoint.npz";

/// Total steps of the run and steps per epoch.
pub fn schedule_len(cfg: &TrainConfig, data: &TrainData) -> (usize, usize) {
    let per_epoch = data.len().div_ceil(cfg.batch_size).max(1);
    let total = cfg.steps.unwrap_or(cfg.epochs * per_epoch).max(1);
    (total, per_epoch)
}

/// Runs (or resumes) training. One metrics record per step; validation PSNR
/// and a checkpoint at every epoch end and at the end of the run.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &TrainData,
    val: &[BurstSet],
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(format!("creating {}", opts.out_dir.display()), e))?;
    let log_path = opts.out_dir.join(METRICS_LOG);
    let ckpt_path = opts.out_dir.join(CHECKPOINT);
    let mut state = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config_hash != opts.config_hash {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config hash {} differs from {}",
                    ck.config_hash, opts.config_hash
                )));
            }
            truncate_log(&log_path, ck.state.step)?;
            ck.state
        }
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| Error::io("clearing metrics log", e))?;
            }
            ModelState::new(model.clone(), cfg.seed)?
        }
    };
    let (total, per_epoch) = schedule_len(cfg, data);
    let val: Vec<BurstSet> = if cfg.val_limit > 0 { val.iter().take(cfg.val_limit).cloned().collect() } else { val.to_vec() };
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
    let mut skipped = 0;
    let start = state.step;
    let mut step = state.step;
    while (step as usize) < total {
        if opts.stop_after.is_some_and(|n| step - start >= n) {
            break;
        }
        let batch = sample_batch(data, cfg, step)?;
        let lr = cosine_lr(step as usize, total, cfg.lr_max, cfg.lr_min)?;
        let mut rec = Record::new().with("step", step).with("scale", batch[0].scale).with("lr", lr);
        match train_step(&mut state, &batch, cfg, lr) {
            Ok(r) => {
                rec.push("l_sr", r.l_sr).push("l_of", r.l_of).push("total", r.total);
            }
            Err(Error::NonFinite(msg)) => {
                warn!("skipping step {step}: {msg}");
                skipped += 1;
                rec.push("skipped", 1);
                state.step += 1;
            }
            Err(e) => return Err(e),
        }
        step = state.step;
        let epoch_end = (step as usize) % per_epoch == 0 || step as usize == total;
        if epoch_end {
            let epoch = (step as usize).div_ceil(per_epoch);
            rec.push("epoch", epoch);
            if !val.is_empty() {
                let v = mean_psnr(&state, &val)?;
                rec.push("val_psnr", v);
                info!("epoch {epoch} step {step}: val psnr {v:.3} dB");
            }
        }
        writeln!(log, "{}", rec.to_line()).map_err(|e| Error::io("writing metrics log", e))?;
        if epoch_end {
            log.flush().map_err(|e| Error::io("flushing metrics log", e))?;
            save_checkpoint(&ckpt_path, &state, cfg.seed, &opts.config_hash, &opts.experiment)?;
        }
    }
    log.flush().map_err(|e| Error::io("flushing metrics log", e))?;
    save_checkpoint(&ckpt_path, &state, cfg.seed, &opts.config_hash, &opts.experiment)?;
    Ok(TrainOutcome { state, checkpoint: ckpt_path, metrics_log: log_path, skipped_steps: skipped })
}

/// Drops log records at or after `step` so a resumed run appends cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io("reading metrics log", e))?;
    let kept: String = text
        .lines()
        .filter(|l| Record::from_line(l).parse_value::<u64>("step").is_some_and(|s| s < step))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io("rewriting metrics log", e))
}

/// Parsed metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(Record::from_line).collect())
}
