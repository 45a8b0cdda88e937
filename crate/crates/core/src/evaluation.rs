//! Metrics, the bicubic baseline, and the two diagnostic analyses: the
//! frequency-plane histogram of the estimated Fourier features and the
//! before/after alignment residual maps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_warp, FlowField};
use crate::io::{write_png, NamedBurst, Record};
use crate::neural_warp::FourierFeatures;
use crate::nn::ParamSet;
use crate::raw_pipeline::{demosaic_bilinear, process, resize_bicubic, BurstSet, IspParams, RggbFrame};
use crate::reconstruction::{burstm_forward, ModelConfig};
use crate::tensor::Tensor;

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// `10 log10(peak² / MSE)`; `f64::INFINITY` for identical images.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let m = mse(a, b);
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

/// [`psnr`] ignoring a `border`-pixel frame.
pub fn psnr_cropped(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64, border: usize) -> Result<f64> {
    same_shape(a, b)?;
    if border == 0 {
        return psnr(a, b, peak);
    }
    let (c, h, w) = a.dims3();
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::Parameter(format!("border {border} leaves nothing of {h}x{w}")));
    }
    let crop = |t: &Tensor<f32>| {
        Tensor::from_fn(&[c, h - 2 * border, w - 2 * border], |i| {
            let (ch, rem) = (i / ((h - 2 * border) * (w - 2 * border)), i % ((h - 2 * border) * (w - 2 * border)));
            t.at3(ch, border + rem / (w - 2 * border), border + rem % (w - 2 * border))
        })
    };
    psnr(&crop(a), &crop(b), peak)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gray(t: &Tensor<f32>) -> Vec<f64> {
    let (c, h, w) = t.dims3();
    (0..h * w).map(|i| (0..c).map(|ch| t.data()[ch * h * w + i] as f64).sum::<f64>() / c as f64).collect()
}

/// Mean SSIM over all full Gaussian windows (11×11, σ = 1.5) of the channel
/// means, with `K1 = 0.01`, `K2 = 0.03` and data range 1.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let (_, h, w) = a.dims3();
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(Error::Parameter(format!("image {h}x{w} smaller than the {n}x{n} window")));
    }
    let half = (n / 2) as f64;
    let g1: Vec<f64> = (0..n).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    let (x, y) = (gray(a), gray(b));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let (oh, ow) = (h - n + 1, w - n + 1);
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, wy) in g1.iter().enumerate() {
                for (dx, wx) in g1.iter().enumerate() {
                    let wgt = wy * wx;
                    let i = (oy + dy) * w + ox + dx;
                    mx += wgt * x[i];
                    my += wgt * y[i];
                    xx += wgt * x[i] * x[i];
                    yy += wgt * y[i] * y[i];
                    xy += wgt * x[i] * y[i];
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Bilinear demosaic of `frame`, bicubic resize to `oh×ow` and the forward ISP.
pub fn bicubic_upsample(frame: &RggbFrame, isp: &IspParams, oh: usize, ow: usize) -> Tensor<f32> {
    let rgb = demosaic_bilinear(frame);
    process(&resize_bicubic(&rgb, oh, ow), isp)
}

/// Single-frame bicubic reference at the burst's scale, `[3, 2sH, 2sW]`.
pub fn bicubic_baseline(burst: &BurstSet) -> Tensor<f32> {
    let (h, w) = burst.lr_dims();
    let f = 2 * burst.scale;
    bicubic_upsample(&burst.frames[0], &burst.isp, f * h, f * w)
}

pub const SPECTRUM_BINS: usize = 64;

/// Square histogram over the frequency plane `[-f_max, f_max]²`
/// (rows: `f_y`, columns: `f_x`).
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyHistogram {
    pub f_max: f64,
    pub bins: usize,
    pub mass: Vec<f64>,
}

impl FrequencyHistogram {
    pub fn new(f_max: f64, bins: usize) -> Self {
        Self { f_max, bins, mass: vec![0.0; bins * bins] }
    }

    /// Bin index of a coordinate; out-of-range values land in the edge bins.
    pub fn bin(&self, f: f64) -> usize {
        let t = (f + self.f_max) / (2.0 * self.f_max) * self.bins as f64;
        (t.floor().max(0.0) as usize).min(self.bins - 1)
    }

    pub fn deposit(&mut self, fy: f64, fx: f64, weight: f64) {
        let (r, c) = (self.bin(fy), self.bin(fx));
        self.mass[r * self.bins + c] += weight;
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn occupied(&self) -> usize {
        self.mass.iter().filter(|&&m| m > 0.0).count()
    }

    /// Fewest bins holding at least `fraction` of the mass.
    pub fn support(&self, fraction: f64) -> usize {
        let total = self.total();
        if total <= 0.0 {
            return 0;
        }
        let mut sorted = self.mass.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut acc = 0.0;
        for (i, m) in sorted.iter().enumerate() {
            acc += m;
            if acc >= fraction * total {
                return i + 1;
            }
        }
        sorted.len()
    }

    pub fn add(&mut self, other: &FrequencyHistogram) {
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
    }

    /// `log(1 + mass)` normalized to `[0, 1]`, `[1, bins, bins]`.
    pub fn to_image(&self) -> Tensor<f32> {
        let logs: Vec<f64> = self.mass.iter().map(|m| m.ln_1p()).collect();
        let top = logs.iter().cloned().fold(0.0, f64::max);
        Tensor::from_fn(&[1, self.bins, self.bins], |i| if top > 0.0 { (logs[i] / top) as f32 } else { 0.0 })
    }
}

/// Per-frame and accumulated frequency histograms plus the GT spectrum.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub per_frame: Vec<FrequencyHistogram>,
    pub accumulated: FrequencyHistogram,
    /// Centered `log(1 + |DFT|)` of the grayscale GT, normalized, `[1, H, W]`.
    pub gt_spectrum: Option<Tensor<f32>>,
}

/// Mass fraction used for the support comparison.
pub const SUPPORT_FRACTION: f64 = 0.9;

impl SpectrumReport {
    pub fn accumulated_support(&self) -> usize {
        self.accumulated.support(SUPPORT_FRACTION)
    }

    pub fn max_frame_support(&self) -> usize {
        self.per_frame.iter().map(|h| h.support(SUPPORT_FRACTION)).max().unwrap_or(0)
    }
}

/// 99.5th percentile of `|F|` over every frequency component.
pub fn frequency_range(features: &[FourierFeatures]) -> f64 {
    let mut all: Vec<f64> = features.iter().flat_map(|f| f.frequency.data().iter().map(|v| v.abs() as f64)).collect();
    if all.is_empty() {
        return 1.0;
    }
    all.sort_by(f64::total_cmp);
    let idx = ((all.len() - 1) as f64 * 0.995).round() as usize;
    let f = all[idx];
    if f > 0.0 {
        f
    } else {
        1.0
    }
}

/// Histogram of one frame: each pixel and pair `k` deposits `|A_k| + |A_{K+k}|`
/// at `(F_{2k}, F_{2k+1})`.
pub fn frame_histogram(f: &FourierFeatures, f_max: f64, bins: usize) -> Result<FrequencyHistogram> {
    let (c2, h, w) = f.amplitude.dims3();
    if f.frequency.dims3() != (c2, h, w) || c2 % 2 != 0 {
        return Err(Error::Dimension("amplitude and frequency maps differ".into()));
    }
    let (k, p) = (c2 / 2, h * w);
    let (a, fr) = (f.amplitude.data(), f.frequency.data());
    let mut hist = FrequencyHistogram::new(f_max, bins);
    for kk in 0..k {
        for i in 0..p {
            let weight = (a[kk * p + i].abs() + a[(k + kk) * p + i].abs()) as f64;
            if weight > 0.0 {
                hist.deposit(fr[2 * kk * p + i] as f64, fr[(2 * kk + 1) * p + i] as f64, weight);
            }
        }
    }
    Ok(hist)
}

/// Centered log-magnitude DFT of the channel mean, normalized to `[0, 1]`.
pub fn dft_log_magnitude(img: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = img.dims3();
    let g = gray(img);
    let mut buf: Vec<Complex<f64>> = g.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    let logs: Vec<f64> = buf.iter().map(|c| c.norm().ln_1p()).collect();
    let top = logs.iter().cloned().fold(0.0, f64::max).max(1e-12);
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let (sy, sx) = ((y + h - h / 2) % h, (x + w - w / 2) % w);
        (logs[sy * w + sx] / top) as f32
    })
}

pub fn spectrum_analysis(features: &[FourierFeatures], gt: Option<&Tensor<f32>>) -> Result<SpectrumReport> {
    let f_max = frequency_range(features);
    let per_frame = features.iter().map(|f| frame_histogram(f, f_max, SPECTRUM_BINS)).collect::<Result<Vec<_>>>()?;
    let mut accumulated = FrequencyHistogram::new(f_max, SPECTRUM_BINS);
    for h in &per_frame {
        accumulated.add(h);
    }
    Ok(SpectrumReport { per_frame, accumulated, gt_spectrum: gt.map(dft_log_magnitude) })
}

/// Writes `spectrum_frame_XX.png`, `spectrum_accumulated.png` and `gt_dft.png`.
pub fn render_spectrum(report: &SpectrumReport, dir: &Path) -> Result<Vec<PathBuf>> {
    crate::io::create_dir(dir)?;
    let mut out = Vec::new();
    for (i, h) in report.per_frame.iter().enumerate() {
        let p = dir.join(format!("spectrum_frame_{i:02}.png"));
        write_png(&p, &h.to_image())?;
        out.push(p);
    }
    let p = dir.join("spectrum_accumulated.png");
    write_png(&p, &report.accumulated.to_image())?;
    out.push(p);
    if let Some(gt) = &report.gt_spectrum {
        let p = dir.join("gt_dft.png");
        write_png(&p, gt)?;
        out.push(p);
    }
    Ok(out)
}

/// Residual maps of frames `1..N` against the reference.
#[derive(Clone, Debug)]
pub struct AlignmentReport {
    /// `|I_i − I_1|` averaged over channels, `[1, H, W]`.
    pub before: Vec<Tensor<f32>>,
    /// `|Warp(I_i, δ_i) − I_1|` averaged over channels.
    pub after: Vec<Tensor<f32>>,
    /// Interior means (margin [`RESIDUAL_MARGIN`]).
    pub mean_before: f64,
    pub mean_after: f64,
}

pub const RESIDUAL_MARGIN: usize = 2;

fn residual_map(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = a.dims3();
    Tensor::from_fn(&[1, h, w], |i| (0..c).map(|ch| (a.data()[ch * h * w + i] - b.data()[ch * h * w + i]).abs()).sum::<f32>() / c as f32)
}

fn interior_mean(maps: &[Tensor<f32>], margin: usize) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for m in maps {
        let (_, h, w) = m.dims3();
        for y in margin..h.saturating_sub(margin) {
            for x in margin..w.saturating_sub(margin) {
                s += m.at3(0, y, x) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn alignment_residuals(frames: &[RggbFrame], flows: &[FlowField<f32>]) -> Result<AlignmentReport> {
    if frames.len() != flows.len() || frames.is_empty() {
        return Err(Error::Parameter(format!("{} frames with {} flows", frames.len(), flows.len())));
    }
    let reference = &frames[0].data;
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (f, d) in frames.iter().zip(flows).skip(1) {
        before.push(residual_map(&f.data, reference));
        after.push(residual_map(&bilinear_warp(&f.data, d)?, reference));
    }
    let mean_before = interior_mean(&before, RESIDUAL_MARGIN);
    let mean_after = interior_mean(&after, RESIDUAL_MARGIN);
    Ok(AlignmentReport { before, after, mean_before, mean_after })
}

/// Writes `residual_before_XX.png` / `residual_after_XX.png` on a shared scale.
pub fn render_alignment(report: &AlignmentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    crate::io::create_dir(dir)?;
    let top = report.before.iter().chain(&report.after).map(|m| m.max_abs()).fold(1e-6f32, f32::max);
    let mut out = Vec::new();
    for (i, (b, a)) in report.before.iter().zip(&report.after).enumerate() {
        for (name, m) in [("before", b), ("after", a)] {
            let p = dir.join(format!("residual_{name}_{:02}.png", i + 1));
            write_png(&p, &m.map(|v| v / top))?;
            out.push(p);
        }
    }
    Ok(out)
}

/// One (burst, scale) evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub burst: String,
    pub scale: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn scales(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.entries.iter().map(|e| e.scale).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Means of (psnr, ssim, bicubic psnr, runtime) at `scale`, or over all entries.
    pub fn means(&self, scale: Option<usize>) -> (f64, f64, f64, f64) {
        let sel: Vec<&EvalEntry> = self.entries.iter().filter(|e| scale.is_none_or(|s| e.scale == s)).collect();
        let n = sel.len().max(1) as f64;
        (
            sel.iter().map(|e| e.psnr).sum::<f64>() / n,
            sel.iter().map(|e| e.ssim).sum::<f64>() / n,
            sel.iter().map(|e| e.bicubic_psnr).sum::<f64>() / n,
            sel.iter().map(|e| e.runtime_ms).sum::<f64>() / n,
        )
    }

    /// One record per entry, then one summary record per scale and overall.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let r = Record::new()
                .with("burst", &e.burst)
                .with("scale", e.scale)
                .with("psnr", e.psnr)
                .with("ssim", e.ssim)
                .with("bicubic_psnr", e.bicubic_psnr)
                .with("runtime_ms", e.runtime_ms);
            out.push_str(&r.to_line());
            out.push('\n');
        }
        let summary = |label: String, scale: Option<usize>| {
            let (p, s, b, t) = self.means(scale);
            Record::new()
                .with("summary", label)
                .with("psnr", p)
                .with("ssim", s)
                .with("bicubic_psnr", b)
                .with("runtime_ms", t)
                .to_line()
        };
        for s in self.scales() {
            out.push_str(&summary(format!("x{s}"), Some(s)));
            out.push('\n');
        }
        out.push_str(&summary("all".into(), None));
        out.push('\n');
        out
    }
}

/// Runs the model on every burst at each requested scale (its own synthesis
/// scale when `scales` is `None`). For a scale below the synthesis scale the
/// ground truth is bicubically reduced to the output size; larger scales are
/// skipped with a warning. PSNR ignores `border_crop` pixels at each edge.
pub fn evaluate(
    params: &ParamSet<f32>,
    config: &ModelConfig,
    bursts: &[NamedBurst],
    scales: Option<&[usize]>,
    border_crop: usize,
) -> Result<EvalReport> {
    if bursts.is_empty() {
        return Err(Error::Parameter("no bursts to evaluate".into()));
    }
    let mut report = EvalReport::default();
    for nb in bursts {
        let b = &nb.burst;
        let wanted: Vec<usize> = scales.map(<[usize]>::to_vec).unwrap_or_else(|| vec![b.scale]);
        for s in wanted {
            if s > b.scale {
                warn!("{}: scale {s} exceeds synthesis scale {}; skipped", nb.id, b.scale);
                continue;
            }
            let (h, w) = b.lr_dims();
            let (oh, ow) = (2 * s * h, 2 * s * w);
            let gt = if s == b.scale { b.gt.data.clone() } else { resize_bicubic(&b.gt.data, oh, ow) };
            let t0 = Instant::now();
            let out = burstm_forward(params, config, &b.frames, s as f64)?;
            let runtime_ms = (t0.elapsed().as_secs_f64() * 1e3).max(1e-6);
            let base = bicubic_upsample(&b.frames[0], &b.isp, oh, ow);
            report.entries.push(EvalEntry {
                burst: nb.id.clone(),
                scale: s,
                psnr: psnr_cropped(&out.sr.data, &gt, 1.0, border_crop)?,
                ssim: ssim(&out.sr.data, &gt)?,
                bicubic_psnr: psnr_cropped(&base, &gt, 1.0, border_crop)?,
                runtime_ms,
            });
        }
    }
    Ok(report)
}
