//! Synthetic RAW burst generation from sRGB images.
//!
//! Pipeline per burst: unprocess (inverse gamma, inverse color correction,
//! inverse white-balance gains) → per-frame affine motion → bicubic
//! decimation → RGGB mosaic → heteroscedastic Gaussian noise. Every random
//! draw comes from a ChaCha stream seeded by the burst seed and is recorded
//! in the [`BurstSet`] metadata.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixels_to_normalized, FlowField};
use crate::tensor::Tensor;

/// Camera color matrices (XYZ → camera) mixed to draw a random color correction.
const XYZ2CAMS: [[[f64; 3]; 3]; 4] = [
    [[1.0234, -0.2969, -0.2266], [-0.5625, 1.6328, -0.0469], [-0.0703, 0.2188, 0.6406]],
    [[0.4913, -0.0541, -0.0202], [-0.613, 1.3513, 0.2906], [-0.1564, 0.2151, 0.7183]],
    [[0.838, -0.263, -0.0639], [-0.2887, 1.0725, 0.2496], [-0.0627, 0.1427, 0.5438]],
    [[0.6596, -0.2079, -0.0562], [-0.4782, 1.3016, 0.1933], [-0.097, 0.1581, 0.5181]],
];

const RGB2XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Upper bound of RAW values after clipping.
pub const SATURATION: f32 = 1.0;

/// 3-channel display-referred image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SrgbImage {
    pub data: Tensor<f32>,
}

/// Camera-linear RGB image plus the ISP parameters that were inverted.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRawImage {
    pub data: Tensor<f32>,
    pub isp: IspParams,
}

/// Packed Bayer frame `[4, H, W]`, channels (R, G on red rows, G on blue rows, B).
#[derive(Clone, Debug, PartialEq)]
pub struct RggbFrame {
    pub data: Tensor<f32>,
}

/// White-balance gains and color-correction matrix of the forward ISP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IspParams {
    pub gains: [f64; 3],
    /// Camera RGB → linear sRGB, rows sum to one.
    pub ccm: Mat3,
}

impl Default for IspParams {
    fn default() -> Self {
        Self { gains: [1.0; 3], ccm: IDENTITY3 }
    }
}

/// Rigid motion of one frame relative to the ground-truth grid.
///
/// Frame pixel `p` samples the scene at `R(rotation)·(p − c) + c + translation`
/// with `c` the image center, all in ground-truth pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub rotation: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Motion {
    pub const IDENTITY: Motion = Motion { rotation: 0.0, dx: 0.0, dy: 0.0 };

    /// Scene position sampled by output position `(x, y)` (continuous
    /// coordinates, pixel `k` spans `[k, k+1)`) on an image with center `(cx, cy)`.
    pub fn apply(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (px, py) = (x - cx, y - cy);
        (c * px - s * py + cx + self.dx, s * px + c * py + cy + self.dy)
    }

    pub fn invert(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (px, py) = (x - cx - self.dx, y - cy - self.dy);
        (c * px + s * py + cx, -s * px + c * py + cy)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Variance per unit signal.
    pub shot: f64,
    /// Signal-independent variance.
    pub read: f64,
}

/// `N` RGGB frames, the sRGB ground truth and everything drawn to make them.
#[derive(Clone, Debug, PartialEq)]
pub struct BurstSet {
    pub frames: Vec<RggbFrame>,
    pub gt: SrgbImage,
    pub scale: usize,
    pub motions: Vec<Motion>,
    pub noise: NoiseParams,
    pub isp: IspParams,
    pub seed: u64,
}

/// Knobs of [`synthesize_burst`]. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub rot_max_deg: f64,
    pub trans_max_px: f64,
    pub shot_range: [f64; 2],
    pub read_range: [f64; 2],
    /// Fixed noise overriding the log-uniform draws.
    pub noise: Option<NoiseParams>,
    pub gain_range: [f64; 2],
    pub random_ccm: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            rot_max_deg: 1.0,
            trans_max_px: 24.0,
            shot_range: [1e-4, 1e-2],
            read_range: [1e-6, 1e-4],
            noise: None,
            gain_range: [1.2, 2.4],
            random_ccm: true,
        }
    }
}

impl SynthesisConfig {
    /// No noise, no motion, identity ISP.
    pub fn clean() -> Self {
        Self {
            rot_max_deg: 0.0,
            trans_max_px: 0.0,
            noise: Some(NoiseParams::default()),
            gain_range: [1.0, 1.0],
            random_ccm: false,
            ..Self::default()
        }
    }
}

impl SrgbImage {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        validate_image(&data, 3)?;
        if data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Parameter("sRGB values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dims3();
        (h, w)
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<SrgbImage> {
        let (ih, iw) = self.dims();
        if y + h > ih || x + w > iw || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("crop {h}x{w}+{y}+{x} outside {ih}x{iw}")));
        }
        Ok(SrgbImage { data: crop3(&self.data, y, x, h, w) })
    }
}

impl RggbFrame {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        validate_image(&data, 4)?;
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dims3();
        (h, w)
    }
}

impl BurstSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn lr_dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Ground-truth alignment flow of frame `i` on the RGGB grid: the flow that
    /// warps frame `i` onto the reference with [`crate::geometry::bilinear_warp`].
    pub fn true_flow(&self, i: usize) -> FlowField<f32> {
        let (h, w) = self.lr_dims();
        let (gh, gw) = self.gt.dims();
        let f = (2 * self.scale) as f64;
        let (cx, cy) = (gw as f64 / 2.0, gh as f64 / 2.0);
        let m = self.motions[i];
        let mut t = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (ux, uy) = (x as f64 + 0.5, y as f64 + 0.5);
                let (qx, qy) = m.invert(f * ux, f * uy, cx, cy);
                let (dx, dy) = (qx / f - ux, qy / f - uy);
                t.set3(0, y, x, pixels_to_normalized(dy, h) as f32);
                t.set3(1, y, x, pixels_to_normalized(dx, w) as f32);
            }
        }
        FlowField(t)
    }

    /// Crops an aligned LR window `[y, y+h) × [x, x+w)` and the matching ground truth.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<BurstSet> {
        let (fh, fw) = self.lr_dims();
        if y + h > fh || x + w > fw || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("crop {h}x{w}+{y}+{x} outside {fh}x{fw}")));
        }
        let f = 2 * self.scale;
        let frames = self.frames.iter().map(|fr| RggbFrame { data: crop3(&fr.data, y, x, h, w) }).collect();
        let gt = SrgbImage { data: crop3(&self.gt.data, f * y, f * x, f * h, f * w) };
        Ok(BurstSet { frames, gt, ..self.clone() })
    }
}

fn crop3(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let (c, _, _) = t.dims3();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set3(ch, y, x, t.at3(ch, y0 + y, x0 + x));
            }
        }
    }
    out
}

fn validate_image(t: &Tensor<f32>, channels: usize) -> Result<()> {
    if t.shape().len() != 3 || t.shape()[0] != channels {
        return Err(Error::Dimension(format!("expected [{channels}, H, W], got {:?}", t.shape())));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("image contains NaN or infinity".into()));
    }
    Ok(())
}

fn require_even(t: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = t.dims3();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("dimensions must be even, got {h}x{w}")));
    }
    Ok(())
}

/// sRGB EOTF: display value → linear.
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse EOTF: linear → display value.
pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_inverse(m: &Mat3) -> Result<Mat3> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return Err(Error::Parameter("singular color matrix".into()));
    }
    let inv = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) * inv;
        }
    }
    Ok(out)
}

fn apply_mat3(t: &mut Tensor<f32>, m: &Mat3) {
    let (_, h, w) = t.dims3();
    let p = h * w;
    let d = t.data_mut();
    for i in 0..p {
        let v = [d[i] as f64, d[p + i] as f64, d[2 * p + i] as f64];
        for (c, row) in m.iter().enumerate() {
            d[c * p + i] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]) as f32;
        }
    }
}

/// Random camera-RGB → sRGB matrix: convex mix of camera matrices, rows normalized.
pub fn random_ccm<R: Rng>(rng: &mut R) -> Mat3 {
    let weights: Vec<f64> = (0..XYZ2CAMS.len()).map(|_| rng.gen::<f64>() + 1e-8).collect();
    let total: f64 = weights.iter().sum();
    let mut xyz2cam = [[0.0; 3]; 3];
    for (m, wt) in XYZ2CAMS.iter().zip(&weights) {
        for i in 0..3 {
            for j in 0..3 {
                xyz2cam[i][j] += m[i][j] * wt / total;
            }
        }
    }
    let mut rgb2cam = mat3_mul(&xyz2cam, &RGB2XYZ);
    for row in rgb2cam.iter_mut() {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    mat3_inverse(&rgb2cam).expect("camera matrices are well conditioned")
}

pub fn random_isp<R: Rng>(config: &SynthesisConfig, rng: &mut R) -> IspParams {
    let ccm = if config.random_ccm { random_ccm(rng) } else { IDENTITY3 };
    let [lo, hi] = config.gain_range;
    let mut draw = || if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let r = draw();
    let b = draw();
    IspParams { gains: [r, 1.0, b], ccm }
}

/// Inverts the ISP with explicit parameters; output is clipped to `[0, 1]`.
pub fn unprocess_with(img: &SrgbImage, isp: &IspParams) -> Result<LinearRawImage> {
    let mut data = unprocess_unclipped(img, isp)?;
    data.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(LinearRawImage { data, isp: *isp })
}

/// [`unprocess_with`] before the final clip.
pub fn unprocess_unclipped(img: &SrgbImage, isp: &IspParams) -> Result<Tensor<f32>> {
    validate_image(&img.data, 3)?;
    require_even(&img.data)?;
    let mut data = img.data.map(|v| srgb_to_linear(v as f64) as f32);
    apply_mat3(&mut data, &mat3_inverse(&isp.ccm)?);
    for c in 0..3 {
        let g = isp.gains[c];
        data.channel_mut(c).iter_mut().for_each(|v| *v = (*v as f64 / g) as f32);
    }
    Ok(data)
}

/// Draws ISP parameters and inverts them.
pub fn unprocess<R: Rng>(img: &SrgbImage, config: &SynthesisConfig, rng: &mut R) -> Result<LinearRawImage> {
    let isp = random_isp(config, rng);
    unprocess_with(img, &isp)
}

/// Forward ISP on camera-linear RGB: gains, color correction, clip, gamma.
pub fn process(linear: &Tensor<f32>, isp: &IspParams) -> Tensor<f32> {
    process_unclipped(linear, isp).map(|v| linear_to_srgb(v.clamp(0.0, 1.0) as f64) as f32)
}

fn process_unclipped(linear: &Tensor<f32>, isp: &IspParams) -> Tensor<f32> {
    let mut data = linear.clone();
    for c in 0..3 {
        let g = isp.gains[c];
        data.channel_mut(c).iter_mut().for_each(|v| *v = (*v as f64 * g) as f32);
    }
    apply_mat3(&mut data, &isp.ccm);
    data
}

/// Forward ISP without clipping; inverse of [`unprocess_unclipped`].
pub fn process_exact(linear: &Tensor<f32>, isp: &IspParams) -> Tensor<f32> {
    process_unclipped(linear, isp).map(|v| linear_to_srgb(v as f64) as f32)
}

/// Resamples with the inverse motion map, bilinear, edge replication.
pub fn apply_affine(img: &LinearRawImage, motion: Motion) -> Result<LinearRawImage> {
    if !(motion.rotation.is_finite() && motion.dx.is_finite() && motion.dy.is_finite()) {
        return Err(Error::Parameter("non-finite motion".into()));
    }
    Ok(LinearRawImage { data: warp_affine(&img.data, motion), isp: img.isp })
}

pub(crate) fn warp_affine(t: &Tensor<f32>, motion: Motion) -> Tensor<f32> {
    if motion == Motion::IDENTITY {
        return t.clone();
    }
    let (c, h, w) = t.dims3();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = motion.apply(x as f64 + 0.5, y as f64 + 0.5, cx, cy);
            let (u, v) = ((sx - 0.5).clamp(0.0, (w - 1) as f64), (sy - 0.5).clamp(0.0, (h - 1) as f64));
            let (x0, y0) = ((u.floor() as usize).min(w.saturating_sub(2)), (v.floor() as usize).min(h.saturating_sub(2)));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (u - x0 as f64, v - y0 as f64);
            for ch in 0..c {
                let s = t.channel(ch);
                let val = (1.0 - ty) * ((1.0 - tx) * s[y0 * w + x0] as f64 + tx * s[y0 * w + x1] as f64)
                    + ty * ((1.0 - tx) * s[y1 * w + x0] as f64 + tx * s[y1 * w + x1] as f64);
                out.set3(ch, y, x, val as f32);
            }
        }
    }
    out
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized taps `(index, weight)` per output sample. Downscaling stretches
/// the kernel by the scale factor (antialiasing); borders replicate edges.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wgt = cubic_kernel((j as f64 - center) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resize of `[C, H, W]` to `[C, oh, ow]`.
pub fn resize_bicubic(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (c, h, w) = t.dims3();
    let ty = cubic_taps(h, oh);
    let tx = cubic_taps(w, ow);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut tmp = vec![0.0f64; h * ow];
    for ch in 0..c {
        let s = t.channel(ch);
        for y in 0..h {
            for (ox, taps) in tx.iter().enumerate() {
                tmp[y * ow + ox] = taps.iter().map(|&(i, wt)| s[y * w + i] as f64 * wt).sum();
            }
        }
        let d = out.channel_mut(ch);
        for (oy, taps) in ty.iter().enumerate() {
            for ox in 0..ow {
                d[oy * ow + ox] = taps.iter().map(|&(i, wt)| tmp[i * ow + ox] * wt).sum::<f64>() as f32;
            }
        }
    }
    out
}

/// Bicubic decimation by an integer factor.
pub fn downsample(img: &LinearRawImage, scale: usize) -> Result<LinearRawImage> {
    let (_, h, w) = img.data.dims3();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Dimension(format!("{h}x{w} is not divisible by {scale}")));
    }
    if scale == 1 {
        return Ok(img.clone());
    }
    Ok(LinearRawImage { data: resize_bicubic(&img.data, h / scale, w / scale), isp: img.isp })
}

/// RGGB packing of a `[3, 2H, 2W]` image into `[4, H, W]`.
pub fn mosaic(img: &LinearRawImage) -> Result<RggbFrame> {
    Ok(RggbFrame { data: mosaic_tensor(&img.data)? })
}

pub fn mosaic_tensor(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    validate_image(t, 3)?;
    require_even(t)?;
    let (_, h2, w2) = t.dims3();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[4, h, w]);
    for i in 0..h {
        for j in 0..w {
            out.set3(0, i, j, t.at3(0, 2 * i, 2 * j));
            out.set3(1, i, j, t.at3(1, 2 * i, 2 * j + 1));
            out.set3(2, i, j, t.at3(1, 2 * i + 1, 2 * j));
            out.set3(3, i, j, t.at3(2, 2 * i + 1, 2 * j + 1));
        }
    }
    Ok(out)
}

/// Bilinear demosaic: each Bayer sub-lattice is interpolated to full resolution
/// at its own offset; the two green lattices are averaged.
pub fn demosaic_bilinear(frame: &RggbFrame) -> Tensor<f32> {
    let (h, w) = frame.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let sample = |c: usize, oy: usize, ox: usize, y: usize, x: usize| -> f64 {
        let ly = ((y as f64 - oy as f64) / 2.0).clamp(0.0, (h - 1) as f64);
        let lx = ((x as f64 - ox as f64) / 2.0).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (ly.floor() as usize, lx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (ly - y0 as f64, lx - x0 as f64);
        let d = &frame.data;
        (1.0 - ty) * ((1.0 - tx) * d.at3(c, y0, x0) as f64 + tx * d.at3(c, y0, x1) as f64)
            + ty * ((1.0 - tx) * d.at3(c, y1, x0) as f64 + tx * d.at3(c, y1, x1) as f64)
    };
    let mut out = Tensor::zeros(&[3, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            out.set3(0, y, x, sample(0, 0, 0, y, x) as f32);
            out.set3(1, y, x, (0.5 * (sample(1, 0, 1, y, x) + sample(2, 1, 0, y, x))) as f32);
            out.set3(2, y, x, sample(3, 1, 1, y, x) as f32);
        }
    }
    out
}

/// Adds `Normal(0, shot·x + read)` noise and clips to `[0, SATURATION]`.
pub fn add_noise<R: Rng>(frame: &RggbFrame, noise: NoiseParams, rng: &mut R) -> Result<RggbFrame> {
    if !(noise.shot >= 0.0 && noise.read >= 0.0) {
        return Err(Error::Parameter(format!("noise variances must be >= 0, got {noise:?}")));
    }
    if noise.shot == 0.0 && noise.read == 0.0 {
        return Ok(frame.clone());
    }
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let data = frame.data.map(|x| x);
    let data = Tensor::from_fn(data.shape(), |i| {
        let x = data.data()[i] as f64;
        let var = (noise.shot * x.max(0.0) + noise.read).max(0.0);
        let n: f64 = std_normal.sample(rng);
        (x + var.sqrt() * n).clamp(0.0, SATURATION as f64) as f32
    });
    Ok(RggbFrame { data })
}

fn log_uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

pub fn draw_motion<R: Rng>(config: &SynthesisConfig, rng: &mut R) -> Motion {
    let rot = config.rot_max_deg.to_radians();
    let t = config.trans_max_px;
    let mut sym = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    Motion { rotation: sym(rot), dx: sym(t), dy: sym(t) }
}

/// Full synthesis of one burst. A pure function of `(gt, n_frames, scale, seed, config)`.
pub fn synthesize_burst(
    gt: &SrgbImage,
    n_frames: usize,
    scale: usize,
    seed: u64,
    config: &SynthesisConfig,
) -> Result<BurstSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motions: Vec<Motion> = (0..n_frames)
        .map(|i| if i == 0 { Motion::IDENTITY } else { draw_motion(config, &mut rng) })
        .collect();
    synthesize_with_motions(gt, scale, seed, config, &motions, &mut rng)
}

/// [`synthesize_burst`] with caller-chosen motions (`motions[0]` must be identity).
pub fn synthesize_with_motions(
    gt: &SrgbImage,
    scale: usize,
    seed: u64,
    config: &SynthesisConfig,
    motions: &[Motion],
    rng: &mut ChaCha8Rng,
) -> Result<BurstSet> {
    if motions.is_empty() {
        return Err(Error::Parameter("a burst needs at least one frame".into()));
    }
    if motions[0] != Motion::IDENTITY {
        return Err(Error::Parameter("the reference frame must have identity motion".into()));
    }
    if scale == 0 {
        return Err(Error::Parameter("scale must be >= 1".into()));
    }
    validate_image(&gt.data, 3)?;
    let (h, w) = gt.dims();
    if h % (2 * scale) != 0 || w % (2 * scale) != 0 {
        return Err(Error::Dimension(format!("ground truth {h}x{w} is not divisible by {}", 2 * scale)));
    }
    let linear = unprocess(gt, config, rng)?;
    let noise = config.noise.unwrap_or_else(|| NoiseParams {
        shot: log_uniform(rng, config.shot_range),
        read: log_uniform(rng, config.read_range),
    });
    let mut frames = Vec::with_capacity(motions.len());
    for &m in motions {
        let moved = apply_affine(&linear, m)?;
        let small = downsample(&moved, scale)?;
        let raw = mosaic(&small)?;
        frames.push(add_noise(&raw, noise, rng)?);
    }
    Ok(BurstSet { frames, gt: gt.clone(), scale, motions: motions.to_vec(), noise, isp: linear.isp, seed })
}
