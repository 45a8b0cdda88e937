//! Spatial algebra: normalized coordinate grids, coordinate upsampling,
//! bilinear warping and nearest-neighbour feature lookup.
//!
//! Coordinates are normalized to `[-1, 1]` with pixel centers at
//! `-1 + (2i + 1) / n`. Every coordinate or flow field is stored channel-first
//! as `[2, H, W]` with channel 0 = y and channel 1 = x.
//!
//! The tensor kernels here (forward and adjoint) are shared by the plain
//! functions and the differentiable ops in [`crate::graph`].

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// How bilinear resampling treats positions outside the sample support.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Clamp the sample position to the outermost pixel centers.
    Clamp,
    /// Continue the outermost linear segment. Reproduces affine fields exactly.
    Extrapolate,
}

/// Normalized pixel-center grid, `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid<T>(pub Tensor<T>);

/// Per-pixel displacement in normalized units, `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T>(pub Tensor<T>);

/// `δ = x̂ - x` on the high-resolution grid, `[2, sH, sW]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGrid<T>(pub Tensor<T>);

impl<T: Float> CoordinateGrid<T> {
    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dims3();
        (h, w)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

impl<T: Float> FlowField<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(&[2, h, w]))
    }

    /// Uniform flow given in pixels of an `h×w` grid.
    pub fn uniform_pixels(h: usize, w: usize, dy: f64, dx: f64) -> Self {
        let (ny, nx) = (pixels_to_normalized(dy, h), pixels_to_normalized(dx, w));
        let mut t = Tensor::zeros(&[2, h, w]);
        t.channel_mut(0).fill(T::lit(ny));
        t.channel_mut(1).fill(T::lit(nx));
        FlowField(t)
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 2 {
            return Err(Error::Dimension(format!("flow must be [2, H, W], got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(FlowField(t))
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dims3();
        (h, w)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    /// Flow converted to pixel units, `[2, H, W]`.
    pub fn to_pixels(&self) -> Tensor<T> {
        let (_, h, w) = self.0.dims3();
        let mut t = self.0.clone();
        let (sy, sx) = (T::lit(h as f64 / 2.0), T::lit(w as f64 / 2.0));
        t.channel_mut(0).iter_mut().for_each(|v| *v *= sy);
        t.channel_mut(1).iter_mut().for_each(|v| *v *= sx);
        t
    }
}

impl<T: Float> LocalGrid<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

pub fn pixels_to_normalized(px: f64, n: usize) -> f64 {
    px * 2.0 / n as f64
}

pub fn normalized_to_pixels(v: f64, n: usize) -> f64 {
    v * n as f64 / 2.0
}

/// Normalized coordinate of pixel center `i` on an axis of `n` samples.
#[inline]
pub fn center_coord(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Continuous pixel index of a normalized coordinate (inverse of [`center_coord`]).
#[inline]
pub fn coord_to_index<T: Float>(v: T, n: usize) -> T {
    let nf = T::from_usize(n).unwrap();
    ((v + T::one()) * nf - T::one()) / T::lit(2.0)
}

pub fn make_grid<T: Float>(h: usize, w: usize) -> CoordinateGrid<T> {
    let mut t = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        let cy = T::lit(center_coord(y, h));
        t.channel_mut(0)[y * w..(y + 1) * w].fill(cy);
    }
    let xs: Vec<T> = (0..w).map(|x| T::lit(center_coord(x, w))).collect();
    for y in 0..h {
        t.channel_mut(1)[y * w..(y + 1) * w].copy_from_slice(&xs);
    }
    CoordinateGrid(t)
}

/// Output length for a possibly fractional scale factor.
pub fn scaled_len(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Per-output-sample `(i0, i1, w0, w1)` for resampling an axis of `n_in` samples
/// at the pixel centers of an axis of `n_out` samples.
pub(crate) fn axis_weights<T: Float>(n_in: usize, n_out: usize, border: Border) -> Vec<(usize, usize, T, T)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * ratio - 0.5;
            if n_in == 1 {
                return (0, 0, T::one(), T::zero());
            }
            match border {
                Border::Clamp => {
                    let s = src.clamp(0.0, (n_in - 1) as f64);
                    let i0 = (s.floor() as usize).min(n_in - 2);
                    let t = s - i0 as f64;
                    (i0, i0 + 1, T::lit(1.0 - t), T::lit(t))
                }
                Border::Extrapolate => {
                    let i0 = (src.floor().max(0.0) as usize).min(n_in - 2);
                    let t = src - i0 as f64;
                    (i0, i0 + 1, T::lit(1.0 - t), T::lit(t))
                }
            }
        })
        .collect()
}

/// Separable bilinear resize of `[C, H, W]` to `[C, oh, ow]`.
pub fn resize_bilinear<T: Float>(x: &Tensor<T>, oh: usize, ow: usize, border: Border) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let wy = axis_weights::<T>(h, oh, border);
    let wx = axis_weights::<T>(w, ow, border);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut row = vec![T::zero(); ow];
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        let mut rows_x = vec![T::zero(); h * ow];
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            for (ox, &(x0, x1, a, b)) in wx.iter().enumerate() {
                rows_x[y * ow + ox] = a * s[x0] + b * s[x1];
            }
        }
        for (oy, &(y0, y1, a, b)) in wy.iter().enumerate() {
            let r0 = &rows_x[y0 * ow..(y0 + 1) * ow];
            let r1 = &rows_x[y1 * ow..(y1 + 1) * ow];
            for ((o, &p), &q) in row.iter_mut().zip(r0).zip(r1) {
                *o = a * p + b * q;
            }
            dst[oy * ow..(oy + 1) * ow].copy_from_slice(&row);
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps a `[C, oh, ow]` gradient back to `[C, h, w]`.
pub fn resize_bilinear_adjoint<T: Float>(g: &Tensor<T>, h: usize, w: usize, border: Border) -> Tensor<T> {
    let (c, oh, ow) = g.dims3();
    let wy = axis_weights::<T>(h, oh, border);
    let wx = axis_weights::<T>(w, ow, border);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = g.channel(ch);
        let mut rows_x = vec![T::zero(); h * ow];
        for (oy, &(y0, y1, a, b)) in wy.iter().enumerate() {
            let s = &src[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                rows_x[y0 * ow + ox] += a * s[ox];
                rows_x[y1 * ow + ox] += b * s[ox];
            }
        }
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for (ox, &(x0, x1, a, b)) in wx.iter().enumerate() {
                let v = rows_x[y * ow + ox];
                dst[y * w + x0] += a * v;
                dst[y * w + x1] += b * v;
            }
        }
    }
    out
}

/// Bilinear upsampling of a coordinate field, `x̂ = B_s(x + δ)`.
///
/// The field is resampled at the pixel centers of the output grid. Outside
/// the source sample support the outermost linear segment is continued, so
/// `upsample_coords(make_grid(H, W), s) == make_grid(sH, sW)` and a uniform
/// flow stays uniform after upsampling.
pub fn upsample_coords<T: Float>(coords: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Parameter(format!("scale must be positive, got {scale}")));
    }
    let (c, h, w) = coords.dims3();
    if c != 2 {
        return Err(Error::Dimension(format!("coordinate field must have 2 channels, got {c}")));
    }
    Ok(upsample_coords_to(coords, scaled_len(h, scale), scaled_len(w, scale)))
}

/// [`upsample_coords`] with explicit output dimensions.
pub(crate) fn upsample_coords_to<T: Float>(coords: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (_, h, w) = coords.dims3();
    // Resample the residual against the canonical grid and add back the
    // analytic target grid; exact for grids even when an axis has one sample.
    let mut residual = coords.clone();
    for (r, g) in residual.data_mut().iter_mut().zip(make_grid::<T>(h, w).0.data()) {
        *r -= *g;
    }
    let mut out = resize_bilinear(&residual, oh, ow, Border::Extrapolate);
    out.add_assign(&make_grid::<T>(oh, ow).0);
    out
}

/// Adjoint of [`upsample_coords_to`] with respect to the input field.
pub(crate) fn upsample_coords_adjoint<T: Float>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    resize_bilinear_adjoint(g, h, w, Border::Extrapolate)
}

pub fn local_grid<T: Float>(x_hat: &Tensor<T>) -> LocalGrid<T> {
    let (_, h, w) = x_hat.dims3();
    let grid = make_grid::<T>(h, w);
    LocalGrid(x_hat.zip_map(&grid.0, |a, b| a - b))
}

/// Sample position (continuous pixel index, clamped) and whether it was clamped.
#[inline]
fn warp_position<T: Float>(pixel: usize, flow: T, n: usize) -> (usize, usize, T, bool) {
    let half = T::lit(n as f64 / 2.0);
    let u = T::from_usize(pixel).unwrap() + flow * half;
    let hi = T::from_usize(n - 1).unwrap();
    if n == 1 {
        return (0, 0, T::zero(), true);
    }
    let clamped = u < T::zero() || u > hi;
    let u = u.max(T::zero()).min(hi);
    let i0 = u.floor().to_usize().unwrap().min(n - 2);
    (i0, i0 + 1, u - T::from_usize(i0).unwrap(), clamped)
}

/// Interpolates from the nearer end, so `t = 0`, `t = 1` and `a == b` are exact.
fn lerp<T: Float>(a: T, b: T, t: T) -> T {
    if t <= T::lit(0.5) {
        a + t * (b - a)
    } else {
        b + (T::one() - t) * (a - b)
    }
}

/// `out(p) = img(x(p) + flow(p))`, bilinear with edge replication.
pub fn bilinear_warp<T: Float>(img: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    let (_, h, w) = img.dims3();
    if flow.resolution() != (h, w) {
        return Err(Error::Dimension(format!(
            "flow resolution {:?} does not match image {h}x{w}",
            flow.resolution()
        )));
    }
    Ok(warp_forward(img, &flow.0))
}

pub(crate) fn warp_forward<T: Float>(img: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = img.dims3();
    let mut out = Tensor::zeros(&[c, h, w]);
    let (fy, fx) = (flow.channel(0), flow.channel(1));
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (y0, y1, ty, _) = warp_position(y, fy[p], h);
            let (x0, x1, tx, _) = warp_position(x, fx[p], w);
            let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
            for ch in 0..c {
                let s = &img.data()[ch * plane..(ch + 1) * plane];
                let top = lerp(s[i00], s[i01], tx);
                let bottom = lerp(s[i10], s[i11], tx);
                out.data_mut()[ch * plane + p] = lerp(top, bottom, ty);
            }
        }
    }
    out
}

/// Adjoint of [`warp_forward`]: gradients with respect to the image and the flow.
pub(crate) fn warp_backward<T: Float>(
    img: &Tensor<T>,
    flow: &Tensor<T>,
    g: &Tensor<T>,
    want_img: bool,
    want_flow: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (c, h, w) = img.dims3();
    let plane = h * w;
    let mut gimg = want_img.then(|| Tensor::zeros(&[c, h, w]));
    let mut gflow = want_flow.then(|| Tensor::zeros(&[2, h, w]));
    let (fy, fx) = (flow.channel(0), flow.channel(1));
    let (hy, hx) = (T::lit(h as f64 / 2.0), T::lit(w as f64 / 2.0));
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (y0, y1, ty, cy) = warp_position(y, fy[p], h);
            let (x0, x1, tx, cx) = warp_position(x, fx[p], w);
            let (w00, w01) = ((T::one() - ty) * (T::one() - tx), (T::one() - ty) * tx);
            let (w10, w11) = (ty * (T::one() - tx), ty * tx);
            let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
            let mut dty = T::zero();
            let mut dtx = T::zero();
            for ch in 0..c {
                let go = g.data()[ch * plane + p];
                if go == T::zero() {
                    continue;
                }
                let s = &img.data()[ch * plane..(ch + 1) * plane];
                if let Some(gi) = gimg.as_mut() {
                    let d = &mut gi.data_mut()[ch * plane..(ch + 1) * plane];
                    d[i00] += w00 * go;
                    d[i01] += w01 * go;
                    d[i10] += w10 * go;
                    d[i11] += w11 * go;
                }
                if want_flow {
                    dty += go * ((T::one() - tx) * (s[i10] - s[i00]) + tx * (s[i11] - s[i01]));
                    dtx += go * ((T::one() - ty) * (s[i01] - s[i00]) + ty * (s[i11] - s[i10]));
                }
            }
            if let Some(gf) = gflow.as_mut() {
                if !cy {
                    gf.data_mut()[p] += dty * hy;
                }
                if !cx {
                    gf.data_mut()[plane + p] += dtx * hx;
                }
            }
        }
    }
    (gimg, gflow)
}

/// Flat LR-plane index of the nearest pixel center for every coordinate in
/// `coords` (`[2, oh, ow]`). Exact ties resolve to the smaller index.
pub(crate) fn nearest_indices<T: Float>(coords: &Tensor<T>, h: usize, w: usize) -> Vec<usize> {
    let (_, oh, ow) = coords.dims3();
    let half = T::lit(0.5);
    let pick = |v: T, n: usize| -> usize {
        let u = coord_to_index(v, n) - half;
        let i = u.ceil();
        if !(i > T::zero()) {
            0
        } else {
            i.to_usize().unwrap_or(n - 1).min(n - 1)
        }
    };
    let (cy, cx) = (coords.channel(0), coords.channel(1));
    (0..oh * ow).map(|p| pick(cy[p], h) * w + pick(cx[p], w)).collect()
}

/// Nearest-neighbour lookup of `[C, H, W]` features at `[2, oh, ow]` coordinates.
pub fn nearest_sample<T: Float>(features: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    if !coords.is_finite() {
        return Err(Error::NonFinite("sampling coordinates".into()));
    }
    let (_, h, w) = features.dims3();
    let idx = nearest_indices(coords, h, w);
    let (_, oh, ow) = coords.dims3();
    Ok(gather(features, &idx, oh, ow))
}

pub(crate) fn gather<T: Float>(features: &Tensor<T>, idx: &[usize], oh: usize, ow: usize) -> Tensor<T> {
    let (c, _, _) = features.dims3();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = features.channel(ch);
        for (o, &i) in out.channel_mut(ch).iter_mut().zip(idx) {
            *o = src[i];
        }
    }
    out
}

pub(crate) fn scatter_add<T: Float>(g: &Tensor<T>, idx: &[usize], h: usize, w: usize) -> Tensor<T> {
    let (c, _, _) = g.dims3();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = g.channel(ch);
        let dst = out.channel_mut(ch);
        for (&v, &i) in src.iter().zip(idx) {
            dst[i] += v;
        }
    }
    out
}
