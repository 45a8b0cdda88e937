//! Per-frame latent encoding and the learnable Fourier-space warp.
//!
//! A frame is encoded on its LR grid; amplitude and frequency maps are read
//! off the latent, looked up at the flow-warped high-resolution coordinates,
//! and combined with a phase (from the cell size) and the local grid into
//! amplitude-modulated sinusoids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_grid, FlowField};
use crate::graph::{Graph, Var};
use crate::nn::{add_conv, add_edsr, conv, edsr, Bound, EdsrShape, Init, ParamSet};
use crate::raw_pipeline::RggbFrame;
use crate::tensor::{Float, Tensor};

/// How the local grid enters the mapped features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mapping {
    /// `A ⊙ [cos θ; sin θ]`.
    #[default]
    Fourier,
    /// `A ⊙ [1; θ/π]`, the ablation without sinusoids.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    /// Number of frequency pairs; the latent has `2K` channels.
    pub k: usize,
    pub encoder_blocks: usize,
    pub res_scale: f64,
    /// LeakyReLU(0.2) after the amplitude and frequency convolutions.
    pub estimator_activation: bool,
    pub mapping: Mapping,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self { k: 64, encoder_blocks: 16, res_scale: 1.0, estimator_activation: false, mapping: Mapping::Fourier }
    }
}

impl WarpConfig {
    pub fn channels(&self) -> usize {
        2 * self.k
    }

    pub fn encoder_shape(&self) -> EdsrShape {
        EdsrShape { in_channels: 4, channels: self.channels(), blocks: self.encoder_blocks, res_scale: self.res_scale }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Parameter("k must be >= 1".into()));
        }
        Ok(())
    }
}

pub const ENCODER: &str = "encoder";
pub const AMPLITUDE: &str = "amplitude";
pub const FREQUENCY: &str = "frequency";
pub const PHASE: &str = "phase";

pub fn add_warp<T: Float, R: Rng>(params: &mut ParamSet<T>, config: &WarpConfig, rng: &mut R) -> Result<()> {
    config.validate()?;
    let c = config.channels();
    add_edsr(params, ENCODER, config.encoder_shape(), rng);
    add_conv(params, AMPLITUDE, c, c, 3, Init::FanInUniform, rng);
    add_conv(params, FREQUENCY, c, c, 3, Init::FanInUniform, rng);
    add_conv(params, PHASE, 2, config.k, 1, Init::FanInUniform, rng);
    Ok(())
}

/// Latent `[2K, H, W]` of an RGGB frame `[4, H, W]`.
pub fn encode<T: Float>(g: &Graph<T>, p: &Bound, config: &WarpConfig, frame: Var) -> Var {
    edsr(g, p, ENCODER, config.encoder_shape(), frame)
}

fn estimator<T: Float>(g: &Graph<T>, p: &Bound, config: &WarpConfig, name: &str, z: Var) -> Var {
    let y = conv(g, p, name, z);
    if config.estimator_activation {
        g.leaky_relu(y, T::lit(0.2))
    } else {
        y
    }
}

pub fn estimate_amplitude<T: Float>(g: &Graph<T>, p: &Bound, config: &WarpConfig, z: Var) -> Var {
    estimator(g, p, config, AMPLITUDE, z)
}

/// Frequency map; channels `2k` and `2k+1` are the `(f_y, f_x)` of pair `k`.
pub fn estimate_frequency<T: Float>(g: &Graph<T>, p: &Bound, config: &WarpConfig, z: Var) -> Var {
    estimator(g, p, config, FREQUENCY, z)
}

/// Phase `[K, oh, ow]` from a cell map.
pub fn estimate_phase<T: Float>(g: &Graph<T>, p: &Bound, cell: Var) -> Var {
    conv(g, p, PHASE, cell)
}

/// Cell map `[2, oh, ow]` filled with `(1/h, 1/w)` of the input frame.
pub fn make_cell<T: Float>(h: usize, w: usize, oh: usize, ow: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[2, oh, ow]);
    t.channel_mut(0).fill(T::lit(1.0 / h as f64));
    t.channel_mut(1).fill(T::lit(1.0 / w as f64));
    t
}

fn check_map_shapes<T: Float>(amp: &Tensor<T>, freq: &Tensor<T>, phase: &Tensor<T>, delta: &Tensor<T>) -> Result<()> {
    let bad = |what: &str, t: &Tensor<T>| Error::Dimension(format!("{what} has shape {:?}", t.shape()));
    if amp.shape().len() != 3 || amp.shape()[0] % 2 != 0 || amp.shape()[0] == 0 {
        return Err(bad("amplitude", amp));
    }
    let (c2, h, w) = amp.dims3();
    if freq.shape() != [c2, h, w] {
        return Err(bad("frequency", freq));
    }
    if phase.shape() != [c2 / 2, h, w] {
        return Err(bad("phase", phase));
    }
    if delta.shape() != [2, h, w] {
        return Err(bad("local grid", delta));
    }
    Ok(())
}

/// Evaluates the mapping outside any graph.
pub fn apply_mapping<T: Float>(
    mapping: Mapping,
    amp: &Tensor<T>,
    freq: &Tensor<T>,
    phase: &Tensor<T>,
    delta: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_map_shapes(amp, freq, phase, delta)?;
    let g = Graph::new();
    let (a, f, p, d) = (g.constant(amp.clone()), g.constant(freq.clone()), g.constant(phase.clone()), g.constant(delta.clone()));
    let m = match mapping {
        Mapping::Fourier => g.fourier_map(a, f, p, d),
        Mapping::Linear => g.linear_map(a, f, p, d),
    };
    Ok((*g.value(m)).clone())
}

/// `A ⊙ [cos θ; sin θ]` with `θ_k = π (⟨F_k, δ⟩ + ph_k)`.
pub fn fourier_map<T: Float>(amp: &Tensor<T>, freq: &Tensor<T>, phase: &Tensor<T>, delta: &Tensor<T>) -> Result<Tensor<T>> {
    apply_mapping(Mapping::Fourier, amp, freq, phase, delta)
}

/// Graph nodes produced while warping one frame.
#[derive(Clone, Copy, Debug)]
pub struct WarpNodes {
    pub mapped: Var,
    /// Amplitude and frequency sampled on the HR grid.
    pub amplitude: Var,
    pub frequency: Var,
    pub phase: Var,
    pub local_grid: Var,
}

/// Warps one frame's latent to an `oh×ow` grid along `flow` (normalized units).
pub fn warp_frame_graph<T: Float>(
    g: &Graph<T>,
    p: &Bound,
    config: &WarpConfig,
    frame: Var,
    flow: Var,
    oh: usize,
    ow: usize,
) -> Result<WarpNodes> {
    let (c, h, w) = g.dims3(frame);
    if c != 4 {
        return Err(Error::Dimension(format!("frames must have 4 channels, got {c}")));
    }
    if g.dims3(flow) != (2, h, w) {
        return Err(Error::Dimension(format!("flow {:?} does not match frame {h}x{w}", g.shape(flow))));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::Parameter("empty output grid".into()));
    }
    let z = encode(g, p, config, frame);
    let amp_lr = estimate_amplitude(g, p, config, z);
    let freq_lr = estimate_frequency(g, p, config, z);
    let coords = g.add_const(flow, make_grid::<T>(h, w).tensor());
    let coords_hr = g.upsample_coords(coords, oh, ow);
    let hr_grid = make_grid::<T>(oh, ow).0.map(|v| -v);
    let delta = g.add_const(coords_hr, &hr_grid);
    let amplitude = g.nearest(amp_lr, coords_hr);
    let frequency = g.nearest(freq_lr, coords_hr);
    let cell = g.constant(make_cell(h, w, oh, ow));
    let phase = estimate_phase(g, p, cell);
    let mapped = match config.mapping {
        Mapping::Fourier => g.fourier_map(amplitude, frequency, phase, delta),
        Mapping::Linear => g.linear_map(amplitude, frequency, phase, delta),
    };
    Ok(WarpNodes { mapped, amplitude, frequency, phase, local_grid: delta })
}

/// Amplitude, frequency and phase maps of one warped frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierFeatures {
    pub amplitude: Tensor<f32>,
    pub frequency: Tensor<f32>,
    pub phase: Tensor<f32>,
}

impl FourierFeatures {
    pub(crate) fn read<T: Float>(g: &Graph<T>, nodes: &WarpNodes) -> Self {
        Self {
            amplitude: g.value(nodes.amplitude).cast(),
            frequency: g.value(nodes.frequency).cast(),
            phase: g.value(nodes.phase).cast(),
        }
    }
}

/// Mapped features `[2K, oh, ow]` of one frame with oh = round(s·H).
pub fn neural_warp_frame(
    params: &ParamSet<f32>,
    config: &WarpConfig,
    frame: &RggbFrame,
    flow: &FlowField<f32>,
    scale: f64,
) -> Result<(Tensor<f32>, FourierFeatures)> {
    if !(scale > 0.0) {
        return Err(Error::Parameter(format!("scale must be > 0, got {scale}")));
    }
    let (h, w) = frame.dims();
    let (oh, ow) = (crate::geometry::scaled_len(h, scale), crate::geometry::scaled_len(w, scale));
    let g = Graph::new();
    let p = params.bind_frozen(&g);
    let x = g.constant(frame.data.clone());
    let f = g.constant(flow.tensor().clone());
    let nodes = warp_frame_graph(&g, &p, config, x, f, oh, ow)?;
    Ok(((*g.value(nodes.mapped)).clone(), FourierFeatures::read(&g, &nodes)))
}
