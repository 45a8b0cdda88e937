//! Encoder-decoder optical flow estimator on packed RGGB frame pairs.
//!
//! Layout: `levels` × (conv3, LeakyReLU, conv3, LeakyReLU, 2× max-pool),
//! then `levels` × (conv3, LeakyReLU, conv3, LeakyReLU, 2× bilinear up),
//! then conv3 → 2 channels, tanh, scaled to the displacement bound.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixels_to_normalized, Border, FlowField};
use crate::graph::{Graph, Var};
use crate::nn::{add_conv, conv, Bound, Init, ParamSet};
use crate::raw_pipeline::{BurstSet, RggbFrame};
use crate::tensor::{Float, Tensor};

/// Largest admissible flow component in normalized units (the full image span).
pub const FLOW_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FNetConfig {
    /// Channels of the stacked (reference, source) pair.
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// Displacement bound in LR pixels.
    pub max_displacement_px: f64,
    pub leaky_slope: f64,
    /// Edge-pad inputs up to a multiple of `2^levels` and crop the flow back,
    /// instead of rejecting such sizes.
    pub pad_to_multiple: bool,
}

impl Default for FNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            base_channels: 32,
            levels: 3,
            max_displacement_px: 24.0,
            leaky_slope: 0.2,
            pad_to_multiple: false,
        }
    }
}

impl FNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Parameter("flow net needs levels >= 1 and base_channels >= 1".into()));
        }
        if self.in_channels == 0 || self.in_channels % 2 != 0 {
            return Err(Error::Parameter(format!("in_channels must be even, got {}", self.in_channels)));
        }
        if !(self.max_displacement_px > 0.0) {
            return Err(Error::Parameter("max_displacement_px must be > 0".into()));
        }
        Ok(())
    }

    /// Per-axis bound `(y, x)` in normalized units on an `h×w` grid.
    pub fn bound(&self, h: usize, w: usize) -> (f64, f64) {
        (
            pixels_to_normalized(self.max_displacement_px, h).min(FLOW_MAX),
            pixels_to_normalized(self.max_displacement_px, w).min(FLOW_MAX),
        )
    }

    fn encoder_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn decoder_channels(&self, level: usize) -> usize {
        self.base_channels << (self.levels - level)
    }
}

pub const PREFIX: &str = "fnet";

/// Adds the flow estimator parameters under `fnet.` to `params`.
pub fn add_fnet<T: Float, R: Rng>(params: &mut ParamSet<T>, config: &FNetConfig, rng: &mut R) -> Result<()> {
    config.validate()?;
    let mut cin = config.in_channels;
    for l in 0..config.levels {
        let c = config.encoder_channels(l);
        add_conv(params, &format!("{PREFIX}.enc{l}.conv1"), cin, c, 3, Init::KaimingNormal, rng);
        add_conv(params, &format!("{PREFIX}.enc{l}.conv2"), c, c, 3, Init::KaimingNormal, rng);
        cin = c;
    }
    for l in 0..config.levels {
        let c = config.decoder_channels(l);
        add_conv(params, &format!("{PREFIX}.dec{l}.conv1"), cin, c, 3, Init::KaimingNormal, rng);
        add_conv(params, &format!("{PREFIX}.dec{l}.conv2"), c, c, 3, Init::KaimingNormal, rng);
        cin = c;
    }
    add_conv(params, &format!("{PREFIX}.out"), cin, 2, 3, Init::KaimingNormal, rng);
    Ok(())
}

/// Fresh parameter set holding only the flow estimator.
pub fn init_fnet<T: Float, R: Rng>(config: &FNetConfig, rng: &mut R) -> Result<ParamSet<T>> {
    let mut p = ParamSet::new();
    add_fnet(&mut p, config, rng)?;
    Ok(p)
}

/// Flow that warps `source` onto `reference`, both `[C, H, W]` graph nodes.
pub fn flow_graph<T: Float>(g: &Graph<T>, p: &Bound, config: &FNetConfig, reference: Var, source: Var) -> Result<Var> {
    let (c, h, w) = g.dims3(reference);
    if g.dims3(source) != (c, h, w) {
        return Err(Error::Dimension(format!(
            "reference {:?} and source {:?} differ",
            g.shape(reference),
            g.shape(source)
        )));
    }
    if 2 * c != config.in_channels {
        return Err(Error::Dimension(format!("flow net expects {} channels per frame, got {c}", config.in_channels / 2)));
    }
    let m = 1usize << config.levels;
    let (ph, pw) = if h % m == 0 && w % m == 0 {
        (h, w)
    } else if config.pad_to_multiple {
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    } else {
        return Err(Error::Dimension(format!("{h}x{w} is not divisible by {m}; enable pad_to_multiple")));
    };
    let slope = T::lit(config.leaky_slope);
    let mut x = g.concat(&[reference, source]);
    if (ph, pw) != (h, w) {
        x = g.pad_edge(x, ph, pw);
    }
    let block = |x: Var, name: &str| {
        let x = g.leaky_relu(conv(g, p, &format!("{name}.conv1"), x), slope);
        g.leaky_relu(conv(g, p, &format!("{name}.conv2"), x), slope)
    };
    for l in 0..config.levels {
        x = g.max_pool2(block(x, &format!("{PREFIX}.enc{l}")));
    }
    for l in 0..config.levels {
        x = block(x, &format!("{PREFIX}.dec{l}"));
        let (_, xh, xw) = g.dims3(x);
        x = g.resize(x, 2 * xh, 2 * xw, Border::Clamp);
    }
    let x = g.tanh(conv(g, p, &format!("{PREFIX}.out"), x));
    let x = if (ph, pw) != (h, w) { g.crop(x, h, w) } else { x };
    let (by, bx) = config.bound(h, w);
    Ok(g.scale_channels(x, vec![T::lit(by), T::lit(bx)]))
}

/// Flows of every frame to `frames[0]`. The reference flow is a zero constant.
pub fn burst_flow_graph<T: Float>(g: &Graph<T>, p: &Bound, config: &FNetConfig, frames: &[Var]) -> Result<Vec<Var>> {
    let Some(&reference) = frames.first() else {
        return Err(Error::Parameter("empty burst".into()));
    };
    let (_, h, w) = g.dims3(reference);
    let mut flows = vec![g.constant(Tensor::zeros(&[2, h, w]))];
    for &src in &frames[1..] {
        flows.push(flow_graph(g, p, config, reference, src)?);
    }
    Ok(flows)
}

/// Flow warping `source` onto `reference`.
pub fn estimate_flow(
    params: &ParamSet<f32>,
    config: &FNetConfig,
    reference: &RggbFrame,
    source: &RggbFrame,
) -> Result<FlowField<f32>> {
    let g = Graph::new();
    let p = params.bind_frozen(&g);
    let r = g.constant(reference.data.clone());
    let s = g.constant(source.data.clone());
    let f = flow_graph(&g, &p, config, r, s)?;
    FlowField::from_tensor((*g.value(f)).clone())
}

/// One flow per frame; `flows[0]` is exactly zero and costs no network call.
pub fn estimate_burst_flows(params: &ParamSet<f32>, config: &FNetConfig, burst: &BurstSet) -> Result<Vec<FlowField<f32>>> {
    estimate_frame_flows(params, config, &burst.frames)
}

pub fn estimate_frame_flows(
    params: &ParamSet<f32>,
    config: &FNetConfig,
    frames: &[RggbFrame],
) -> Result<Vec<FlowField<f32>>> {
    let Some(reference) = frames.first() else {
        return Err(Error::Parameter("empty burst".into()));
    };
    let (h, w) = reference.dims();
    let mut flows = vec![FlowField::zeros(h, w)];
    for src in &frames[1..] {
        flows.push(estimate_flow(params, config, reference, src)?);
    }
    Ok(flows)
}
