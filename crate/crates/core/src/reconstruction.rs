//! Full burst super-resolution model: per-frame flow and neural warp,
//! blending, 1×1 decoding, the upscaled reference skip and pixel shuffle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_net::{add_fnet, burst_flow_graph, FNetConfig};
use crate::geometry::{scaled_len, Border, FlowField};
use crate::graph::{Graph, Var};
use crate::neural_warp::{add_warp, warp_frame_graph, FourierFeatures, WarpConfig, WarpNodes};
use crate::nn::{add_conv, add_edsr, conv, edsr, Bound, EdsrShape, Init, ParamSet};
use crate::raw_pipeline::RggbFrame;
use crate::tensor::{Float, Tensor};

/// How per-frame blender outputs are reduced to one feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Mean,
    Max,
    /// 1×1 convolution over the stacked frames; fixes the burst size.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub fnet: FNetConfig,
    pub warp: WarpConfig,
    pub blender_blocks: usize,
    pub merge: MergeMode,
    /// Burst size the learned merge is built for.
    pub merge_frames: usize,
    pub decoder_layers: usize,
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fnet: FNetConfig::default(),
            warp: WarpConfig::default(),
            blender_blocks: 8,
            merge: MergeMode::Mean,
            merge_frames: 14,
            decoder_layers: 4,
            decoder_channels: 256,
        }
    }
}

impl ModelConfig {
    pub fn blender_shape(&self) -> EdsrShape {
        let c = self.warp.channels();
        EdsrShape { in_channels: c, channels: c, blocks: self.blender_blocks, res_scale: self.warp.res_scale }
    }

    pub fn validate(&self) -> Result<()> {
        self.fnet.validate()?;
        self.warp.validate()?;
        if self.fnet.in_channels != 8 {
            return Err(Error::Parameter("the flow net stacks two 4-channel frames".into()));
        }
        if self.decoder_layers == 0 || self.decoder_channels == 0 {
            return Err(Error::Parameter("decoder needs at least one hidden layer".into()));
        }
        if self.merge == MergeMode::Learned && self.merge_frames == 0 {
            return Err(Error::Parameter("learned merge needs merge_frames >= 1".into()));
        }
        Ok(())
    }
}

pub const BLENDER: &str = "blender";
pub const MERGE: &str = "merge";
pub const DECODER: &str = "decoder";
pub const SKIP: &str = "skip";

/// Deterministic parameter initialization for every submodule.
pub fn init_model<T: Float>(config: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    add_fnet(&mut p, &config.fnet, &mut rng)?;
    add_warp(&mut p, &config.warp, &mut rng)?;
    let c = config.warp.channels();
    add_edsr(&mut p, BLENDER, config.blender_shape(), &mut rng);
    if config.merge == MergeMode::Learned {
        add_conv(&mut p, MERGE, config.merge_frames * c, c, 1, Init::FanInUniform, &mut rng);
    }
    let mut cin = c;
    for l in 0..config.decoder_layers {
        add_conv(&mut p, &format!("{DECODER}.layer{l}"), cin, config.decoder_channels, 1, Init::FanInUniform, &mut rng);
        cin = config.decoder_channels;
    }
    add_conv(&mut p, &format!("{DECODER}.out"), cin, 12, 1, Init::FanInUniform, &mut rng);
    add_conv(&mut p, &format!("{SKIP}.conv1"), 4, 12, 3, Init::FanInUniform, &mut rng);
    add_conv(&mut p, &format!("{SKIP}.conv2"), 12, 12, 3, Init::FanInUniform, &mut rng);
    Ok(p)
}

/// Shared-weight blender body per frame, then the frame reduction.
pub fn blend<T: Float>(g: &Graph<T>, p: &Bound, config: &ModelConfig, mapped: &[Var]) -> Result<Var> {
    if mapped.is_empty() {
        return Err(Error::Parameter("nothing to blend".into()));
    }
    let shape0 = g.shape(mapped[0]);
    if mapped.iter().any(|&m| g.shape(m) != shape0) {
        return Err(Error::Dimension("mapped features differ in shape".into()));
    }
    let bodies: Vec<Var> = mapped.iter().map(|&m| edsr(g, p, BLENDER, config.blender_shape(), m)).collect();
    Ok(match config.merge {
        MergeMode::Mean => g.mean_of(&bodies),
        MergeMode::Max => g.max_of(&bodies),
        MergeMode::Learned => {
            if bodies.len() != config.merge_frames {
                return Err(Error::Dimension(format!(
                    "learned merge expects {} frames, got {}",
                    config.merge_frames,
                    bodies.len()
                )));
            }
            conv(g, p, MERGE, g.concat(&bodies))
        }
    })
}

/// Per-pixel MLP to 12 sub-pixel RGB channels.
pub fn decode<T: Float>(g: &Graph<T>, p: &Bound, config: &ModelConfig, merged: Var) -> Var {
    let mut x = merged;
    for l in 0..config.decoder_layers {
        x = g.relu(conv(g, p, &format!("{DECODER}.layer{l}"), x));
    }
    conv(g, p, &format!("{DECODER}.out"), x)
}

/// conv3 (4→12), bilinear resize to `oh×ow`, conv3 (12→12).
pub fn skip_upsample<T: Float>(g: &Graph<T>, p: &Bound, reference: Var, oh: usize, ow: usize) -> Var {
    let x = conv(g, p, &format!("{SKIP}.conv1"), reference);
    let x = g.resize(x, oh, ow, Border::Clamp);
    conv(g, p, &format!("{SKIP}.conv2"), x)
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `[3, 2·oh, 2·ow]`.
    pub sr: Var,
    pub flows: Vec<Var>,
    pub frames: Vec<WarpNodes>,
}

/// Forward pass with flows from the model's own flow net.
pub fn forward_graph<T: Float>(
    g: &Graph<T>,
    p: &Bound,
    config: &ModelConfig,
    frames: &[Var],
    oh: usize,
    ow: usize,
) -> Result<ForwardNodes> {
    let flows = burst_flow_graph(g, p, &config.fnet, frames)?;
    forward_with_flows(g, p, config, frames, flows, oh, ow)
}

/// Forward pass with caller-supplied flows (one per frame, normalized units).
pub fn forward_with_flows<T: Float>(
    g: &Graph<T>,
    p: &Bound,
    config: &ModelConfig,
    frames: &[Var],
    flows: Vec<Var>,
    oh: usize,
    ow: usize,
) -> Result<ForwardNodes> {
    if frames.is_empty() || frames.len() != flows.len() {
        return Err(Error::Parameter(format!("{} frames with {} flows", frames.len(), flows.len())));
    }
    let nodes = frames
        .iter()
        .zip(&flows)
        .map(|(&f, &d)| warp_frame_graph(g, p, &config.warp, f, d, oh, ow))
        .collect::<Result<Vec<_>>>()?;
    let mapped: Vec<Var> = nodes.iter().map(|n| n.mapped).collect();
    let h = decode(g, p, config, blend(g, p, config, &mapped)?);
    let skip = skip_upsample(g, p, frames[0], oh, ow);
    let sr = g.pixel_shuffle2(g.add(h, skip));
    Ok(ForwardNodes { sr, flows, frames: nodes })
}

/// Depth-to-space with block 2, rejecting channel counts not divisible by 4.
pub fn pixel_shuffle2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 3 || x.shape()[0] % 4 != 0 {
        return Err(Error::Dimension(format!("pixel shuffle needs [4C, H, W], got {:?}", x.shape())));
    }
    Ok(crate::graph::pixel_shuffle2(x))
}

/// Super-resolved sRGB image `[3, 2sH, 2sW]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SrImage {
    pub data: Tensor<f32>,
}

/// Output of [`burstm_forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub sr: SrImage,
    pub flows: Vec<FlowField<f32>>,
    /// Per-frame Fourier features on the HR grid.
    pub features: Vec<FourierFeatures>,
}

/// Output grid `(round(sH), round(sW))` of the mapped features.
pub fn feature_dims(h: usize, w: usize, scale: f64) -> Result<(usize, usize)> {
    if !(scale.is_finite() && scale > 1.0) {
        return Err(Error::Parameter(format!("scale must be > 1, got {scale}")));
    }
    Ok((scaled_len(h, scale), scaled_len(w, scale)))
}

pub(crate) fn frame_vars<T: Float>(g: &Graph<T>, frames: &[RggbFrame]) -> Result<Vec<Var>> {
    let Some(first) = frames.first() else {
        return Err(Error::Parameter("empty burst".into()));
    };
    if frames.iter().any(|f| f.dims() != first.dims()) {
        return Err(Error::Dimension("burst frames differ in size".into()));
    }
    Ok(frames.iter().map(|f| g.constant(f.data.cast())).collect())
}

/// Inference on a burst at any scale `s > 1`, integer or fractional.
pub fn burstm_forward(params: &ParamSet<f32>, config: &ModelConfig, frames: &[RggbFrame], scale: f64) -> Result<ForwardOutput> {
    let g = Graph::<f32>::new();
    let p = params.bind_frozen(&g);
    let vars = frame_vars(&g, frames)?;
    let (h, w) = frames[0].dims();
    let (oh, ow) = feature_dims(h, w, scale)?;
    let nodes = forward_graph(&g, &p, config, &vars, oh, ow)?;
    let data = (*g.value(nodes.sr)).clone();
    if !data.is_finite() {
        return Err(Error::NonFinite("super-resolved image".into()));
    }
    Ok(ForwardOutput {
        sr: SrImage { data },
        flows: nodes.flows.iter().map(|&f| FlowField((*g.value(f)).clone())).collect(),
        features: nodes.frames.iter().map(|n| FourierFeatures::read(&g, n)).collect(),
    })
}

/// Parameters bundled with the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct BurstM {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl BurstM {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_model(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, frames: &[RggbFrame], scale: f64) -> Result<ForwardOutput> {
        burstm_forward(&self.params, &self.config, frames, scale)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            fnet: FNetConfig { base_channels: 4, levels: 1, ..FNetConfig::default() },
            warp: WarpConfig { k: 2, encoder_blocks: 1, ..WarpConfig::default() },
            blender_blocks: 1,
            decoder_layers: 2,
            decoder_channels: 8,
            ..ModelConfig::default()
        }
    }

    fn frames(n: usize, h: usize, w: usize) -> Vec<RggbFrame> {
        (0..n)
            .map(|k| RggbFrame::new(Tensor::from_fn(&[4, h, w], |i| ((i * 7 + k * 3) % 17) as f32 / 17.0)).unwrap())
            .collect()
    }

    #[test]
    fn output_shapes_across_scales() {
        let m = BurstM::new(tiny(), 0).unwrap();
        let b = frames(3, 6, 6);
        for (s, n) in [(2.0, 24), (3.0, 36), (4.0, 48), (3.5, 42)] {
            let out = m.forward(&b, s).unwrap();
            assert_eq!(out.sr.data.shape(), &[3, n, n]);
            assert_eq!(out.flows.len(), 3);
            assert_eq!(out.features.len(), 3);
        }
        assert!(m.forward(&b, 1.0).is_err());
        assert!(m.forward(&[], 2.0).is_err());
    }

    #[test]
    fn mean_blend_symmetries() {
        let cfg = tiny();
        let p: ParamSet<f64> = init_model(&cfg, 1).unwrap();
        let g = Graph::<f64>::new();
        let b = p.bind_frozen(&g);
        let t = |seed: usize| g.constant(Tensor::from_fn(&[4, 3, 3], |i| ((i + seed) % 5) as f64 * 0.1));
        let (a, bb, c) = (t(0), t(1), t(2));
        let one = g.value(blend(&g, &b, &cfg, &[a]).unwrap());
        let three = g.value(blend(&g, &b, &cfg, &[a, a, a]).unwrap());
        assert!(one.max_abs_diff(&three) < 1e-12);
        let x = g.value(blend(&g, &b, &cfg, &[a, bb, c]).unwrap());
        let y = g.value(blend(&g, &b, &cfg, &[a, c, bb]).unwrap());
        assert!(x.max_abs_diff(&y) < 1e-12);
        assert!(blend(&g, &b, &cfg, &[]).is_err());
    }

    #[test]
    fn decoder_is_pointwise() {
        let mut cfg = tiny();
        cfg.decoder_layers = 4;
        let mut p: ParamSet<f64> = init_model(&cfg, 2).unwrap();
        let g = Graph::<f64>::new();
        let x = Tensor::from_fn(&[4, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = p.bind_frozen(&g);
        let y0 = g.value(decode(&g, &b, &cfg, g.constant(x.clone())));
        assert_eq!(y0.shape(), &[12, 3, 4]);
        let mut x2 = x.clone();
        x2.set3(1, 1, 2, 5.0);
        let y1 = g.value(decode(&g, &b, &cfg, g.constant(x2)));
        for c in 0..12 {
            for y in 0..3 {
                for xx in 0..4 {
                    if (y, xx) != (1, 2) {
                        assert_eq!(y0.at3(c, y, xx), y1.at3(c, y, xx));
                    }
                }
            }
        }
        for (name, t) in p.iter_mut() {
            if name.starts_with("decoder") && name.ends_with("bias") {
                t.data_mut().fill(0.0);
            }
        }
        let g = Graph::<f64>::new();
        let b = p.bind_frozen(&g);
        let z = g.value(decode(&g, &b, &cfg, g.constant(Tensor::zeros(&[4, 2, 2]))));
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn skip_preserves_constants_without_bias() {
        let cfg = tiny();
        let mut p: ParamSet<f64> = init_model(&cfg, 3).unwrap();
        p.get_mut("skip.conv1.bias").unwrap().data_mut().fill(0.0);
        p.get_mut("skip.conv2.bias").unwrap().data_mut().fill(0.0);
        let g = Graph::<f64>::new();
        let b = p.bind_frozen(&g);
        let out = g.value(skip_upsample(&g, &b, g.constant(Tensor::full(&[4, 5, 5], 0.3)), 17, 17));
        assert_eq!(out.shape(), &[12, 17, 17]);
        // zero-padded convs: rows 6..=10 only see the constant interior of conv1
        for c in 0..12 {
            let v = out.at3(c, 8, 8);
            for y in 6..11 {
                for x in 6..11 {
                    assert!((out.at3(c, y, x) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn learned_merge_fixes_burst_size() {
        let cfg = ModelConfig { merge: MergeMode::Learned, merge_frames: 2, ..tiny() };
        let m = BurstM::new(cfg, 0).unwrap();
        assert!(m.forward(&frames(2, 4, 4), 2.0).is_ok());
        assert!(matches!(m.forward(&frames(3, 4, 4), 2.0), Err(Error::Dimension(_))));
        let mx = BurstM::new(ModelConfig { merge: MergeMode::Max, ..tiny() }, 0).unwrap();
        assert_eq!(mx.forward(&frames(3, 4, 4), 2.0).unwrap().sr.data.shape(), &[3, 16, 16]);
    }
}
