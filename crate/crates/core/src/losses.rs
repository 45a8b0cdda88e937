//! Training objectives: photometric flow loss, SR L1, aligned L1 and totals.
//!
//! Every loss exists as a graph op (for training) and as a plain function.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_net::{flow_graph, FNetConfig};
use crate::geometry::{Border, FlowField};
use crate::graph::{Graph, Var};
use crate::nn::ParamSet;
use crate::raw_pipeline::{RggbFrame, SrgbImage};
use crate::reconstruction::SrImage;
use crate::tensor::{Float, Tensor};

/// Supplies the flow that warps a prediction onto the ground truth.
pub trait AlignmentFlowProvider<T: Float> {
    /// Flow on the grid of `pred` (`[3, H, W]`) in normalized units.
    fn align(&self, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<FlowField<T>>;

    /// Differentiable variant. The default evaluates [`Self::align`] and
    /// records the result as a constant.
    fn align_graph(&self, g: &Graph<T>, pred: Var, gt: Var) -> Result<Var> {
        let flow = self.align(&g.value(pred), &g.value(gt))?;
        Ok(g.constant(flow.0))
    }
}

/// Zero flow.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityProvider;

impl<T: Float> AlignmentFlowProvider<T> for IdentityProvider {
    fn align(&self, pred: &Tensor<T>, _gt: &Tensor<T>) -> Result<FlowField<T>> {
        let (_, h, w) = pred.dims3();
        Ok(FlowField::zeros(h, w))
    }
}

/// Always returns the same flow.
#[derive(Clone, Debug)]
pub struct FixedProvider<T>(pub FlowField<T>);

impl<T: Float> AlignmentFlowProvider<T> for FixedProvider<T> {
    fn align(&self, pred: &Tensor<T>, _gt: &Tensor<T>) -> Result<FlowField<T>> {
        let (_, h, w) = pred.dims3();
        if self.0.resolution() != (h, w) {
            return Err(Error::Provider(format!("fixed flow is {:?}, prediction is {h}x{w}", self.0.resolution())));
        }
        Ok(self.0.clone())
    }
}

/// The flow net run on RGGB-packed RGB images, with its flow resized to the
/// full grid. Parameters are frozen.
#[derive(Clone, Debug)]
pub struct FnetProvider {
    pub params: ParamSet<f32>,
    pub config: FNetConfig,
}

/// 1×1 selection weights picking (R, G, G, B) out of a space-to-depth RGB stack.
fn rggb_selector<T: Float>() -> Tensor<T> {
    let mut w = Tensor::zeros(&[4, 12, 1, 1]);
    for (o, i) in [(0, 0), (1, 5), (2, 6), (3, 11)] {
        w.data_mut()[o * 12 + i] = T::one();
    }
    w
}

impl<T: Float> AlignmentFlowProvider<T> for FnetProvider {
    fn align(&self, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<FlowField<T>> {
        let g = Graph::new();
        let (p, q) = (g.constant(pred.clone()), g.constant(gt.clone()));
        let f = self.align_graph(&g, p, q)?;
        FlowField::from_tensor((*g.value(f)).clone())
    }

    fn align_graph(&self, g: &Graph<T>, pred: Var, gt: Var) -> Result<Var> {
        let (c, h, w) = g.dims3(pred);
        if c != 3 || g.dims3(gt) != (c, h, w) || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Provider(format!("cannot align {:?} to {:?}", g.shape(pred), g.shape(gt))));
        }
        let bound = self.params.cast::<T>().bind_frozen(g);
        let sel = g.constant(rggb_selector());
        let pack = |x: Var| g.conv2d(g.space_to_depth2(x), sel, None);
        let flow = flow_graph(g, &bound, &self.config, pack(gt), pack(pred)).map_err(|e| Error::Provider(e.to_string()))?;
        Ok(g.resize(flow, h, w, Border::Clamp))
    }
}

/// Optional weights of the two loss terms (both 1 in the plain totals).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sr: f64,
    pub flow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sr: 1.0, flow: 1.0 }
    }
}

/// Scalars of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_of: f64,
    pub l_sr: f64,
    pub total: f64,
    /// Photometric loss of frames `1..N`.
    pub per_frame: Vec<f64>,
}

/// Per-frame mean squared warp error of frames `1..N` against frame 0.
/// Empty when `N < 2`.
pub fn photometric_terms<T: Float>(g: &Graph<T>, frames: &[Var], flows: &[Var]) -> Vec<Var> {
    assert_eq!(frames.len(), flows.len(), "one flow per frame");
    if frames.len() < 2 {
        return Vec::new();
    }
    frames[1..]
        .iter()
        .zip(&flows[1..])
        .map(|(&f, &d)| g.mse(g.warp(f, d), frames[0]))
        .collect()
}

/// Sum of [`photometric_terms`]; a zero constant (with a warning) when `N < 2`.
pub fn photometric_graph<T: Float>(g: &Graph<T>, frames: &[Var], flows: &[Var]) -> Var {
    let terms = photometric_terms(g, frames, flows);
    if terms.is_empty() {
        warn!("photometric loss needs at least two frames; returning 0");
        return g.constant(Tensor::scalar(T::zero()));
    }
    g.sum_of(&terms)
}

/// Mean absolute error after warping `pred` with the provider's flow.
pub fn aligned_l1_graph<T: Float>(
    g: &Graph<T>,
    pred: Var,
    gt: Var,
    provider: &dyn AlignmentFlowProvider<T>,
    detach: bool,
) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::Dimension(format!("prediction {:?} vs ground truth {:?}", g.shape(pred), g.shape(gt))));
    }
    let flow = provider.align_graph(g, pred, gt)?;
    let (_, h, w) = g.dims3(pred);
    if g.dims3(flow) != (2, h, w) {
        return Err(Error::Provider(format!("provider returned {:?} for a {h}x{w} image", g.shape(flow))));
    }
    let flow = if detach { g.detach(flow) } else { flow };
    Ok(g.l1(g.warp(pred, flow), gt))
}

/// `L_OF`: per-frame pixel mean of the squared warp error, summed over frames `1..N`.
pub fn photometric_flow_loss(frames: &[RggbFrame], flows: &[FlowField<f32>]) -> Result<f64> {
    if frames.len() != flows.len() {
        return Err(Error::Parameter(format!("{} frames with {} flows", frames.len(), flows.len())));
    }
    for (f, d) in frames.iter().zip(flows) {
        if f.dims() != d.resolution() || f.dims() != frames[0].dims() {
            return Err(Error::Dimension("frame and flow sizes differ".into()));
        }
    }
    let g = Graph::<f64>::new();
    let fv: Vec<Var> = frames.iter().map(|f| g.constant(f.data.cast())).collect();
    let dv: Vec<Var> = flows.iter().map(|d| g.constant(d.tensor().cast())).collect();
    Ok(g.scalar(photometric_graph(&g, &fv, &dv)))
}

fn same_shape(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Dimension(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// `L_SR`: mean absolute difference.
pub fn sr_l1_loss(pred: &SrImage, gt: &SrgbImage) -> Result<f64> {
    same_shape(&pred.data, &gt.data)?;
    let g = Graph::<f32>::new();
    let l = g.l1(g.constant(pred.data.clone()), g.constant(gt.data.clone()));
    Ok(g.scalar(l) as f64)
}

/// Aligned L1 with a provider; provider failures are returned, never skipped.
pub fn aligned_l1_loss(pred: &SrImage, gt: &SrgbImage, provider: &dyn AlignmentFlowProvider<f32>) -> Result<f64> {
    same_shape(&pred.data, &gt.data)?;
    let g = Graph::<f32>::new();
    let l = aligned_l1_graph(&g, g.constant(pred.data.clone()), g.constant(gt.data.clone()), provider, true)?;
    Ok(g.scalar(l) as f64)
}

/// `L_SR + L_OF` on synthetic data.
pub fn synthetic_total(l_sr: f64, l_of: f64) -> f64 {
    l_sr + l_of
}

/// `L_AlignedSR + L_OF` on real data.
pub fn real_total(l_aligned: f64, l_of: f64) -> f64 {
    l_aligned + l_of
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u32, shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape, |i| ((i as u32).wrapping_mul(2654435761u32).wrapping_add(seed) % 1000) as f32 / 1000.0)
    }

    #[test]
    fn photometric_identities() {
        let a = RggbFrame::new(img(1, &[4, 6, 6])).unwrap();
        let b = RggbFrame::new(img(2, &[4, 6, 6])).unwrap();
        let zero = FlowField::zeros(6, 6);
        assert_eq!(photometric_flow_loss(&[a.clone(), a.clone()], &[zero.clone(), zero.clone()]).unwrap(), 0.0);
        let l = photometric_flow_loss(&[a.clone(), b.clone()], &[zero.clone(), zero.clone()]).unwrap();
        let direct = a.data.data().iter().zip(b.data.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / 144.0;
        assert!((l - direct).abs() < 1e-9);
        assert_eq!(photometric_flow_loss(&[a.clone()], &[zero.clone()]).unwrap(), 0.0);
        assert!(photometric_flow_loss(&[a, b], &[zero]).is_err());
    }

    #[test]
    fn l1_identities() {
        let gt = SrgbImage::new(img(3, &[3, 4, 4]).map(|v| 0.8 * v)).unwrap();
        assert_eq!(sr_l1_loss(&SrImage { data: gt.data.clone() }, &gt).unwrap(), 0.0);
        let off = SrImage { data: gt.data.map(|v| v + 0.1) };
        assert!((sr_l1_loss(&off, &gt).unwrap() - 0.1).abs() < 1e-6);
        assert!(sr_l1_loss(&SrImage { data: Tensor::zeros(&[3, 4, 2]) }, &gt).is_err());
        let id = aligned_l1_loss(&off, &gt, &IdentityProvider).unwrap();
        assert_eq!(id, sr_l1_loss(&off, &gt).unwrap());
    }

    #[test]
    fn provider_errors_surface() {
        let gt = SrgbImage::new(Tensor::full(&[3, 4, 4], 0.5)).unwrap();
        let pred = SrImage { data: gt.data.clone() };
        let wrong = FixedProvider(FlowField::zeros(3, 3));
        assert!(matches!(aligned_l1_loss(&pred, &gt, &wrong), Err(Error::Provider(_))));
    }

    #[test]
    fn totals_are_sums() {
        assert_eq!(synthetic_total(0.0, 0.0), 0.0);
        assert_eq!(synthetic_total(0.3, 0.2), 0.3 + 0.2);
        assert_eq!(synthetic_total(0.3, 0.2), synthetic_total(0.2, 0.3));
        assert_eq!(real_total(0.0, 0.0), 0.0);
        assert_eq!(real_total(0.3, 0.2), 0.3 + 0.2);
        assert_eq!(real_total(0.3, 0.2), real_total(0.2, 0.3));
    }

    #[test]
    fn fnet_provider_shapes() {
        use rand::SeedableRng;
        let cfg = FNetConfig { base_channels: 4, levels: 1, ..FNetConfig::default() };
        let params = crate::flow_net::init_fnet(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let provider = FnetProvider { params, config: cfg };
        let gt = SrgbImage::new(img(5, &[3, 8, 12])).unwrap();
        let pred = SrImage { data: img(6, &[3, 8, 12]) };
        let f = AlignmentFlowProvider::<f32>::align(&provider, &pred.data, &gt.data).unwrap();
        assert_eq!(f.resolution(), (8, 12));
        assert!(aligned_l1_loss(&pred, &gt, &provider).unwrap() >= 0.0);
    }
}
