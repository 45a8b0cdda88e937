//! Named parameter storage and the convolutional building blocks shared by
//! the flow estimator, encoder, blender and decoder.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// Ordered map of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        self.entries.extend(other.entries);
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        Self { entries: self.entries.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Records every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &Graph<T>) -> Bound {
        Bound { vars: self.entries.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect() }
    }

    /// Records every parameter on `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &Graph<T>) -> Bound {
        Bound { vars: self.entries.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect() }
    }
}

/// Parameter names resolved to graph variables.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)) weights, zero bias.
    KaimingNormal,
    /// Uniform(±1/sqrt(fan_in)) weights and bias.
    FanInUniform,
}

/// Adds `{name}.weight` (`[cout, cin, k, k]`) and `{name}.bias` (`[cout]`).
pub fn add_conv<T: Float, R: Rng>(
    params: &mut ParamSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    init: Init,
    rng: &mut R,
) {
    let fan_in = (cin * k * k) as f64;
    let shape = [cout, cin, k, k];
    let (weight, bias) = match init {
        Init::KaimingNormal => {
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            (Tensor::from_fn(&shape, |_| T::lit(dist.sample(rng))), Tensor::zeros(&[cout]))
        }
        Init::FanInUniform => {
            let bound = 1.0 / fan_in.sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w = Tensor::from_fn(&shape, |_| T::lit(dist.sample(rng)));
            (w, Tensor::from_fn(&[cout], |_| T::lit(dist.sample(rng))))
        }
    };
    params.insert(format!("{name}.weight"), weight);
    params.insert(format!("{name}.bias"), bias);
}

/// Same-padded convolution using the `{name}.weight` / `{name}.bias` pair.
pub fn conv<T: Float>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    g.conv2d(x, p.var(&format!("{name}.weight")), p.try_var(&format!("{name}.bias")))
}

/// EDSR-style residual body without upsampling: head conv, residual blocks
/// (conv, ReLU, conv, scaled add), tail conv and a global skip from the head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdsrShape {
    pub in_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub res_scale: f64,
}

pub fn add_edsr<T: Float, R: Rng>(params: &mut ParamSet<T>, prefix: &str, shape: EdsrShape, rng: &mut R) {
    let c = shape.channels;
    add_conv(params, &format!("{prefix}.head"), shape.in_channels, c, 3, Init::FanInUniform, rng);
    for b in 0..shape.blocks {
        add_conv(params, &format!("{prefix}.block{b}.conv1"), c, c, 3, Init::FanInUniform, rng);
        add_conv(params, &format!("{prefix}.block{b}.conv2"), c, c, 3, Init::FanInUniform, rng);
    }
    add_conv(params, &format!("{prefix}.tail"), c, c, 3, Init::FanInUniform, rng);
}

pub fn edsr<T: Float>(g: &Graph<T>, p: &Bound, prefix: &str, shape: EdsrShape, x: Var) -> Var {
    let head = conv(g, p, &format!("{prefix}.head"), x);
    let mut r = head;
    for b in 0..shape.blocks {
        let t = conv(g, p, &format!("{prefix}.block{b}.conv1"), r);
        let t = g.relu(t);
        let t = conv(g, p, &format!("{prefix}.block{b}.conv2"), t);
        let t = if shape.res_scale == 1.0 { t } else { g.scale(t, T::lit(shape.res_scale)) };
        r = g.add(r, t);
    }
    let tail = conv(g, p, &format!("{prefix}.tail"), r);
    g.add(tail, head)
}
