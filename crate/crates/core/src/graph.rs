//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op records its output value and, when any input requires a
//! gradient, a closure computing the vector-Jacobian product. The op set is
//! exactly what the network needs: convolutions, pooling, resampling,
//! warping, the Fourier mapping, frame reductions and the losses.

use std::cell::RefCell;
use std::rc::Rc;

use crate::geometry::{self, Border};
use crate::tensor::{matmul, Float, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward<T> = Box<dyn Fn(&Tensor<T>, &mut Grads<T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<Backward<T>>,
}

/// Gradients produced by [`Graph::backward`]. Only leaves keep their gradient.
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Grads<T> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.slots[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots[v.0].take()
    }

    fn slot(&mut self, v: Var) -> &mut Tensor<T> {
        let shape = &self.shapes[v.0];
        self.slots[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.slots[v.0] {
            Some(s) => s.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Recording context. Cheap to create; drop it after `backward`.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push<F>(&self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>, &mut Grads<T>) + 'static,
    {
        let requires_grad = parents.iter().any(|&p| self.requires(p));
        let node = Node {
            value: Rc::new(value),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as Backward<T>),
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, backward: None });
        Var(nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn dims3(&self, v: Var) -> (usize, usize, usize) {
        self.nodes.borrow()[v.0].value.dims3()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads = Grads {
            slots: (0..nodes.len()).map(|_| None).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        };
        if !nodes[loss.0].requires_grad {
            return grads;
        }
        grads.slots[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(bw) = nodes[i].backward.as_ref() else { continue };
            if let Some(g) = grads.slots[i].take() {
                bw(&g, &mut grads);
            }
        }
        grads
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push(out, &[a, b], move |g, grads| {
            grads.accumulate(a, g.clone());
            grads.accumulate(b, g.clone());
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push(out, &[a, b], move |g, grads| {
            grads.accumulate(a, g.clone());
            grads.accumulate(b, g.map(|v| -v));
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push(out, &[a, b], move |g, grads| {
            if grads.wants(a) {
                grads.accumulate(a, g.zip_map(&vb, |d, y| d * y));
            }
            if grads.wants(b) {
                grads.accumulate(b, g.zip_map(&va, |d, x| d * x));
            }
        })
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], move |g, grads| grads.accumulate(a, g.map(|d| d * c)))
    }

    /// `a + t` for a constant tensor `t`.
    pub fn add_const(&self, a: Var, t: &Tensor<T>) -> Var {
        let out = self.value(a).zip_map(t, |x, y| x + y);
        self.push(out, &[a], move |g, grads| grads.accumulate(a, g.clone()))
    }

    /// Multiplies channel `c` of a `[C, H, W]` value by `factors[c]`.
    pub fn scale_channels(&self, a: Var, factors: Vec<T>) -> Var {
        let va = self.value(a);
        let (c, h, w) = va.dims3();
        assert_eq!(factors.len(), c);
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| va.data()[i] * factors[i / hw]);
        self.push(out, &[a], move |g, grads| {
            grads.accumulate(a, Tensor::from_fn(g.shape(), |i| g.data()[i] * factors[i / hw]));
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        let va = self.value(a);
        let out = va.map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, &[a], move |g, grads| {
            grads.accumulate(a, g.zip_map(&va, |d, x| if x > T::zero() { d } else { d * slope }));
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = Rc::new(self.value(a).map(|x| x.tanh()));
        let y = Rc::clone(&out);
        self.push((*out).clone(), &[a], move |g, grads| {
            grads.accumulate(a, g.zip_map(&y, |d, t| d * (T::one() - t * t)));
        })
    }

    // ---- convolution and pooling -----------------------------------------

    /// Stride-1 "same" convolution of `[Cin, H, W]` with `[Cout, Cin, k, k]`
    /// weights (odd `k`, zero padding) plus an optional `[Cout]` bias.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(weight));
        let (cin, h, w) = vx.dims3();
        let ws = vw.shape().to_vec();
        assert!(ws.len() == 4 && ws[1] == cin && ws[2] == ws[3] && ws[2] % 2 == 1, "conv weight {ws:?} vs input {cin} channels");
        let (cout, k) = (ws[0], ws[2]);
        let hw = h * w;
        let ckk = cin * k * k;
        let mut out = Tensor::zeros(&[cout, h, w]);
        if k == 1 {
            matmul(vw.data(), false, vx.data(), false, out.data_mut(), cout, cin, hw, T::zero());
        } else {
            let cols = im2col(vx.data(), cin, h, w, k);
            matmul(vw.data(), false, &cols, false, out.data_mut(), cout, ckk, hw, T::zero());
        }
        if let Some(b) = bias {
            let vb = self.value(b);
            assert_eq!(vb.len(), cout);
            for (co, &bv) in vb.data().iter().enumerate() {
                out.data_mut()[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(weight)).chain(bias).collect();
        self.push(out, &parents, move |g, grads| {
            let cols = if k == 1 { None } else { Some(im2col(vx.data(), cin, h, w, k)) };
            let cols_ref = cols.as_deref().unwrap_or(vx.data());
            if grads.wants(weight) {
                let gw = grads.slot(weight);
                matmul(g.data(), false, cols_ref, true, gw.data_mut(), cout, hw, ckk, T::one());
            }
            if let Some(b) = bias {
                if grads.wants(b) {
                    let gb = grads.slot(b);
                    for co in 0..cout {
                        gb.data_mut()[co] += g.data()[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
                    }
                }
            }
            if grads.wants(x) {
                if k == 1 {
                    let gx = grads.slot(x);
                    matmul(vw.data(), true, g.data(), false, gx.data_mut(), cin, cout, hw, T::one());
                } else {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    matmul(vw.data(), true, g.data(), false, &mut dcols, ckk, cout, hw, T::zero());
                    let gx = grads.slot(x);
                    col2im_add(&dcols, gx.data_mut(), cin, h, w, k);
                }
            }
        })
    }

    /// 2×2 max pooling with stride 2 (even H and W).
    pub fn max_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = vx.dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut arg = vec![0usize; c * oh * ow];
        for ch in 0..c {
            let src = vx.channel(ch);
            for y in 0..oh {
                for xx in 0..ow {
                    let cands = [
                        (2 * y) * w + 2 * xx,
                        (2 * y) * w + 2 * xx + 1,
                        (2 * y + 1) * w + 2 * xx,
                        (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let best = cands.iter().copied().fold(cands[0], |b, i| if src[i] > src[b] { i } else { b });
                    let o = (ch * oh + y) * ow + xx;
                    out.data_mut()[o] = src[best];
                    arg[o] = ch * h * w + best;
                }
            }
        }
        self.push(out, &[x], move |g, grads| {
            let gx = grads.slot(x);
            for (o, &i) in arg.iter().enumerate() {
                gx.data_mut()[i] += g.data()[o];
            }
        })
    }

    // ---- resampling -------------------------------------------------------

    pub fn resize(&self, x: Var, oh: usize, ow: usize, border: Border) -> Var {
        let vx = self.value(x);
        let (_, h, w) = vx.dims3();
        let out = geometry::resize_bilinear(&vx, oh, ow, border);
        self.push(out, &[x], move |g, grads| {
            grads.accumulate(x, geometry::resize_bilinear_adjoint(g, h, w, border));
        })
    }

    /// Coordinate-field upsampling `B_s` to an explicit output size.
    pub fn upsample_coords(&self, coords: Var, oh: usize, ow: usize) -> Var {
        let vc = self.value(coords);
        let (_, h, w) = vc.dims3();
        let out = geometry::upsample_coords_to(&vc, oh, ow);
        self.push(out, &[coords], move |g, grads| {
            grads.accumulate(coords, geometry::upsample_coords_adjoint(g, h, w));
        })
    }

    /// Bilinear backward warp of `img` by `flow` (normalized units).
    pub fn warp(&self, img: Var, flow: Var) -> Var {
        let (vi, vf) = (self.value(img), self.value(flow));
        assert_eq!(&vi.shape()[1..], &vf.shape()[1..], "warp resolution mismatch");
        let out = geometry::warp_forward(&vi, &vf);
        self.push(out, &[img, flow], move |g, grads| {
            let (gi, gf) = geometry::warp_backward(&vi, &vf, g, grads.wants(img), grads.wants(flow));
            if let Some(gi) = gi {
                grads.accumulate(img, gi);
            }
            if let Some(gf) = gf {
                grads.accumulate(flow, gf);
            }
        })
    }

    /// Nearest-neighbour lookup of features at coordinates. Piecewise
    /// constant in the coordinates, so only the features get a gradient.
    pub fn nearest(&self, features: Var, coords: Var) -> Var {
        let (vf, vc) = (self.value(features), self.value(coords));
        let (_, h, w) = vf.dims3();
        let (_, oh, ow) = vc.dims3();
        let idx = geometry::nearest_indices(&vc, h, w);
        let out = geometry::gather(&vf, &idx, oh, ow);
        self.push(out, &[features], move |g, grads| {
            grads.accumulate(features, geometry::scatter_add(g, &idx, h, w));
        })
    }

    /// Edge-replicating pad on the bottom/right to `[C, oh, ow]`.
    pub fn pad_edge(&self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = vx.dims3();
        assert!(oh >= h && ow >= w);
        let src_index = move |i: usize| {
            let (ch, rem) = (i / (oh * ow), i % (oh * ow));
            let (y, xx) = ((rem / ow).min(h - 1), (rem % ow).min(w - 1));
            (ch * h + y) * w + xx
        };
        let out = Tensor::from_fn(&[c, oh, ow], |i| vx.data()[src_index(i)]);
        self.push(out, &[x], move |g, grads| {
            let gx = grads.slot(x);
            for (i, &v) in g.data().iter().enumerate() {
                gx.data_mut()[src_index(i)] += v;
            }
        })
    }

    /// Top-left crop to `[C, oh, ow]`.
    pub fn crop(&self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = self.value(x);
        let (c, h, w) = vx.dims3();
        assert!(oh <= h && ow <= w);
        let src_index = move |i: usize| {
            let (ch, rem) = (i / (oh * ow), i % (oh * ow));
            (ch * h + rem / ow) * w + rem % ow
        };
        let out = Tensor::from_fn(&[c, oh, ow], |i| vx.data()[src_index(i)]);
        self.push(out, &[x], move |g, grads| {
            let gx = grads.slot(x);
            for (i, &v) in g.data().iter().enumerate() {
                gx.data_mut()[src_index(i)] += v;
            }
        })
    }

    // ---- channel rearrangement -------------------------------------------

    pub fn concat(&self, xs: &[Var]) -> Var {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let (_, h, w) = vals[0].dims3();
        let sizes: Vec<usize> = vals.iter().map(|v| v.dims3().0).collect();
        assert!(vals.iter().all(|v| v.dims3().1 == h && v.dims3().2 == w));
        let mut data = Vec::with_capacity(sizes.iter().sum::<usize>() * h * w);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(&[sizes.iter().sum(), h, w], data).unwrap();
        let xs = xs.to_vec();
        self.push(out, &xs.clone(), move |g, grads| {
            let mut off = 0;
            for (&v, &c) in xs.iter().zip(&sizes) {
                let n = c * h * w;
                if grads.wants(v) {
                    grads.accumulate(v, Tensor::from_vec(&[c, h, w], g.data()[off..off + n].to_vec()).unwrap());
                }
                off += n;
            }
        })
    }

    /// Depth-to-space with block 2: `[4C, H, W] -> [C, 2H, 2W]`.
    pub fn pixel_shuffle2(&self, x: Var) -> Var {
        let out = pixel_shuffle2(&self.value(x));
        self.push(out, &[x], move |g, grads| grads.accumulate(x, space_to_depth2(g)))
    }

    /// Space-to-depth with block 2: `[C, 2H, 2W] -> [4C, H, W]`.
    pub fn space_to_depth2(&self, x: Var) -> Var {
        let out = space_to_depth2(&self.value(x));
        self.push(out, &[x], move |g, grads| grads.accumulate(x, pixel_shuffle2(g)))
    }

    // ---- frame reductions ------------------------------------------------

    pub fn mean_of(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let inv = T::one() / T::from_usize(xs.len()).unwrap();
        let mut acc = (*self.value(xs[0])).clone();
        for &v in &xs[1..] {
            acc.add_assign(&self.value(v));
        }
        let out = acc.map(|v| v * inv);
        let xs = xs.to_vec();
        self.push(out, &xs.clone(), move |g, grads| {
            let gs = g.map(|d| d * inv);
            for &v in &xs {
                grads.accumulate(v, gs.clone());
            }
        })
    }

    pub fn max_of(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let n = vals[0].len();
        let mut arg = vec![0usize; n];
        let mut out = (*vals[0]).clone();
        for (f, v) in vals.iter().enumerate().skip(1) {
            for i in 0..n {
                if v.data()[i] > out.data()[i] {
                    out.data_mut()[i] = v.data()[i];
                    arg[i] = f;
                }
            }
        }
        let xs = xs.to_vec();
        self.push(out, &xs.clone(), move |g, grads| {
            for (f, &v) in xs.iter().enumerate() {
                if grads.wants(v) {
                    let gv = Tensor::from_fn(g.shape(), |i| if arg[i] == f { g.data()[i] } else { T::zero() });
                    grads.accumulate(v, gv);
                }
            }
        })
    }

    // ---- Fourier mapping ------------------------------------------------

    /// Amplitude-modulated sinusoidal mapping of the local grid.
    ///
    /// `amp`, `freq`: `[2K, H, W]`; `phase`: `[K, H, W]`; `delta`: `[2, H, W]`.
    /// With `θ_k = π (f_y δ_y + f_x δ_x + ph_k)` (frequency pair `k` is channels
    /// `2k`, `2k+1`), output channel `k` is `A_k cos θ_k` and channel `K+k` is
    /// `A_{K+k} sin θ_k`.
    pub fn fourier_map(&self, amp: Var, freq: Var, phase: Var, delta: Var) -> Var {
        self.mapping(amp, freq, phase, delta, MapKind::Fourier)
    }

    /// Ablation of [`Graph::fourier_map`] with the sinusoids replaced by the
    /// linear terms: channel `k` is `A_k`, channel `K+k` is `A_{K+k} θ_k / π`.
    pub fn linear_map(&self, amp: Var, freq: Var, phase: Var, delta: Var) -> Var {
        self.mapping(amp, freq, phase, delta, MapKind::Linear)
    }

    fn mapping(&self, amp: Var, freq: Var, phase: Var, delta: Var, kind: MapKind) -> Var {
        let (va, vf, vp, vd) = (self.value(amp), self.value(freq), self.value(phase), self.value(delta));
        let (c2, h, w) = va.dims3();
        let k = c2 / 2;
        assert_eq!(vf.dims3(), (c2, h, w), "frequency shape");
        assert_eq!(vp.dims3(), (k, h, w), "phase shape");
        assert_eq!(vd.dims3(), (2, h, w), "local grid shape");
        let p = h * w;
        let pi = T::lit(std::f64::consts::PI);
        let theta = |kk: usize, i: usize| -> T {
            pi * (vf.data()[2 * kk * p + i] * vd.data()[i] + vf.data()[(2 * kk + 1) * p + i] * vd.data()[p + i] + vp.data()[kk * p + i])
        };
        let mut out = Tensor::zeros(&[c2, h, w]);
        for kk in 0..k {
            for i in 0..p {
                let t = theta(kk, i);
                let (c, s) = match kind {
                    MapKind::Fourier => (t.cos(), t.sin()),
                    MapKind::Linear => (T::one(), t / pi),
                };
                out.data_mut()[kk * p + i] = va.data()[kk * p + i] * c;
                out.data_mut()[(k + kk) * p + i] = va.data()[(k + kk) * p + i] * s;
            }
        }
        self.push(out, &[amp, freq, phase, delta], move |g, grads| {
            let mut ga = Tensor::zeros(&[c2, h, w]);
            let mut gf = Tensor::zeros(&[c2, h, w]);
            let mut gp = Tensor::zeros(&[k, h, w]);
            let mut gd = Tensor::zeros(&[2, h, w]);
            for kk in 0..k {
                for i in 0..p {
                    let t = pi
                        * (vf.data()[2 * kk * p + i] * vd.data()[i]
                            + vf.data()[(2 * kk + 1) * p + i] * vd.data()[p + i]
                            + vp.data()[kk * p + i]);
                    let (gc, gs) = (g.data()[kk * p + i], g.data()[(k + kk) * p + i]);
                    let (ac, as_) = (va.data()[kk * p + i], va.data()[(k + kk) * p + i]);
                    // d out / d(θ/π) scaled back to d/dθ-space below
                    let dtheta_over_pi = match kind {
                        MapKind::Fourier => {
                            let (c, s) = (t.cos(), t.sin());
                            ga.data_mut()[kk * p + i] = gc * c;
                            ga.data_mut()[(k + kk) * p + i] = gs * s;
                            pi * (-gc * ac * s + gs * as_ * c)
                        }
                        MapKind::Linear => {
                            ga.data_mut()[kk * p + i] = gc;
                            ga.data_mut()[(k + kk) * p + i] = gs * t / pi;
                            gs * as_
                        }
                    };
                    let (fy, fx) = (vf.data()[2 * kk * p + i], vf.data()[(2 * kk + 1) * p + i]);
                    gf.data_mut()[2 * kk * p + i] = dtheta_over_pi * vd.data()[i];
                    gf.data_mut()[(2 * kk + 1) * p + i] = dtheta_over_pi * vd.data()[p + i];
                    gp.data_mut()[kk * p + i] = dtheta_over_pi;
                    gd.data_mut()[i] += dtheta_over_pi * fy;
                    gd.data_mut()[p + i] += dtheta_over_pi * fx;
                }
            }
            grads.accumulate(amp, ga);
            grads.accumulate(freq, gf);
            grads.accumulate(phase, gp);
            grads.accumulate(delta, gd);
        })
    }

    // ---- losses -----------------------------------------------------------

    /// Mean absolute difference, a scalar.
    pub fn l1(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l1 shape mismatch");
        let n = T::from_usize(va.len()).unwrap();
        let loss = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
        self.push(Tensor::scalar(loss), &[a, b], move |g, grads| {
            let d = g.data()[0] / n;
            let sign = |x: T, y: T| {
                if x > y {
                    d
                } else if x < y {
                    -d
                } else {
                    T::zero()
                }
            };
            if grads.wants(a) {
                grads.accumulate(a, va.zip_map(&vb, sign));
            }
            if grads.wants(b) {
                grads.accumulate(b, va.zip_map(&vb, |x, y| -sign(x, y)));
            }
        })
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = T::from_usize(va.len()).unwrap();
        let loss = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        self.push(Tensor::scalar(loss), &[a, b], move |g, grads| {
            let d = g.data()[0] * T::lit(2.0) / n;
            let diff = va.zip_map(&vb, |x, y| (x - y) * d);
            if grads.wants(b) {
                grads.accumulate(b, diff.map(|v| -v));
            }
            grads.accumulate(a, diff);
        })
    }

    /// `Σ a ⊙ t` for a constant tensor `t`, a scalar.
    pub fn dot_const(&self, a: Var, t: &Tensor<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), t.shape(), "dot_const shape mismatch");
        let s = va.data().iter().zip(t.data()).map(|(&x, &y)| x * y).sum::<T>();
        let t = t.clone();
        self.push(Tensor::scalar(s), &[a], move |g, grads| {
            let d = g.data()[0];
            grads.accumulate(a, t.map(|v| v * d));
        })
    }

    pub fn sum_of(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        xs[1..].iter().fold(xs[0], |acc, &v| self.add(acc, v))
    }
}

#[derive(Clone, Copy)]
enum MapKind {
    Fourier,
    Linear,
}

/// `[C, H, W] -> [C·k·k, H·W]` patch matrix for a same-padded stride-1 convolution.
fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let sy = sy as usize;
                    let dst = &mut cols[row + y * w + x_lo..row + y * w + x_hi];
                    let s0 = sy * w + x_lo + kx - pad;
                    dst.copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im_add<T: Float>(cols: &[T], dx: &mut [T], c: usize, h: usize, w: usize, k: usize) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let sy = sy as usize;
                    let src = &cols[row + y * w + x_lo..row + y * w + x_hi];
                    let d0 = sy * w + x_lo + kx - pad;
                    for (d, &s) in dst[d0..d0 + (x_hi - x_lo)].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Depth-to-space with block 2: output channel `c` at `(2i+di, 2j+dj)` is
/// input channel `4c + 2di + dj` at `(i, j)`.
pub fn pixel_shuffle2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (c4, h, w) = x.dims3();
    assert_eq!(c4 % 4, 0, "pixel_shuffle2 needs a multiple of 4 channels");
    let c = c4 / 4;
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        for di in 0..2 {
            for dj in 0..2 {
                let src = x.channel(4 * ch + 2 * di + dj);
                for i in 0..h {
                    for j in 0..w {
                        out.set3(ch, 2 * i + di, 2 * j + dj, src[i * w + j]);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle2`].
pub fn space_to_depth2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = x.dims3();
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "space_to_depth2 needs even dims");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[4 * c, h, w]);
    for ch in 0..c {
        for di in 0..2 {
            for dj in 0..2 {
                let oc = 4 * ch + 2 * di + dj;
                for i in 0..h {
                    for j in 0..w {
                        let v = x.at3(ch, 2 * i + di, 2 * j + dj);
                        out.set3(oc, i, j, v);
                    }
                }
            }
        }
    }
    out
}
