//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. [`Tape::backward`]
//! walks the tape in reverse and only propagates through nodes whose
//! `requires_grad` flag is set, so a leaf registered with [`Tape::constant`]
//! or cut with [`Tape::stop_gradient`] never receives a gradient.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix4, IxDyn, Zip};

use crate::scalar::Scalar;

pub type Tensor<T> = ArrayD<T>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<Array2<T>>,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Upsample2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
    Scale(Var, T),
    AddScalar(Var),
}

/// Sum accumulated in f64 so long reductions do not drift in single precision.
fn sum<T: Scalar>(values: impl Iterator<Item = T>) -> f64 {
    values.map(|v| v.as_f64()).sum()
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `v`, with the gradient path severed.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a rank-0 (or single element) node.
    pub fn scalar(&self, v: Var) -> T {
        let value = &self.nodes[v.0].value;
        assert_eq!(value.len(), 1, "scalar() on a tensor of {} elements", value.len());
        *value.iter().next().unwrap()
    }

    /// 2-D cross-correlation with zero padding on every side.
    ///
    /// `input` is (N, C, H, W), `weight` is (O, C, k, k), `bias` is (O).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let x = self.nodes[input.0].value.view().into_dimensionality::<Ix4>().expect("conv2d input must be rank 4");
        let w = &self.nodes[weight.0].value;
        let (n, c, h, wd) = x.dim();
        let (o, wc, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        assert!(stride >= 1);
        let ho = (h + 2 * pad).checked_sub(k).expect("kernel larger than padded input") / stride + 1;
        let wo = (wd + 2 * pad).checked_sub(k).expect("kernel larger than padded input") / stride + 1;
        let w2 = w.view().into_shape_with_order((o, c * k * k)).expect("standard layout weight");
        let bias_v = bias.map(|b| self.nodes[b.0].value.view());

        let mut out = Array4::<T>::zeros((n, o, ho, wo));
        let mut all_cols = Vec::with_capacity(n);
        for b in 0..n {
            let cols = im2col(x.index_axis(Axis(0), b), k, stride, pad, ho, wo);
            let y = w2.dot(&cols);
            let mut dst = out.index_axis_mut(Axis(0), b);
            let mut dst = dst.view_mut().into_shape_with_order((o, ho * wo)).unwrap();
            dst.assign(&y);
            if let Some(bv) = &bias_v {
                for (mut row, &bb) in dst.outer_iter_mut().zip(bv.iter()) {
                    row.mapv_inplace(|v| v + bb);
                }
            }
            all_cols.push(cols);
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols: if rg { all_cols } else { Vec::new() },
            },
            rg,
        )
    }

    /// Per-sample, per-channel normalization over the spatial extent, without
    /// affine parameters.
    pub fn instance_norm(&mut self, input: Var, eps: T) -> Var {
        let x = self.nodes[input.0].value.view().into_dimensionality::<Ix4>().expect("instance_norm input must be rank 4");
        let (n, c, h, w) = x.dim();
        let mut out = x.to_owned();
        let mut inv_std = Vec::with_capacity(n * c);
        for mut plane in out.view_mut().into_shape_with_order((n * c, h * w)).unwrap().outer_iter_mut() {
            let mean = T::lit(sum(plane.iter().copied()) / (h * w) as f64);
            let var = T::lit(sum(plane.iter().map(|&v| (v - mean) * (v - mean))) / (h * w) as f64);
            let is = T::one() / (var + eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(input);
        self.push(out.into_dyn(), Op::InstanceNorm { input, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Nearest-neighbour 2x spatial upsampling of an (N, C, H, W) tensor.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("upsample2 input must be rank 4");
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
        for ((b, ch, i, j), v) in out.indexed_iter_mut() {
            *v = xv[[b, ch, i / 2, j / 2]];
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::Upsample2(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape(), "sub shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.abs());
        let rg = self.rg(x);
        self.push(value, Op::Abs(x), rg)
    }

    /// Arithmetic mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        assert!(!v.is_empty(), "mean of an empty tensor");
        let m = T::lit(sum(v.iter().copied()) / v.len() as f64);
        let rg = self.rg(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// Gradients of a scalar node with respect to every node that requires one.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let seed = ArrayD::from_elem(self.nodes[out.0].value.raw_dim(), T::one());
        self.backward_from(out, seed)
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.nodes[out.0].value.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Gradients { grads };
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.zip_mut_with(&g, |a, &b| *a = *a + b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (o, k) = (w.shape()[0], w.shape()[2]);
                let g4 = g.into_dimensionality::<Ix4>().unwrap();
                let (ho, wo) = (g4.shape()[2], g4.shape()[3]);
                let w2 = w.view().into_shape_with_order((o, c * k * k)).unwrap();

                if self.rg(*weight) {
                    let mut gw = Array2::<T>::zeros((o, c * k * k));
                    for b in 0..n {
                        let gb = g4.index_axis(Axis(0), b);
                        let gb = gb.into_shape_with_order((o, ho * wo)).unwrap();
                        ndarray::linalg::general_mat_mul(T::one(), &gb, &cols[b].t(), T::one(), &mut gw);
                    }
                    let gw = gw.into_shape_with_order(IxDyn(&[o, c, k, k])).unwrap();
                    self.accumulate(grads, *weight, gw);
                }
                if let Some(bias) = bias {
                    if self.rg(*bias) {
                        let gb = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                        self.accumulate(grads, *bias, gb.into_dyn());
                    }
                }
                if self.rg(*input) {
                    let mut gx = Array4::<T>::zeros((n, c, h, wd));
                    for b in 0..n {
                        let gb = g4.index_axis(Axis(0), b);
                        let gb = gb.into_shape_with_order((o, ho * wo)).unwrap();
                        let dcols = w2.t().dot(&gb);
                        col2im(dcols.view(), gx.index_axis_mut(Axis(0), b), k, *stride, *pad, ho, wo);
                    }
                    self.accumulate(grads, *input, gx.into_dyn());
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                let xhat = node.value.view().into_dimensionality::<Ix4>().unwrap();
                let mut g4 = g.into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = xhat.dim();
                let n_el = (h * w) as f64;
                let xplanes = xhat.into_shape_with_order((n * c, h * w)).unwrap();
                let mut gplanes = g4.view_mut().into_shape_with_order((n * c, h * w)).unwrap();
                for ((mut gp, xp), &is) in gplanes.outer_iter_mut().zip(xplanes.outer_iter()).zip(inv_std.iter()) {
                    let gmean = T::lit(sum(gp.iter().copied()) / n_el);
                    let gx_mean = T::lit(sum(gp.iter().zip(xp.iter()).map(|(&gv, &xv)| gv * xv)) / n_el);
                    Zip::from(&mut gp).and(&xp).for_each(|gv, &xv| {
                        *gv = (*gv - gmean - xv * gx_mean) * is;
                    });
                }
                self.accumulate(grads, *input, g4.into_dyn());
            }
            Op::Relu(x) => {
                let mut g = g;
                Zip::from(&mut g).and(&node.value).for_each(|gv, &y| {
                    if y <= T::zero() {
                        *gv = T::zero();
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let mut g = g;
                Zip::from(&mut g).and(&self.nodes[x.0].value).for_each(|gv, &xv| {
                    if xv <= T::zero() {
                        *gv = *gv * *slope;
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let mut g = g;
                Zip::from(&mut g).and(&node.value).for_each(|gv, &y| *gv = *gv * (T::one() - y * y));
                self.accumulate(grads, *x, g);
            }
            Op::Upsample2(x) => {
                let g4 = g.into_dimensionality::<Ix4>().unwrap();
                let s = self.nodes[x.0].value.shape();
                let mut gx = Array4::<T>::zeros((s[0], s[1], s[2], s[3]));
                for ((b, ch, i, j), &v) in g4.indexed_iter() {
                    gx[[b, ch, i / 2, j / 2]] = gx[[b, ch, i / 2, j / 2]] + v;
                }
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.mapv(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Square(x) => {
                let mut g = g;
                let two = T::lit(2.0);
                Zip::from(&mut g).and(&self.nodes[x.0].value).for_each(|gv, &xv| *gv = *gv * two * xv);
                self.accumulate(grads, *x, g);
            }
            Op::Abs(x) => {
                let mut g = g;
                Zip::from(&mut g).and(&self.nodes[x.0].value).for_each(|gv, &xv| {
                    *gv = if xv > T::zero() {
                        *gv
                    } else if xv < T::zero() {
                        -*gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::Mean(x) => {
                let xv = &self.nodes[x.0].value;
                let gs = *g.iter().next().unwrap() / T::lit(xv.len() as f64);
                self.accumulate(grads, *x, ArrayD::from_elem(xv.raw_dim(), gs));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.mapv(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g),
        }
    }
}

fn im2col<T: Scalar>(x: ArrayView3<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut cols = Array2::<T>::zeros((c * k * k, ho * wo));
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &xs[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: ArrayView2<T>, mut gx: ArrayViewMut3<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) {
    let (c, h, w) = gx.dim();
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let gs = gx.as_slice_mut().expect("standard layout gradient buffer");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ih as usize) * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            gs[base + iw as usize] = gs[base + iw as usize] + src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for `vars`, with zeros where nothing flowed.
    pub fn collect(&self, vars: &[Var], tape: &Tape<T>) -> Vec<Tensor<T>> {
        vars.iter()
            .map(|&v| match self.get(v) {
                Some(g) => g.clone(),
                None => ArrayD::zeros(tape.value(v).raw_dim()),
            })
            .collect()
    }
}
