//! Declarative network specs, receptive-field algebra, and the concrete
//! generator and patch discriminator built from them.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_conv_weight, zeros, Module, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// One convolution: square kernel, stride, zero padding on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayerSpec {
    /// Layer with the default padding `kernel / 2`.
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn with_padding(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 {
            return Err(Error::LayerSpec("kernel must be ≥ 1".into()));
        }
        if self.stride < 1 {
            return Err(Error::LayerSpec("stride must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl fmt::Display for ConvLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}s{}p{}", self.kernel, self.stride, self.padding)
    }
}

impl FromStr for ConvLayerSpec {
    type Err = Error;

    /// Parses `k<kernel>s<stride>[p<pad>]`.
    fn from_str(token: &str) -> Result<Self> {
        let bad = || Error::LayerSpec(format!("cannot parse layer token {token:?}, expected k<kernel>s<stride>[p<pad>]"));
        let rest = token.trim().strip_prefix('k').ok_or_else(bad)?;
        let (kernel, rest) = rest.split_once('s').ok_or_else(bad)?;
        let (stride, pad) = match rest.split_once('p') {
            Some((s, p)) => (s, Some(p)),
            None => (rest, None),
        };
        let kernel: usize = kernel.parse().map_err(|_| bad())?;
        let stride: usize = stride.parse().map_err(|_| bad())?;
        let layer = match pad {
            Some(p) => ConvLayerSpec::with_padding(kernel, stride, p.parse().map_err(|_| bad())?),
            None => ConvLayerSpec::new(kernel, stride),
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// Parses a comma-separated list of layer tokens.
pub fn parse_stack(text: &str) -> Result<Vec<ConvLayerSpec>> {
    let layers = text
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::LayerSpec("empty stack".into()));
    }
    Ok(layers)
}

pub fn format_stack(layers: &[ConvLayerSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// `(receptive field, cumulative stride)` after each layer.
pub fn rf_trace(layers: &[ConvLayerSpec]) -> Vec<(usize, usize)> {
    let (mut r, mut j) = (1usize, 1usize);
    layers
        .iter()
        .map(|l| {
            r += (l.kernel - 1) * j;
            j *= l.stride;
            (r, j)
        })
        .collect()
}

/// Side length of the input region seen by one output unit.
pub fn receptive_field(layers: &[ConvLayerSpec]) -> usize {
    rf_trace(layers).last().map_or(1, |&(r, _)| r)
}

/// Spatial side of the output map for a square input.
pub fn output_map_size(layers: &[ConvLayerSpec], input_side: usize) -> Result<usize> {
    let mut size = input_side as i64;
    for (i, l) in layers.iter().enumerate() {
        let span = size + 2 * l.padding as i64 - l.kernel as i64;
        if span < 0 {
            return Err(Error::StackConsumesInput { layer: i, size: span });
        }
        size = span / l.stride as i64 + 1;
    }
    if size < 1 {
        return Err(Error::StackConsumesInput { layer: layers.len(), size });
    }
    Ok(size as usize)
}

const SEARCH_KERNELS: [usize; 4] = [3, 4, 5, 7];
const SEARCH_STRIDES: [usize; 2] = [1, 2];

/// Finds a conv stack whose receptive field is exactly `target_rf`.
///
/// Searches kernels {3,4,5,7} and strides {1,2}, strides non-increasing
/// with depth. Among hits the shallowest stack wins, then the smallest
/// kernel sum, then the lexicographically first `(kernel, stride)`
/// sequence. Padding is `kernel / 2`.
pub fn synthesize_stack(target_rf: usize, max_layers: usize) -> Result<Vec<ConvLayerSpec>> {
    if !(1..=256).contains(&target_rf) || !(1..=7).contains(&max_layers) {
        return Err(Error::LayerSpec(format!(
            "synthesis needs 1 ≤ target ≤ 256 and 1 ≤ max_layers ≤ 7, got {target_rf} and {max_layers}"
        )));
    }
    if target_rf == 1 {
        return Ok(vec![ConvLayerSpec::with_padding(1, 1, 0)]);
    }

    struct Search {
        target: usize,
        best: Option<(usize, Vec<(usize, usize)>)>,
    }

    fn dfs(s: &mut Search, remaining: usize, r: usize, j: usize, max_stride: usize, seq: &mut Vec<(usize, usize)>) {
        if remaining == 0 {
            if r == s.target {
                let ksum = seq.iter().map(|&(k, _)| k).sum();
                if s.best.as_ref().is_none_or(|(b, _)| ksum < *b) {
                    s.best = Some((ksum, seq.clone()));
                }
            }
            return;
        }
        // every remaining layer adds at least (3 - 1) * j
        if r + 2 * j * remaining > s.target {
            return;
        }
        for &k in &SEARCH_KERNELS {
            for &st in SEARCH_STRIDES.iter().filter(|&&st| st <= max_stride) {
                seq.push((k, st));
                dfs(s, remaining - 1, r + (k - 1) * j, j * st, st, seq);
                seq.pop();
            }
        }
    }

    for depth in 1..=max_layers {
        let mut search = Search {
            target: target_rf,
            best: None,
        };
        dfs(&mut search, depth, 1, 1, 2, &mut Vec::with_capacity(depth));
        if let Some((_, seq)) = search.best {
            return Ok(seq.into_iter().map(|(k, s)| ConvLayerSpec::new(k, s)).collect());
        }
    }
    Err(Error::UnreachableReceptiveField(target_rf))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    None,
    #[default]
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

fn activate<T: Scalar>(tape: &mut Tape<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::None => x,
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu(s) => tape.leaky_relu(x, T::lit(s)),
        Activation::Tanh => tape.tanh(x),
    }
}

fn normalize<T: Scalar>(tape: &mut Tape<T>, x: Var, norm: Norm) -> Var {
    match norm {
        Norm::None => x,
        Norm::Instance => tape.instance_norm(x, T::lit(INSTANCE_NORM_EPS)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackLayer {
    pub conv: ConvLayerSpec,
    pub out_channels: usize,
    pub norm: Norm,
    pub activation: Activation,
}

/// A fully convolutional stack ending in a one-channel patch score map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStackSpec {
    pub in_channels: usize,
    pub layers: Vec<StackLayer>,
    pub target_rf: Option<usize>,
}

impl ConvStackSpec {
    /// Patch discriminator over `convs`: widths start at `base` and double
    /// on every stride-2 layer up to `cap`; leaky activations; no
    /// normalization on the first layer; the last layer emits one raw
    /// score channel.
    pub fn patch_discriminator(convs: &[ConvLayerSpec], in_channels: usize, base: usize, cap: usize) -> Self {
        let last = convs.len().saturating_sub(1);
        let mut width = base.min(cap).max(1);
        let layers = convs
            .iter()
            .enumerate()
            .map(|(i, &conv)| {
                if i > 0 && conv.stride == 2 {
                    width = (width * 2).min(cap);
                }
                if i == last {
                    StackLayer {
                        conv,
                        out_channels: 1,
                        norm: Norm::None,
                        activation: Activation::None,
                    }
                } else {
                    StackLayer {
                        conv,
                        out_channels: width,
                        norm: if i == 0 { Norm::None } else { Norm::Instance },
                        activation: Activation::LeakyRelu(LEAKY_SLOPE),
                    }
                }
            })
            .collect();
        Self {
            in_channels,
            layers,
            target_rf: None,
        }
    }

    pub fn with_target(mut self, rf: usize) -> Self {
        self.target_rf = Some(rf);
        self
    }

    pub fn convs(&self) -> Vec<ConvLayerSpec> {
        self.layers.iter().map(|l| l.conv).collect()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.convs())
    }

    pub fn output_map_size(&self, input_side: usize) -> Result<usize> {
        output_map_size(&self.convs(), input_side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::LayerSpec("empty stack".into()));
        }
        for l in &self.layers {
            l.conv.validate()?;
        }
        if self.layers.last().unwrap().out_channels != 1 {
            return Err(Error::LayerSpec("final layer must emit one channel".into()));
        }
        if let Some(t) = self.target_rf {
            let r = self.receptive_field();
            if r != t {
                return Err(Error::LayerSpec(format!("receptive field {r} differs from declared target {t}")));
            }
        }
        Ok(())
    }
}

/// Patch discriminator: image batch to (N, 1, s, s) score map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub spec: ConvStackSpec,
    pub params: ParamSet<T>,
}

pub fn build_discriminator<T: Scalar, R: Rng + ?Sized>(spec: &ConvStackSpec, rng: &mut R) -> Result<Discriminator<T>> {
    spec.validate()?;
    let mut params = ParamSet::new();
    let mut cin = spec.in_channels;
    for (i, l) in spec.layers.iter().enumerate() {
        params.push(format!("conv{i}.weight"), init_conv_weight(l.out_channels, cin, l.conv.kernel, rng));
        params.push(format!("conv{i}.bias"), zeros(&[l.out_channels]));
        cin = l.out_channels;
    }
    Ok(Discriminator {
        spec: spec.clone(),
        params,
    })
}

impl<T: Scalar> Discriminator<T> {
    /// Forward pass; with `normalized == false` every normalization layer
    /// is skipped so only the convolutional footprint couples pixels.
    pub fn forward_with(&self, tape: &mut Tape<T>, params: &[Var], x: Var, normalized: bool) -> Var {
        let mut h = x;
        for (i, l) in self.spec.layers.iter().enumerate() {
            h = tape.conv2d(h, params[2 * i], Some(params[2 * i + 1]), l.conv.stride, l.conv.padding);
            if normalized {
                h = normalize(tape, h, l.norm);
            }
            h = activate(tape, h, l.activation);
        }
        h
    }

    /// Sets every weight to `value` and every bias to zero.
    pub fn fill_constant(&mut self, value: T) {
        for (name, t) in self.params.iter_mut() {
            let v = if name.ends_with("weight") { value } else { T::zero() };
            t.fill(v);
        }
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn forward(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Var {
        self.forward_with(tape, params, x, true)
    }
}

/// Input interval `[start, end)` seen by output unit `index`, in input
/// coordinates; negative or past-the-end parts lie in the padding.
pub fn footprint(layers: &[ConvLayerSpec], index: usize) -> (i64, i64) {
    let (mut jump, mut offset) = (1i64, 0i64);
    for l in layers {
        offset += l.padding as i64 * jump;
        jump *= l.stride as i64;
    }
    let start = index as i64 * jump - offset;
    (start, start + receptive_field(layers) as i64)
}

/// Measures the receptive field by back-propagating from the centre unit of
/// the score map and returning the side of the bounding box of non-zero
/// input gradients. Normalization is bypassed.
///
/// The score map must be at least 3x3 and the centre unit's whole
/// footprint must lie inside the input.
pub fn empirical_rf_probe<T: Scalar>(disc: &Discriminator<T>, input_side: usize) -> Result<usize> {
    let convs = disc.spec.convs();
    let too_small = |why: String| Error::InputTooSmallForProbe(format!("side {input_side}: {why}"));
    let map = output_map_size(&convs, input_side).map_err(|e| too_small(e.to_string()))?;
    if map < 3 {
        return Err(too_small(format!("score map is {map}x{map}, need at least 3x3")));
    }
    let (lo, hi) = footprint(&convs, (map - 1) / 2);
    if lo < 0 || hi > input_side as i64 {
        return Err(too_small(format!("centre footprint [{lo}, {hi}) leaves the input")));
    }
    let mut tape = Tape::new();
    let vars = disc.params.bind(&mut tape, false);
    let x = tape.param(ArrayD::from_elem(IxDyn(&[1, disc.spec.in_channels, input_side, input_side]), T::one()));
    let out = disc.forward_with(&mut tape, &vars, x, false);
    let center = (map - 1) / 2;
    let mut seed = ArrayD::zeros(tape.value(out).raw_dim());
    seed[[0, 0, center, center]] = T::one();
    let grads = tape.backward_from(out, seed);
    let Some(g) = grads.get(x) else { return Ok(0) };

    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for ((_, _, i, j), &v) in g.view().into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter() {
        if v != T::zero() {
            rmin = rmin.min(i);
            rmax = rmax.max(i);
            cmin = cmin.min(j);
            cmax = cmax.max(j);
        }
    }
    if rmin == usize::MAX {
        return Ok(0);
    }
    Ok((rmax - rmin + 1).max(cmax - cmin + 1))
}

/// Residual encoder/decoder generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    /// Input and output side; set from the experiment's image size.
    #[serde(skip)]
    pub image_size: usize,
    pub base_channels: usize,
    pub downsampling: usize,
    pub residual_blocks: usize,
    pub outer_kernel: usize,
    pub norm: Norm,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            base_channels: 64,
            downsampling: 2,
            residual_blocks: 6,
            outer_kernel: 7,
            norm: Norm::Instance,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.outer_kernel == 0 || self.outer_kernel % 2 == 0 {
            return Err(Error::Config("generator needs base_channels ≥ 1 and an odd outer_kernel".into()));
        }
        let factor = 1usize << self.downsampling;
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "generator image_size {} must be a positive multiple of 2^downsampling = {factor}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub params: ParamSet<T>,
}

pub fn build_generator<T: Scalar, R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<Generator<T>> {
    spec.validate()?;
    let mut params = ParamSet::new();
    let mut conv = |name: &str, out: usize, inp: usize, k: usize, rng: &mut R| {
        params.push(format!("{name}.weight"), init_conv_weight(out, inp, k, rng));
        params.push(format!("{name}.bias"), zeros(&[out]));
    };
    let b = spec.base_channels;
    conv("in", b, 3, spec.outer_kernel, rng);
    let mut ch = b;
    for i in 0..spec.downsampling {
        conv(&format!("down{i}"), ch * 2, ch, 3, rng);
        ch *= 2;
    }
    for i in 0..spec.residual_blocks {
        conv(&format!("res{i}.a"), ch, ch, 3, rng);
        conv(&format!("res{i}.b"), ch, ch, 3, rng);
    }
    for i in 0..spec.downsampling {
        conv(&format!("up{i}"), ch / 2, ch, 3, rng);
        ch /= 2;
    }
    conv("out", 3, ch, spec.outer_kernel, rng);
    Ok(Generator {
        spec: spec.clone(),
        params,
    })
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn forward(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Var {
        let s = &self.spec;
        let mut p = params.chunks_exact(2);
        let mut next = || {
            let c = p.next().expect("parameter list shorter than generator layout");
            (c[0], c[1])
        };
        let pad = s.outer_kernel / 2;

        let (w, b) = next();
        let mut h = tape.conv2d(x, w, Some(b), 1, pad);
        h = normalize(tape, h, s.norm);
        h = tape.relu(h);
        for _ in 0..s.downsampling {
            let (w, b) = next();
            h = tape.conv2d(h, w, Some(b), 2, 1);
            h = normalize(tape, h, s.norm);
            h = tape.relu(h);
        }
        for _ in 0..s.residual_blocks {
            let (wa, ba) = next();
            let (wb, bb) = next();
            let mut r = tape.conv2d(h, wa, Some(ba), 1, 1);
            r = normalize(tape, r, s.norm);
            r = tape.relu(r);
            r = tape.conv2d(r, wb, Some(bb), 1, 1);
            r = normalize(tape, r, s.norm);
            h = tape.add(h, r);
        }
        for _ in 0..s.downsampling {
            let (w, b) = next();
            h = tape.upsample2(h);
            h = tape.conv2d(h, w, Some(b), 1, 1);
            h = normalize(tape, h, s.norm);
            h = tape.relu(h);
        }
        let (w, b) = next();
        h = tape.conv2d(h, w, Some(b), 1, pad);
        tape.tanh(h)
    }
}

/// Runs a module forward without recording gradients and returns the output.
pub fn infer<T: Scalar, M: Module<T>>(module: &M, input: &ArrayD<T>) -> ArrayD<T> {
    let mut tape = Tape::new();
    let vars = module.params().bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let y = module.forward(&mut tape, &vars, x);
    tape.value(y).clone()
}
