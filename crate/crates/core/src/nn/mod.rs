//! Layer-graph CNN: reference architecture, masked parameters, full and
//! prefix forward passes and per-cut representation sizes.
//!
//! Cut index `l` names the output of the first `l` layers; `l = 0` is the raw
//! input and `l = L` the softmax output.

pub mod io;
pub mod kernels;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kernels::{ConvGeom, PoolGeom, Real};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {found} elements, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("cut index {cut} outside 0..={layers}")]
    BadCutIndex { cut: usize, layers: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("model file checksum mismatch or truncated file")]
    ChecksumError,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const MNIST: Shape = Shape {
        channels: 1,
        rows: 28,
        cols: 28,
    };

    pub fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Stride 1, same padding.
    Conv(ConvGeom),
    /// 2x2 window, stride 2, ceil mode.
    Pool(PoolGeom),
    Fc {
        in_size: usize,
        out_size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KindTag {
    Conv,
    Pool,
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, rows: usize, cols: usize) -> Self {
        Self {
            kind: LayerKind::Conv(ConvGeom {
                in_channels,
                out_channels,
                kernel,
                rows,
                cols,
            }),
            activation: Activation::Relu,
        }
    }

    pub fn pool(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            kind: LayerKind::Pool(PoolGeom { channels, rows, cols }),
            activation: Activation::None,
        }
    }

    pub fn fc(in_size: usize, out_size: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Fc { in_size, out_size },
            activation,
        }
    }

    pub fn tag(&self) -> KindTag {
        match self.kind {
            LayerKind::Conv(_) => KindTag::Conv,
            LayerKind::Pool(_) => KindTag::Pool,
            LayerKind::Fc { .. } => KindTag::Fc,
        }
    }

    pub fn input_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Conv(g) => Shape {
                channels: g.in_channels,
                rows: g.rows,
                cols: g.cols,
            },
            LayerKind::Pool(g) => Shape {
                channels: g.channels,
                rows: g.rows,
                cols: g.cols,
            },
            LayerKind::Fc { in_size, .. } => Shape {
                channels: in_size,
                rows: 1,
                cols: 1,
            },
        }
    }

    pub fn output_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Conv(g) => Shape {
                channels: g.out_channels,
                rows: g.rows,
                cols: g.cols,
            },
            LayerKind::Pool(g) => Shape {
                channels: g.channels,
                rows: g.out_rows(),
                cols: g.out_cols(),
            },
            LayerKind::Fc { out_size, .. } => Shape {
                channels: out_size,
                rows: 1,
                cols: 1,
            },
        }
    }

    /// Output neurons (fc) or channels (conv, pool).
    pub fn units(&self) -> usize {
        self.output_shape().channels
    }

    /// Output elements per unit.
    pub fn unit_len(&self) -> usize {
        let s = self.output_shape();
        s.rows * s.cols
    }

    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv(g) => g.out_channels * g.patch(),
            LayerKind::Pool(_) => 0,
            LayerKind::Fc { in_size, out_size } => in_size * out_size,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv(g) => g.out_channels,
            LayerKind::Pool(_) => 0,
            LayerKind::Fc { out_size, .. } => out_size,
        }
    }

    /// Incoming weights per unit.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv(g) => g.patch(),
            LayerKind::Pool(_) => 0,
            LayerKind::Fc { in_size, .. } => in_size,
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self.kind, LayerKind::Pool(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros(spec: &LayerSpec) -> Self {
        Self {
            weights: vec![T::zero(); spec.weight_len()],
            bias: vec![T::zero(); spec.bias_len()],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `true` marks a retained parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub weights: Vec<bool>,
    pub bias: Vec<bool>,
}

impl LayerMask {
    pub fn full(spec: &LayerSpec) -> Self {
        Self {
            weights: vec![true; spec.weight_len()],
            bias: vec![true; spec.bias_len()],
        }
    }

    pub fn retained(&self) -> usize {
        self.weights.iter().chain(&self.bias).filter(|&&m| m).count()
    }
}

/// A layer's output as transmitted at a cut: dead units are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub layer_index: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct FullOutput {
    pub probs: Vec<f32>,
    /// `activations[l - 1]` is the representation at cut `l`.
    pub activations: Vec<Representation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input: Shape,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams<f32>>,
    masks: Vec<LayerMask>,
    alive: Vec<Vec<bool>>,
}

pub fn validate_layers(input: Shape, layers: &[LayerSpec]) -> Result<(), ModelError> {
    let err = |msg: String| Err(ModelError::Architecture(msg));
    let Some(last) = layers.last() else {
        return err("model has no layers".into());
    };
    if !(matches!(last.kind, LayerKind::Fc { .. }) && last.activation == Activation::Softmax) {
        return err("final layer must be a softmax fc layer".into());
    }
    let mut cur = input;
    for (i, spec) in layers.iter().enumerate() {
        if spec.activation == Activation::Softmax && i + 1 != layers.len() {
            return err(format!("layer {}: softmax only allowed on the final layer", i + 1));
        }
        let ok = match spec.kind {
            LayerKind::Conv(g) => {
                if g.kernel % 2 == 0 || g.kernel == 0 {
                    return err(format!("layer {}: conv kernel must be odd", i + 1));
                }
                spec.input_shape() == cur
            }
            LayerKind::Pool(_) => {
                if spec.activation != Activation::None {
                    return err(format!("layer {}: pooling takes no activation", i + 1));
                }
                spec.input_shape() == cur
            }
            LayerKind::Fc { in_size, out_size } => in_size == cur.len() && out_size > 0,
        };
        if !ok {
            return err(format!(
                "layer {}: input {:?} does not chain from previous output {:?}",
                i + 1,
                spec.input_shape(),
                cur
            ));
        }
        cur = spec.output_shape();
    }
    Ok(())
}

/// conv(1→16)-pool, conv(16→32)-pool, conv(32→48)-pool, conv(48→64)-pool,
/// fc 256→512→256→128→64→10 (softmax). 5×5 same-padded kernels, ceil-mode
/// pooling: 28→14→7→4→2.
pub fn reference_layers() -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut side = 28;
    let mut channels = 1;
    for out in [16, 32, 48, 64] {
        layers.push(LayerSpec::conv(channels, out, 5, side, side));
        layers.push(LayerSpec::pool(out, side, side));
        channels = out;
        side = side.div_ceil(2);
    }
    let widths = [channels * side * side, 512, 256, 128, 64, 10];
    for (i, pair) in widths.windows(2).enumerate() {
        let act = if i + 2 == widths.len() {
            Activation::Softmax
        } else {
            Activation::Relu
        };
        layers.push(LayerSpec::fc(pair[0], pair[1], act));
    }
    layers
}

pub fn build_reference_model(seed: u64) -> ModelGraph {
    ModelGraph::new(Shape::MNIST, reference_layers(), seed).expect("reference architecture is valid")
}

enum Cache<T> {
    None,
    Conv { cols: Vec<T> },
    Pool { arg: Vec<u32> },
}

/// Activations (and backprop caches) of a single sample.
pub(crate) struct Trace<T> {
    /// `outputs[l]` is the post-activation output at cut `l`; `outputs[0]` is the input.
    pub outputs: Vec<Vec<T>>,
    caches: Vec<Cache<T>>,
}

fn layer_forward<T: Real>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    input: &[T],
    keep_cache: bool,
) -> (Vec<T>, Cache<T>) {
    let (mut out, cache) = match spec.kind {
        LayerKind::Conv(g) => {
            let mut cols = Vec::new();
            let out = kernels::conv_forward(&g, &params.weights, &params.bias, input, &mut cols);
            (out, if keep_cache { Cache::Conv { cols } } else { Cache::None })
        }
        LayerKind::Pool(g) => {
            let (out, arg) = kernels::pool_forward(&g, input);
            (out, if keep_cache { Cache::Pool { arg } } else { Cache::None })
        }
        LayerKind::Fc { in_size, out_size } => (
            kernels::fc_forward(in_size, out_size, &params.weights, &params.bias, input),
            Cache::None,
        ),
    };
    match spec.activation {
        Activation::None => {}
        Activation::Relu => kernels::relu_in_place(&mut out),
        Activation::Softmax => kernels::softmax_in_place(&mut out),
    }
    (out, cache)
}

/// Runs layers `from..to` (0-based layer positions) on `input`.
pub(crate) fn run_range<T: Real>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    input: Vec<T>,
    from: usize,
    to: usize,
    keep: bool,
) -> Trace<T> {
    let mut outputs = Vec::with_capacity(to - from + 1);
    let mut caches = Vec::with_capacity(to - from);
    outputs.push(input);
    for l in from..to {
        let (out, cache) = layer_forward(&layers[l], &params[l], outputs.last().unwrap(), keep);
        outputs.push(out);
        caches.push(cache);
    }
    Trace { outputs, caches }
}

/// Gradients of `grad_probs_logits` (gradient w.r.t. the final pre-softmax
/// logits) back through all layers. Writes per-layer parameter gradients
/// into `grads` (overwriting).
pub(crate) fn backprop<T: Real>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    trace: &Trace<T>,
    grad_logits: Vec<T>,
    grads: &mut [LayerParams<T>],
) {
    let mut grad = grad_logits;
    for l in (0..layers.len()).rev() {
        let spec = &layers[l];
        let out = &trace.outputs[l + 1];
        let input = &trace.outputs[l];
        if spec.activation == Activation::Relu {
            for (g, &o) in grad.iter_mut().zip(out) {
                if o <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        let want_input = l > 0;
        let next = match (&spec.kind, &trace.caches[l]) {
            (LayerKind::Conv(g), Cache::Conv { cols }) => {
                let gp = &mut grads[l];
                kernels::conv_backward(
                    g,
                    &params[l].weights,
                    cols,
                    &grad,
                    &mut gp.weights,
                    &mut gp.bias,
                    want_input,
                )
            }
            (LayerKind::Pool(g), Cache::Pool { arg }) => want_input.then(|| kernels::pool_backward(g, arg, &grad)),
            (LayerKind::Fc { in_size, out_size }, _) => {
                let gp = &mut grads[l];
                kernels::fc_backward(
                    *in_size,
                    *out_size,
                    &params[l].weights,
                    input,
                    &grad,
                    &mut gp.weights,
                    &mut gp.bias,
                    want_input,
                )
            }
            _ => unreachable!("trace recorded without caches"),
        };
        match next {
            Some(g) => grad = g,
            None => break,
        }
    }
}

impl ModelGraph {
    /// He-uniform weights drawn from `seed`, zero biases, all parameters retained.
    pub fn new(input: Shape, layers: Vec<LayerSpec>, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(input, layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (spec, p) in model.layers.iter().zip(&mut model.params) {
            if !spec.has_params() {
                continue;
            }
            let bound = (6.0 / spec.fan_in() as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            p.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        }
        Ok(model)
    }

    pub fn zeros(input: Shape, layers: Vec<LayerSpec>) -> Result<Self, ModelError> {
        validate_layers(input, &layers)?;
        let params = layers.iter().map(LayerParams::zeros).collect();
        let masks = layers.iter().map(LayerMask::full).collect();
        let alive = layers.iter().map(|s| vec![true; s.units()]).collect();
        Ok(Self {
            input,
            layers,
            params,
            masks,
            alive,
        })
    }

    pub(crate) fn from_parts(
        input: Shape,
        layers: Vec<LayerSpec>,
        params: Vec<LayerParams<f32>>,
        masks: Vec<LayerMask>,
        alive: Vec<Vec<bool>>,
    ) -> Result<Self, ModelError> {
        validate_layers(input, &layers)?;
        for (l, spec) in layers.iter().enumerate() {
            if params[l].weights.len() != spec.weight_len()
                || params[l].bias.len() != spec.bias_len()
                || masks[l].weights.len() != spec.weight_len()
                || masks[l].bias.len() != spec.bias_len()
                || alive[l].len() != spec.units()
            {
                return Err(ModelError::Malformed(format!("layer {} parameter sizes", l + 1)));
            }
        }
        Ok(Self {
            input,
            layers,
            params,
            masks,
            alive,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &[LayerParams<f32>] {
        &self.params
    }

    /// Direct parameter access; call [`ModelGraph::apply_masks`] afterwards
    /// to restore the masked-zero invariant.
    pub fn params_mut(&mut self) -> &mut [LayerParams<f32>] {
        &mut self.params
    }

    pub fn masks(&self) -> &[LayerMask] {
        &self.masks
    }

    pub fn masks_mut(&mut self) -> &mut [LayerMask] {
        &mut self.masks
    }

    pub fn alive(&self) -> &[Vec<bool>] {
        &self.alive
    }

    pub(crate) fn alive_mut(&mut self) -> &mut [Vec<bool>] {
        &mut self.alive
    }

    /// Zeroes every parameter whose mask bit is cleared.
    pub fn apply_masks(&mut self) {
        for (p, m) in self.params.iter_mut().zip(&self.masks) {
            for (w, &keep) in p.weights.iter_mut().zip(&m.weights) {
                if !keep {
                    *w = 0.0;
                }
            }
            for (b, &keep) in p.bias.iter_mut().zip(&m.bias) {
                if !keep {
                    *b = 0.0;
                }
            }
        }
    }

    /// Same weights with every mask bit set and every unit alive.
    pub fn dense_view(&self) -> ModelGraph {
        let mut m = self.clone();
        m.masks = m.layers.iter().map(LayerMask::full).collect();
        m.alive = m.layers.iter().map(|s| vec![true; s.units()]).collect();
        m
    }

    /// Total parameter slots (weights + biases).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(LayerParams::len).sum()
    }

    /// Parameters whose mask bit is set.
    pub fn retained_count(&self) -> usize {
        self.masks.iter().map(LayerMask::retained).sum()
    }

    /// Human-readable names: conv1, pool1, ..., fc1, ...
    pub fn layer_names(&self) -> Vec<String> {
        let mut counts = [0usize; 3];
        self.layers
            .iter()
            .map(|s| {
                let (i, prefix) = match s.tag() {
                    KindTag::Conv => (0, "conv"),
                    KindTag::Pool => (1, "pool"),
                    KindTag::Fc => (2, "fc"),
                };
                counts[i] += 1;
                format!("{prefix}{}", counts[i])
            })
            .collect()
    }

    /// Cut index of the first pooling layer.
    pub fn first_pool_cut(&self) -> Option<usize> {
        self.layers.iter().position(|s| s.tag() == KindTag::Pool).map(|i| i + 1)
    }

    fn check_cut(&self, cut: usize) -> Result<(), ModelError> {
        if cut > self.depth() {
            return Err(ModelError::BadCutIndex {
                cut,
                layers: self.depth(),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &[f32]) -> Result<(), ModelError> {
        if input.len() != self.input.len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.input.len(),
                found: input.len(),
            });
        }
        Ok(())
    }

    /// Alive output elements at cut `l` (`d` of the transmitted representation).
    pub fn output_size(&self, cut: usize) -> Result<usize, ModelError> {
        self.check_cut(cut)?;
        if cut == 0 {
            return Ok(self.input.len());
        }
        let spec = &self.layers[cut - 1];
        let alive = self.alive[cut - 1].iter().filter(|&&a| a).count();
        Ok(alive * spec.unit_len())
    }

    fn compact(&self, cut: usize, full: &[f32]) -> Representation {
        if cut == 0 {
            return Representation {
                layer_index: 0,
                values: full.to_vec(),
            };
        }
        let unit = self.layers[cut - 1].unit_len();
        let alive = &self.alive[cut - 1];
        let values = if alive.iter().all(|&a| a) {
            full.to_vec()
        } else {
            full.chunks(unit)
                .zip(alive)
                .filter(|(_, &a)| a)
                .flat_map(|(c, _)| c.iter().copied())
                .collect()
        };
        Representation {
            layer_index: cut,
            values,
        }
    }

    fn expand(&self, rep: &Representation) -> Result<Vec<f32>, ModelError> {
        self.check_cut(rep.layer_index)?;
        let expected = self.output_size(rep.layer_index)?;
        if rep.values.len() != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                found: rep.values.len(),
            });
        }
        if rep.layer_index == 0 {
            return Ok(rep.values.clone());
        }
        let spec = &self.layers[rep.layer_index - 1];
        let unit = spec.unit_len();
        let mut full = vec![0.0; spec.units() * unit];
        let mut src = rep.values.chunks(unit);
        for (dst, &a) in full.chunks_mut(unit).zip(&self.alive[rep.layer_index - 1]) {
            if a {
                dst.copy_from_slice(src.next().expect("sizes checked"));
            }
        }
        Ok(full)
    }

    pub fn forward_full(&self, input: &[f32]) -> Result<FullOutput, ModelError> {
        self.check_input(input)?;
        let trace = run_range(&self.layers, &self.params, input.to_vec(), 0, self.depth(), false);
        let activations = trace
            .outputs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(l, out)| self.compact(l, out))
            .collect();
        Ok(FullOutput {
            probs: trace.outputs.last().cloned().unwrap_or_default(),
            activations,
        })
    }

    /// Client side: the representation emitted at `cut`.
    pub fn forward_prefix(&self, input: &[f32], cut: usize) -> Result<Representation, ModelError> {
        self.check_input(input)?;
        self.check_cut(cut)?;
        let trace = run_range(&self.layers, &self.params, input.to_vec(), 0, cut, false);
        Ok(self.compact(cut, trace.outputs.last().unwrap()))
    }

    /// Server side: finishes inference from a received representation.
    pub fn resume(&self, rep: &Representation) -> Result<Vec<f32>, ModelError> {
        let full = self.expand(rep)?;
        let trace = run_range(&self.layers, &self.params, full, rep.layer_index, self.depth(), false);
        Ok(trace.outputs.last().cloned().unwrap_or_default())
    }

    pub fn predict(&self, input: &[f32]) -> Result<usize, ModelError> {
        let probs = self.forward_full(input)?.probs;
        Ok(argmax(&probs))
    }

    /// Parameters converted to another scalar type.
    pub fn params_as<T: Real>(&self) -> Vec<LayerParams<T>> {
        self.params
            .iter()
            .map(|p| LayerParams {
                weights: p.weights.iter().map(|&w| T::from_f32(w)).collect(),
                bias: p.bias.iter().map(|&b| T::from_f32(b)).collect(),
            })
            .collect()
    }
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f32::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}
