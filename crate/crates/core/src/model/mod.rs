//! Small VGG-style convolutional classifier.
//!
//! Architecture: `conv_blocks` × (3×3 same-padded convolution → ReLU →
//! optional 2×2 max-pool), flatten, `head` × (dense → ReLU), dense to
//! `classes` logits, softmax. Pixels are scaled from `[0, 255]` to `[0, 1]`
//! with no mean subtraction. The embedding used by triplet training is the
//! output of the last hidden dense layer, L2-normalized.
//!
//! Training and gradient checks run in `f64` on a [`Network`]; persisted
//! parameters are `f32` ([`Checkpoint`]).

mod checkpoint;
mod gradcheck;
mod train;

pub use checkpoint::{Checkpoint, TrainingProvenance, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{gradient_check, GradCheck, GradSample};
pub use train::{
    cross_entropy, l2_normalize, l2_normalize_backward, loss_and_grads, train_step, triplet_loss, triplet_loss_grad,
    Adam, Batch, LossSpec, StepMetrics, TripletExample,
};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_width: u32,
    pub input_height: u32,
    pub conv_blocks: Vec<ConvBlock>,
    /// Hidden dense layer sizes; the last one is the embedding.
    pub head: Vec<usize>,
    /// One name per output class, in logit order.
    pub class_names: Vec<String>,
    pub weight_init_seed: u64,
}

impl ClassifierConfig {
    /// Desk-scale default: 16/32/64 filters, 3×3, max-pool, 128-unit head.
    pub fn desk(class_names: Vec<String>, weight_init_seed: u64) -> Self {
        Self {
            input_width: crate::corpus::FACE_WIDTH,
            input_height: crate::corpus::FACE_HEIGHT,
            conv_blocks: [16, 32, 64].iter().map(|&filters| ConvBlock { filters, kernel: 3, pool: true }).collect(),
            head: vec![128],
            class_names,
            weight_init_seed,
        }
    }

    pub fn gender(weight_init_seed: u64) -> Self {
        Self::desk(vec!["Male".into(), "Female".into()], weight_init_seed)
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names.iter().position(|c| c == name).ok_or_else(|| Error::LabelMismatch(name.to_owned()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::NoConvLayer);
        }
        if self.class_names.is_empty() {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let (mut h, mut w) = (self.input_height as usize, self.input_width as usize);
        for b in &self.conv_blocks {
            if b.kernel % 2 == 0 || b.filters == 0 {
                return Err(Error::Config(format!("conv block {b:?}: kernel must be odd, filters positive")));
            }
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("input too small for the pooling stack".into()));
        }
        if self.head.contains(&0) {
            return Err(Error::Config("dense layer of width 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool,
    Dense(Dense),
}

/// Activations recorded by [`Network::trace`]; `acts[i]` is the input of
/// layer `i` and `acts[layers.len()]` the logits.
#[derive(Clone, Debug)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    start: usize,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace has logits")
    }
}

/// Parameter gradients, one vector per tensor in [`Network::params`] order.
pub type Grads = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ClassifierConfig,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

impl Network {
    /// He-normal weights and zero biases from `config.weight_init_seed`.
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.weight_init_seed);
        let mut layers = Vec::new();
        let mut shapes = Vec::new();
        let mut shape = Shape { c: 3, h: config.input_height as usize, w: config.input_width as usize };
        let mut he = |fan_in: usize, n: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        for b in &config.conv_blocks {
            shapes.push(shape);
            let fan_in = shape.c * b.kernel * b.kernel;
            layers.push(Layer::Conv(Conv2d {
                in_c: shape.c,
                out_c: b.filters,
                k: b.kernel,
                weight: he(fan_in, b.filters * fan_in),
                bias: vec![0.0; b.filters],
            }));
            shape.c = b.filters;
            shapes.push(shape);
            layers.push(Layer::Relu);
            if b.pool {
                shapes.push(shape);
                layers.push(Layer::MaxPool);
                shape.h /= 2;
                shape.w /= 2;
            }
        }
        let mut width = shape.len();
        for &h in &config.head {
            shapes.push(Shape { c: width, h: 1, w: 1 });
            layers.push(Layer::Dense(Dense { inputs: width, outputs: h, weight: he(width, h * width), bias: vec![0.0; h] }));
            shapes.push(Shape { c: h, h: 1, w: 1 });
            layers.push(Layer::Relu);
            width = h;
        }
        shapes.push(Shape { c: width, h: 1, w: 1 });
        let classes = config.classes();
        layers.push(Layer::Dense(Dense {
            inputs: width,
            outputs: classes,
            weight: he(width, classes * width),
            bias: vec![0.0; classes],
        }));
        shapes.push(Shape { c: classes, h: 1, w: 1 });
        Ok(Self { config, layers, shapes })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Shape of activation `i` (input of layer `i`).
    pub fn shape(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    /// Activation index of the embedding (input of the final dense layer).
    pub fn embedding_index(&self) -> Option<usize> {
        (!self.config.head.is_empty()).then(|| self.layers.len() - 1)
    }

    /// Activation index of conv block `block`'s post-ReLU, pre-pool output.
    pub fn conv_output_index(&self, block: usize) -> Option<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_)))
            .nth(block)
            .map(|(i, _)| i + 2)
    }

    pub fn conv_blocks(&self) -> usize {
        self.config.conv_blocks.len()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => out.extend([c.weight.as_slice(), c.bias.as_slice()]),
                Layer::Dense(d) => out.extend([d.weight.as_slice(), d.bias.as_slice()]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                _ => {}
            }
        }
        out
    }

    /// `(name, shape)` of every parameter tensor.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let (mut conv, mut dense) = (0, 0);
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("conv{conv}.weight"), vec![c.out_c, c.in_c, c.k, c.k]));
                    out.push((format!("conv{conv}.bias"), vec![c.out_c]));
                    conv += 1;
                }
                Layer::Dense(d) => {
                    out.push((format!("dense{dense}.weight"), vec![d.outputs, d.inputs]));
                    out.push((format!("dense{dense}.bias"), vec![d.outputs]));
                    dense += 1;
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Scales pixels to `[0, 1]` in channel-major order.
    pub fn input_from_image(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        let s = self.input_shape();
        if img.width() as usize != s.w || img.height() as usize != s.h {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}x{} input, got {}x{}",
                s.w,
                s.h,
                img.width(),
                img.height()
            )));
        }
        let plane = s.h * s.w;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in img.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Ok(out)
    }

    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_shape().len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, model expects {}",
                input.len(),
                self.input_shape().len()
            )));
        }
        self.trace_from(0, input.to_vec())
    }

    /// Runs layers `start..` on activation `start`.
    pub fn trace_from(&self, start: usize, act: Vec<f64>) -> Result<Trace> {
        if act.len() != self.shapes[start].len() {
            return Err(Error::ShapeMismatch(format!("activation {start} needs {} values", self.shapes[start].len())));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1 - start);
        let mut pool_argmax = Vec::with_capacity(self.layers.len() - start);
        acts.push(act);
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let x = acts.last().expect("non-empty");
            let shape = self.shapes[i];
            let (y, argmax) = match layer {
                Layer::Conv(c) => (conv_forward(c, shape, x), None),
                Layer::Relu => (x.iter().map(|v| v.max(0.0)).collect(), None),
                Layer::MaxPool => {
                    let (y, idx) = pool_forward(shape, x);
                    (y, Some(idx))
                }
                Layer::Dense(d) => (dense_forward(d, x), None),
            };
            acts.push(y);
            pool_argmax.push(argmax);
        }
        if start > 0 {
            // Pad so indices line up with layer numbers.
            let mut padded = vec![Vec::new(); start];
            padded.extend(acts);
            acts = padded;
            let mut padded_idx = vec![None; start];
            padded_idx.extend(pool_argmax);
            pool_argmax = padded_idx;
        }
        Ok(Trace { acts, pool_argmax, start })
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.acts.pop().expect("logits"))
    }

    /// Class probabilities for an image.
    pub fn forward(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(&self.input_from_image(img)?)?))
    }

    /// Backpropagates gradient seeds through the trace.
    ///
    /// `seeds` adds `dL/d(activation i)` contributions; the logits are
    /// activation `layers.len()`. Returns parameter gradients and, when
    /// `capture` is set, the total gradient at that activation index.
    pub fn backward(&self, trace: &Trace, seeds: &[(usize, &[f64])], capture: Option<usize>) -> (Grads, Option<Vec<f64>>) {
        let n = self.layers.len();
        let start = trace.start;
        let mut grads = self.zero_grads();
        let mut offsets = Vec::with_capacity(n);
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            if matches!(l, Layer::Conv(_) | Layer::Dense(_)) {
                k += 2;
            }
        }
        let add_seeds = |delta: &mut Vec<f64>, idx: usize| {
            for (i, g) in seeds {
                if *i == idx {
                    for (d, v) in delta.iter_mut().zip(g.iter()) {
                        *d += v;
                    }
                }
            }
        };
        let mut delta = vec![0.0; self.shapes[n].len()];
        add_seeds(&mut delta, n);
        let mut captured = (capture == Some(n)).then(|| delta.clone());
        for i in (start..n).rev() {
            let x = &trace.acts[i];
            let shape = self.shapes[i];
            let want_input = i > start || capture == Some(i);
            delta = match &self.layers[i] {
                Layer::Conv(c) => {
                    let (gw, gb) = split_two(&mut grads, offsets[i]);
                    conv_backward(c, shape, x, &delta, gw, gb, want_input)
                }
                Layer::Relu => delta.iter().zip(x).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect(),
                Layer::MaxPool => {
                    let idx = trace.pool_argmax[i].as_ref().expect("pool argmax recorded");
                    let mut dx = vec![0.0; shape.len()];
                    for (o, &src) in idx.iter().enumerate() {
                        dx[src] += delta[o];
                    }
                    dx
                }
                Layer::Dense(d) => {
                    let (gw, gb) = split_two(&mut grads, offsets[i]);
                    dense_backward(d, x, &delta, gw, gb)
                }
            };
            add_seeds(&mut delta, i);
            if capture == Some(i) {
                captured = Some(delta.clone());
            }
        }
        (grads, captured)
    }
}

fn split_two(grads: &mut Grads, at: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = grads[at..at + 2].split_at_mut(1);
    (a[0].as_mut_slice(), b[0].as_mut_slice())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn conv_forward(c: &Conv2d, s: Shape, x: &[f64]) -> Vec<f64> {
    let (h, w, k) = (s.h, s.w, c.k);
    let pad = k / 2;
    let plane = h * w;
    let mut out = vec![0.0; c.out_c * plane];
    for o in 0..c.out_c {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(c.bias[o]);
        for i in 0..c.in_c {
            let in_plane = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = c.weight[((o * c.in_c + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let y_lo = pad.saturating_sub(ky);
                    let y_hi = (h + pad).saturating_sub(ky).min(h);
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    for y in y_lo..y_hi {
                        let sy = y + ky - pad;
                        let src = &in_plane[sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad];
                        let dst = &mut out_plane[y * w + x_lo..y * w + x_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    c: &Conv2d,
    s: Shape,
    x: &[f64],
    delta: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Vec<f64> {
    let (h, w, k) = (s.h, s.w, c.k);
    let pad = k / 2;
    let plane = h * w;
    let mut dx = if want_input { vec![0.0; c.in_c * plane] } else { Vec::new() };
    for o in 0..c.out_c {
        let d_plane = &delta[o * plane..(o + 1) * plane];
        gb[o] += d_plane.iter().sum::<f64>();
        for i in 0..c.in_c {
            let in_plane = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * c.in_c + i) * k + ky) * k + kx;
                    let wv = c.weight[widx];
                    let y_lo = pad.saturating_sub(ky);
                    let y_hi = (h + pad).saturating_sub(ky).min(h);
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = y + ky - pad;
                        let src_range = sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad;
                        let d_row = &d_plane[y * w + x_lo..y * w + x_hi];
                        for (d, s) in d_row.iter().zip(&in_plane[src_range.clone()]) {
                            acc += d * s;
                        }
                        if want_input {
                            let dst = &mut dx[i * plane + src_range.start..i * plane + src_range.end];
                            for (g, d) in dst.iter_mut().zip(d_row) {
                                *g += wv * d;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    dx
}

fn pool_forward(s: Shape, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    let mut idx = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        let base = c * s.h * s.w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * s.w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * s.w + 2 * xo + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

fn dense_forward(d: &Dense, x: &[f64]) -> Vec<f64> {
    (0..d.outputs)
        .map(|j| d.bias[j] + d.weight[j * d.inputs..(j + 1) * d.inputs].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

fn dense_backward(d: &Dense, x: &[f64], delta: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; d.inputs];
    for j in 0..d.outputs {
        let dj = delta[j];
        gb[j] += dj;
        if dj == 0.0 {
            continue;
        }
        let row = &d.weight[j * d.inputs..(j + 1) * d.inputs];
        let grow = &mut gw[j * d.inputs..(j + 1) * d.inputs];
        for ((g, xv), (dxv, wv)) in grow.iter_mut().zip(x).zip(dx.iter_mut().zip(row)) {
            *g += dj * xv;
            *dxv += dj * wv;
        }
    }
    dx
}
